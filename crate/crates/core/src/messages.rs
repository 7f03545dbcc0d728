//! Typed views of the CTAP parameter and response maps this lab uses.
//!
//! Both the authenticator and the clients (honest or malicious) go through
//! these, so the map layouts live in exactly one place.

use crate::cbor::{encode_canonical, CborMap, CborValue};
use crate::codec::{ClientPinSub, CredMgmtSub, StatusCode};
use crate::crypto::sha256;

pub const PIN_PROTOCOL_ONE: u64 = 1;

/// Lab-only ClientPin key selecting the PIN slot (dedicated destructive PIN).
pub const PIN_SLOT_KEY: i64 = 0x20;
/// Lab-only GetInfo key advertising the discoverable-credential capacity.
pub const INFO_MAX_DISCOVERABLE_KEY: i64 = 0x20;
/// Lab-only GetAssertion response key carrying the credBlob contents.
pub const ASSERTION_CRED_BLOB_KEY: i64 = 0x0a;

type Res<T> = Result<T, StatusCode>;

fn bytes_field(m: &CborMap, key: i64) -> Res<Option<Vec<u8>>> {
    match m.get_int(key) {
        None => Ok(None),
        Some(v) => v.as_bytes().map(|b| Some(b.to_vec())).ok_or(StatusCode::InvalidParameter),
    }
}

fn uint_field(m: &CborMap, key: i64) -> Res<Option<u64>> {
    match m.get_int(key) {
        None => Ok(None),
        Some(v) => v.as_u64().map(Some).ok_or(StatusCode::InvalidParameter),
    }
}

fn hash32(v: Vec<u8>) -> Res<[u8; 32]> {
    v.try_into().map_err(|_| StatusCode::InvalidLength)
}

/// Credential protection level (credProtect extension values).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ProtectPolicy {
    UvOptional,
    UvOptionalWithCredIdList,
    UvRequired,
}

impl ProtectPolicy {
    pub fn to_u64(self) -> u64 {
        match self {
            ProtectPolicy::UvOptional => 1,
            ProtectPolicy::UvOptionalWithCredIdList => 2,
            ProtectPolicy::UvRequired => 3,
        }
    }

    pub fn from_u64(v: u64) -> Option<Self> {
        match v {
            1 => Some(ProtectPolicy::UvOptional),
            2 => Some(ProtectPolicy::UvOptionalWithCredIdList),
            3 => Some(ProtectPolicy::UvRequired),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ProtectPolicy::UvOptional => "UVOptional",
            ProtectPolicy::UvOptionalWithCredIdList => "UVOptionalWithCredIDList",
            ProtectPolicy::UvRequired => "UVRequired",
        }
    }
}

fn descriptor(id: &[u8]) -> CborValue {
    CborMap::new().with("id", id).with("type", "public-key").into()
}

fn descriptor_id(v: &CborValue) -> Res<Vec<u8>> {
    v.as_map()
        .and_then(|m| m.get_text("id"))
        .and_then(CborValue::as_bytes)
        .map(<[u8]>::to_vec)
        .ok_or(StatusCode::InvalidParameter)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MakeCredentialParams {
    pub client_data_hash: [u8; 32],
    pub rp_id: String,
    pub user_id: Vec<u8>,
    pub user_name: String,
    pub rk: bool,
    pub cred_protect: Option<ProtectPolicy>,
    pub cred_blob: Option<Vec<u8>>,
    pub pin_auth: Option<Vec<u8>>,
    pub pin_protocol: Option<u64>,
}

impl MakeCredentialParams {
    pub fn to_map(&self) -> CborMap {
        let mut m = CborMap::new()
            .with(1, self.client_data_hash.to_vec())
            .with(2, CborMap::new().with("id", self.rp_id.as_str()))
            .with(
                3,
                CborMap::new()
                    .with("id", self.user_id.clone())
                    .with("name", self.user_name.as_str()),
            )
            .with(
                4,
                vec![CborValue::from(CborMap::new().with("alg", -7).with("type", "public-key"))],
            );
        let mut ext = CborMap::new();
        if let Some(p) = self.cred_protect {
            ext.insert("credProtect", p.to_u64());
        }
        if let Some(b) = &self.cred_blob {
            ext.insert("credBlob", b.clone());
        }
        if !ext.is_empty() {
            m.insert(6, ext);
        }
        m.insert(7, CborMap::new().with("rk", self.rk));
        if let Some(a) = &self.pin_auth {
            m.insert(8, a.clone());
        }
        if let Some(p) = self.pin_protocol {
            m.insert(9, p);
        }
        m
    }

    pub fn from_map(m: &CborMap) -> Res<Self> {
        let client_data_hash = hash32(bytes_field(m, 1)?.ok_or(StatusCode::MissingParameter)?)?;
        let rp = m.get_int(2).and_then(CborValue::as_map).ok_or(StatusCode::MissingParameter)?;
        let rp_id = rp
            .get_text("id")
            .and_then(CborValue::as_text)
            .ok_or(StatusCode::MissingParameter)?
            .to_owned();
        let user = m.get_int(3).and_then(CborValue::as_map).ok_or(StatusCode::MissingParameter)?;
        let user_id = user
            .get_text("id")
            .and_then(CborValue::as_bytes)
            .ok_or(StatusCode::MissingParameter)?
            .to_vec();
        if user_id.is_empty() || user_id.len() > 64 {
            return Err(StatusCode::InvalidParameter);
        }
        let user_name = user
            .get_text("name")
            .and_then(CborValue::as_text)
            .unwrap_or_default()
            .to_owned();
        let (mut cred_protect, mut cred_blob) = (None, None);
        if let Some(ext) = m.get_int(6) {
            let ext = ext.as_map().ok_or(StatusCode::InvalidParameter)?;
            if let Some(p) = ext.get_text("credProtect") {
                cred_protect = Some(
                    p.as_u64()
                        .and_then(ProtectPolicy::from_u64)
                        .ok_or(StatusCode::InvalidParameter)?,
                );
            }
            if let Some(b) = ext.get_text("credBlob") {
                cred_blob = Some(b.as_bytes().ok_or(StatusCode::InvalidParameter)?.to_vec());
            }
        }
        let rk = match m.get_int(7) {
            None => false,
            Some(o) => o
                .as_map()
                .ok_or(StatusCode::InvalidParameter)?
                .get_text("rk")
                .map(|v| v.as_bool().ok_or(StatusCode::InvalidParameter))
                .transpose()?
                .unwrap_or(false),
        };
        Ok(MakeCredentialParams {
            client_data_hash,
            rp_id,
            user_id,
            user_name,
            rk,
            cred_protect,
            cred_blob,
            pin_auth: bytes_field(m, 8)?,
            pin_protocol: uint_field(m, 9)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GetAssertionParams {
    pub rp_id: String,
    pub client_data_hash: [u8; 32],
    pub allow_list: Vec<Vec<u8>>,
    pub want_cred_blob: bool,
    pub up: bool,
    pub pin_auth: Option<Vec<u8>>,
    pub pin_protocol: Option<u64>,
}

impl GetAssertionParams {
    pub fn new(rp_id: &str, client_data_hash: [u8; 32]) -> Self {
        GetAssertionParams {
            rp_id: rp_id.to_owned(),
            client_data_hash,
            allow_list: Vec::new(),
            want_cred_blob: false,
            up: true,
            pin_auth: None,
            pin_protocol: None,
        }
    }

    pub fn to_map(&self) -> CborMap {
        let mut m = CborMap::new()
            .with(1, self.rp_id.as_str())
            .with(2, self.client_data_hash.to_vec());
        if !self.allow_list.is_empty() {
            m.insert(3, self.allow_list.iter().map(|id| descriptor(id)).collect::<Vec<_>>());
        }
        if self.want_cred_blob {
            m.insert(4, CborMap::new().with("credBlob", true));
        }
        if !self.up {
            m.insert(5, CborMap::new().with("up", false));
        }
        if let Some(a) = &self.pin_auth {
            m.insert(6, a.clone());
        }
        if let Some(p) = self.pin_protocol {
            m.insert(7, p);
        }
        m
    }

    pub fn from_map(m: &CborMap) -> Res<Self> {
        let rp_id = m
            .get_int(1)
            .and_then(CborValue::as_text)
            .ok_or(StatusCode::MissingParameter)?
            .to_owned();
        let client_data_hash = hash32(bytes_field(m, 2)?.ok_or(StatusCode::MissingParameter)?)?;
        let allow_list = match m.get_int(3) {
            None => Vec::new(),
            Some(v) => v
                .as_array()
                .ok_or(StatusCode::InvalidParameter)?
                .iter()
                .map(descriptor_id)
                .collect::<Res<Vec<_>>>()?,
        };
        let want_cred_blob = m
            .get_int(4)
            .and_then(CborValue::as_map)
            .and_then(|e| e.get_text("credBlob"))
            .and_then(CborValue::as_bool)
            .unwrap_or(false);
        let up = match m.get_int(5) {
            None => true,
            Some(o) => o
                .as_map()
                .ok_or(StatusCode::InvalidParameter)?
                .get_text("up")
                .map(|v| v.as_bool().ok_or(StatusCode::InvalidParameter))
                .transpose()?
                .unwrap_or(true),
        };
        Ok(GetAssertionParams {
            rp_id,
            client_data_hash,
            allow_list,
            want_cred_blob,
            up,
            pin_auth: bytes_field(m, 6)?,
            pin_protocol: uint_field(m, 7)?,
        })
    }
}

/// Which PIN a ClientPin request addresses. The destructive slot only exists
/// with the dedicated-destructive-PIN countermeasure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum PinSlot {
    #[default]
    Normal,
    Destructive,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientPinParams {
    pub sub: ClientPinSub,
    pub protocol: Option<u64>,
    pub key_agreement: Option<CborMap>,
    pub pin_auth: Option<Vec<u8>>,
    pub new_pin_enc: Option<Vec<u8>>,
    pub pin_hash_enc: Option<Vec<u8>>,
    pub slot: PinSlot,
}

impl ClientPinParams {
    pub fn new(sub: ClientPinSub) -> Self {
        ClientPinParams {
            sub,
            protocol: Some(PIN_PROTOCOL_ONE),
            key_agreement: None,
            pin_auth: None,
            new_pin_enc: None,
            pin_hash_enc: None,
            slot: PinSlot::Normal,
        }
    }

    /// Parameter map without the subcommand key (the request constructor adds it).
    pub fn to_map(&self) -> CborMap {
        let mut m = CborMap::new();
        if let Some(p) = self.protocol {
            m.insert(1, p);
        }
        if let Some(k) = &self.key_agreement {
            m.insert(3, k.clone());
        }
        if let Some(a) = &self.pin_auth {
            m.insert(4, a.clone());
        }
        if let Some(e) = &self.new_pin_enc {
            m.insert(5, e.clone());
        }
        if let Some(e) = &self.pin_hash_enc {
            m.insert(6, e.clone());
        }
        if self.slot == PinSlot::Destructive {
            m.insert(PIN_SLOT_KEY, 1);
        }
        m
    }

    pub fn from_map(sub: ClientPinSub, m: &CborMap) -> Res<Self> {
        let key_agreement = match m.get_int(3) {
            None => None,
            Some(v) => Some(v.as_map().ok_or(StatusCode::InvalidParameter)?.clone()),
        };
        let slot = match uint_field(m, PIN_SLOT_KEY)? {
            None | Some(0) => PinSlot::Normal,
            Some(1) => PinSlot::Destructive,
            Some(_) => return Err(StatusCode::InvalidParameter),
        };
        Ok(ClientPinParams {
            sub,
            protocol: uint_field(m, 1)?,
            key_agreement,
            pin_auth: bytes_field(m, 4)?,
            new_pin_enc: bytes_field(m, 5)?,
            pin_hash_enc: bytes_field(m, 6)?,
            slot,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CredMgmtParams {
    pub sub: CredMgmtSub,
    pub rp_id_hash: Option<[u8; 32]>,
    pub credential_id: Option<Vec<u8>>,
    pub pin_auth: Option<Vec<u8>>,
    pub protocol: Option<u64>,
}

impl CredMgmtParams {
    pub fn new(sub: CredMgmtSub) -> Self {
        CredMgmtParams { sub, rp_id_hash: None, credential_id: None, pin_auth: None, protocol: None }
    }

    pub fn sub_params(&self) -> Option<CborMap> {
        let mut m = CborMap::new();
        if let Some(h) = self.rp_id_hash {
            m.insert(1, h.to_vec());
        }
        if let Some(id) = &self.credential_id {
            m.insert(2, descriptor(id));
        }
        (!m.is_empty()).then_some(m)
    }

    /// The bytes a `pinUvAuthParam` is computed over: subcommand byte followed
    /// by the encoded subcommand parameters, if any.
    pub fn auth_message(&self) -> Vec<u8> {
        let mut msg = vec![self.sub.to_byte()];
        if let Some(p) = self.sub_params() {
            msg.extend(encode_canonical(&p.into()));
        }
        msg
    }

    pub fn to_map(&self) -> CborMap {
        let mut m = CborMap::new();
        if let Some(p) = self.sub_params() {
            m.insert(2, p);
        }
        if let Some(p) = self.protocol {
            m.insert(3, p);
        }
        if let Some(a) = &self.pin_auth {
            m.insert(4, a.clone());
        }
        m
    }

    pub fn from_map(sub: CredMgmtSub, m: &CborMap) -> Res<Self> {
        let (mut rp_id_hash, mut credential_id) = (None, None);
        if let Some(sp) = m.get_int(2) {
            let sp = sp.as_map().ok_or(StatusCode::InvalidParameter)?;
            if let Some(h) = bytes_field(sp, 1)? {
                rp_id_hash = Some(hash32(h)?);
            }
            if let Some(d) = sp.get_int(2) {
                credential_id = Some(descriptor_id(d)?);
            }
        }
        Ok(CredMgmtParams {
            sub,
            rp_id_hash,
            credential_id,
            pin_auth: bytes_field(m, 4)?,
            protocol: uint_field(m, 3)?,
        })
    }
}

pub const FLAG_UP: u8 = 0x01;
pub const FLAG_UV: u8 = 0x04;
pub const FLAG_AT: u8 = 0x40;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestedCredential {
    pub aaguid: [u8; 16],
    pub cred_id: Vec<u8>,
    pub public_key: CborMap,
}

/// Authenticator data: rpIdHash ‖ flags ‖ signCount ‖ [attested credential].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthData {
    pub rp_id_hash: [u8; 32],
    pub flags: u8,
    pub sign_count: u32,
    pub attested: Option<AttestedCredential>,
}

impl AuthData {
    pub fn new(rp_id: &str, flags: u8, sign_count: u32) -> Self {
        AuthData { rp_id_hash: sha256(rp_id.as_bytes()), flags, sign_count, attested: None }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.rp_id_hash.to_vec();
        out.push(self.flags);
        out.extend(self.sign_count.to_be_bytes());
        if let Some(a) = &self.attested {
            out.extend(a.aaguid);
            out.extend((a.cred_id.len() as u16).to_be_bytes());
            out.extend(&a.cred_id);
            out.extend(encode_canonical(&a.public_key.clone().into()));
        }
        out
    }

    pub fn parse(b: &[u8]) -> Option<Self> {
        if b.len() < 37 {
            return None;
        }
        let rp_id_hash = b[..32].try_into().ok()?;
        let flags = b[32];
        let sign_count = u32::from_be_bytes(b[33..37].try_into().ok()?);
        let attested = if flags & FLAG_AT != 0 {
            let rest = &b[37..];
            let aaguid = rest.get(..16)?.try_into().ok()?;
            let len = u16::from_be_bytes(rest.get(16..18)?.try_into().ok()?) as usize;
            let cred_id = rest.get(18..18 + len)?.to_vec();
            let key = crate::cbor::decode_canonical(rest.get(18 + len..)?).ok()?;
            Some(AttestedCredential { aaguid, cred_id, public_key: key.as_map()?.clone() })
        } else if b.len() == 37 {
            None
        } else {
            return None;
        };
        Some(AuthData { rp_id_hash, flags, sign_count, attested })
    }
}

/// MakeCredential response (packed self-attestation).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestationObject {
    pub auth_data: Vec<u8>,
    pub signature: Vec<u8>,
}

impl AttestationObject {
    pub fn to_map(&self) -> CborMap {
        CborMap::new()
            .with(1, "packed")
            .with(2, self.auth_data.clone())
            .with(3, CborMap::new().with("alg", -7).with("sig", self.signature.clone()))
    }

    pub fn from_map(m: &CborMap) -> Option<Self> {
        let auth_data = m.get_int(2)?.as_bytes()?.to_vec();
        let signature = m.get_int(3)?.as_map()?.get_text("sig")?.as_bytes()?.to_vec();
        Some(AttestationObject { auth_data, signature })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssertionResponse {
    pub cred_id: Vec<u8>,
    pub auth_data: Vec<u8>,
    pub signature: Vec<u8>,
    pub user_id: Option<Vec<u8>>,
    pub user_name: Option<String>,
    pub number_of_credentials: Option<u64>,
    pub cred_blob: Option<Vec<u8>>,
}

impl AssertionResponse {
    pub fn to_map(&self) -> CborMap {
        let mut m = CborMap::new()
            .with(1, descriptor(&self.cred_id))
            .with(2, self.auth_data.clone())
            .with(3, self.signature.clone());
        if let Some(id) = &self.user_id {
            let mut user = CborMap::new().with("id", id.clone());
            if let Some(n) = &self.user_name {
                user.insert("name", n.as_str());
            }
            m.insert(4, user);
        }
        if let Some(n) = self.number_of_credentials {
            m.insert(5, n);
        }
        if let Some(b) = &self.cred_blob {
            m.insert(ASSERTION_CRED_BLOB_KEY, b.clone());
        }
        m
    }

    pub fn from_map(m: &CborMap) -> Option<Self> {
        let user = m.get_int(4).and_then(CborValue::as_map);
        Some(AssertionResponse {
            cred_id: descriptor_id(m.get_int(1)?).ok()?,
            auth_data: m.get_int(2)?.as_bytes()?.to_vec(),
            signature: m.get_int(3)?.as_bytes()?.to_vec(),
            user_id: user.and_then(|u| u.get_text("id")).and_then(CborValue::as_bytes).map(<[u8]>::to_vec),
            user_name: user
                .and_then(|u| u.get_text("name"))
                .and_then(CborValue::as_text)
                .map(str::to_owned),
            number_of_credentials: m.get_int(5).and_then(CborValue::as_u64),
            cred_blob: m.get_int(ASSERTION_CRED_BLOB_KEY).and_then(CborValue::as_bytes).map(<[u8]>::to_vec),
        })
    }
}

/// One record from a credential enumeration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnumeratedCredential {
    pub user_id: Vec<u8>,
    pub user_name: String,
    pub cred_id: Vec<u8>,
    pub public_key: CborMap,
    pub total: Option<u64>,
    pub protect_policy: ProtectPolicy,
}

impl EnumeratedCredential {
    pub fn to_map(&self) -> CborMap {
        let mut m = CborMap::new()
            .with(6, CborMap::new().with("id", self.user_id.clone()).with("name", self.user_name.as_str()))
            .with(7, descriptor(&self.cred_id))
            .with(8, self.public_key.clone())
            .with(0x0a, self.protect_policy.to_u64());
        if let Some(t) = self.total {
            m.insert(9, t);
        }
        m
    }

    pub fn from_map(m: &CborMap) -> Option<Self> {
        let user = m.get_int(6)?.as_map()?;
        Some(EnumeratedCredential {
            user_id: user.get_text("id")?.as_bytes()?.to_vec(),
            user_name: user.get_text("name").and_then(CborValue::as_text).unwrap_or_default().to_owned(),
            cred_id: descriptor_id(m.get_int(7)?).ok()?,
            public_key: m.get_int(8)?.as_map()?.clone(),
            total: m.get_int(9).and_then(CborValue::as_u64),
            protect_policy: m.get_int(0x0a)?.as_u64().and_then(ProtectPolicy::from_u64)?,
        })
    }
}

/// One record from a relying-party enumeration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnumeratedRp {
    pub rp_id: String,
    pub rp_id_hash: [u8; 32],
    pub total: Option<u64>,
}

impl EnumeratedRp {
    pub fn to_map(&self) -> CborMap {
        let mut m = CborMap::new()
            .with(3, CborMap::new().with("id", self.rp_id.as_str()))
            .with(4, self.rp_id_hash.to_vec());
        if let Some(t) = self.total {
            m.insert(5, t);
        }
        m
    }

    pub fn from_map(m: &CborMap) -> Option<Self> {
        Some(EnumeratedRp {
            rp_id: m.get_int(3)?.as_map()?.get_text("id")?.as_text()?.to_owned(),
            rp_id_hash: m.get_int(4)?.as_bytes()?.try_into().ok()?,
            total: m.get_int(5).and_then(CborValue::as_u64),
        })
    }
}
