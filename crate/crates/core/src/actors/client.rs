//! The honest CTAP client and the flows a user starts through it.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use super::rp::{AssertionRecord, CredentialRecord, RelyingParty, VerifyError};
use super::user::{Expectation, UserModel};
use crate::authenticator::PhysicalUser;
use crate::cbor::CborMap;
use crate::codec::{ClientPinSub, CredMgmtSub, CtapRequest, CtapResponse, StatusCode};
use crate::crypto::{
    aes256_cbc_decrypt, aes256_cbc_encrypt, cose_to_public_key, pad_pin, pin_auth, pin_hash, verify, AgreementKey,
};
use crate::messages::{
    AssertionResponse, AttestationObject, AuthData, ClientPinParams, CredMgmtParams, GetAssertionParams,
    MakeCredentialParams, PinSlot,
};
use crate::transports::{MitmHook, Pipeline, SessionError, VirtualDevice};

pub const HONEST_CLIENT_ID: &str = "platform-client";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FlowError {
    #[error("transport: {0}")]
    Session(#[from] SessionError),
    #[error("authenticator returned {0:?}")]
    Status(StatusCode),
    #[error("user did not enter a PIN")]
    PinDeclined,
    #[error("malformed response: {0}")]
    Malformed(&'static str),
    #[error("relying party rejected the response: {0:?}")]
    Verify(VerifyError),
}

impl FlowError {
    pub fn status(&self) -> Option<StatusCode> {
        match self {
            FlowError::Status(s) => Some(*s),
            _ => None,
        }
    }
}

/// Client half of PIN protocol one for one key agreement.
#[derive(Debug, Clone)]
pub struct PinChannel {
    pub shared_secret: [u8; 32],
    pub platform_key: CborMap,
}

impl PinChannel {
    pub fn encrypt_pin(&self, pin: &str) -> Option<Vec<u8>> {
        aes256_cbc_encrypt(&self.shared_secret, &pad_pin(pin)?)
    }

    pub fn encrypt_pin_hash(&self, pin: &str) -> Vec<u8> {
        aes256_cbc_encrypt(&self.shared_secret, &pin_hash(pin)).expect("16-byte block")
    }
}

#[derive(Debug, Clone)]
pub struct ClientSession {
    pipeline: Pipeline,
    token: Option<[u8; 32]>,
    rng: ChaCha20Rng,
}

impl ClientSession {
    pub fn new(pipeline: Pipeline, seed: u64) -> Self {
        ClientSession { pipeline, token: None, rng: ChaCha20Rng::seed_from_u64(seed) }
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    pub fn pipeline_mut(&mut self) -> &mut Pipeline {
        &mut self.pipeline
    }

    pub fn token(&self) -> Option<&[u8; 32]> {
        self.token.as_ref()
    }

    pub fn forget_token(&mut self) {
        self.token = None;
    }

    /// One request, no status interpretation.
    pub fn call(
        &mut self,
        dev: &mut VirtualDevice,
        user: &mut dyn PhysicalUser,
        hook: Option<&mut (dyn MitmHook + '_)>,
        req: &CtapRequest,
    ) -> Result<CtapResponse, FlowError> {
        Ok(self.pipeline.transact(dev, user, hook, req)?)
    }

    /// One request whose status must be OK; returns the payload map.
    pub fn call_ok(
        &mut self,
        dev: &mut VirtualDevice,
        user: &mut dyn PhysicalUser,
        hook: Option<&mut (dyn MitmHook + '_)>,
        req: &CtapRequest,
    ) -> Result<CborMap, FlowError> {
        let resp = self.call(dev, user, hook, req)?;
        if !resp.is_ok() {
            return Err(FlowError::Status(resp.status()));
        }
        Ok(resp.payload().cloned().unwrap_or_default())
    }

    pub fn key_agreement(
        &mut self,
        dev: &mut VirtualDevice,
        user: &mut dyn PhysicalUser,
        hook: Option<&mut (dyn MitmHook + '_)>,
    ) -> Result<PinChannel, FlowError> {
        let p = ClientPinParams::new(ClientPinSub::GetKeyAgreement);
        let payload =
            self.call_ok(dev, user, hook, &CtapRequest::client_pin(ClientPinSub::GetKeyAgreement, p.to_map()))?;
        let peer = payload
            .get_int(1)
            .and_then(|v| v.as_map())
            .and_then(cose_to_public_key)
            .ok_or(FlowError::Malformed("key agreement"))?;
        let mine = AgreementKey::generate(&mut self.rng);
        Ok(PinChannel { shared_secret: mine.shared_secret(&peer), platform_key: mine.public_cose() })
    }

    pub fn set_pin_slot(
        &mut self,
        dev: &mut VirtualDevice,
        user: &mut dyn PhysicalUser,
        mut hook: Option<&mut (dyn MitmHook + '_)>,
        pin: &str,
        slot: PinSlot,
    ) -> Result<(), FlowError> {
        let ch = self.key_agreement(dev, user, hook.as_deref_mut())?;
        let enc = ch.encrypt_pin(pin).ok_or(FlowError::Status(StatusCode::PinPolicyViolation))?;
        let mut p = ClientPinParams::new(ClientPinSub::SetPin);
        p.pin_auth = Some(pin_auth(&ch.shared_secret, &enc).to_vec());
        p.key_agreement = Some(ch.platform_key);
        p.new_pin_enc = Some(enc);
        p.slot = slot;
        self.call_ok(dev, user, hook, &CtapRequest::client_pin(ClientPinSub::SetPin, p.to_map()))?;
        Ok(())
    }

    /// GetPinToken with a PIN supplied by the caller rather than the user model.
    pub fn pin_token_with(
        &mut self,
        dev: &mut VirtualDevice,
        user: &mut dyn PhysicalUser,
        mut hook: Option<&mut (dyn MitmHook + '_)>,
        pin: &str,
        slot: PinSlot,
    ) -> Result<[u8; 32], FlowError> {
        let ch = self.key_agreement(dev, user, hook.as_deref_mut())?;
        self.pin_token_on(dev, user, hook, &ch, pin, slot)
    }

    /// GetPinToken over an already agreed channel. Valid until the device
    /// regenerates its key agreement key on the next power cycle.
    pub fn pin_token_on(
        &mut self,
        dev: &mut VirtualDevice,
        user: &mut dyn PhysicalUser,
        hook: Option<&mut (dyn MitmHook + '_)>,
        ch: &PinChannel,
        pin: &str,
        slot: PinSlot,
    ) -> Result<[u8; 32], FlowError> {
        let mut p = ClientPinParams::new(ClientPinSub::GetPinToken);
        p.pin_hash_enc = Some(ch.encrypt_pin_hash(pin));
        p.key_agreement = Some(ch.platform_key.clone());
        p.slot = slot;
        let payload = self.call_ok(dev, user, hook, &CtapRequest::client_pin(ClientPinSub::GetPinToken, p.to_map()))?;
        let enc = payload.get_int(2).and_then(|v| v.as_bytes()).ok_or(FlowError::Malformed("pin token"))?;
        let token = aes256_cbc_decrypt(&ch.shared_secret, enc)
            .and_then(|t| <[u8; 32]>::try_from(t.as_slice()).ok())
            .ok_or(FlowError::Malformed("pin token"))?;
        self.token = Some(token);
        Ok(token)
    }

    /// Asks the user for the PIN and exchanges it for a token.
    pub fn pin_ceremony(
        &mut self,
        dev: &mut VirtualDevice,
        user: &mut UserModel,
        hook: Option<&mut (dyn MitmHook + '_)>,
    ) -> Result<[u8; 32], FlowError> {
        let pin = user.enter_pin(dev.now()).ok_or(FlowError::PinDeclined)?;
        self.pin_token_with(dev, user, hook, &pin, PinSlot::Normal)
    }

    /// First-time PIN setup with the user's own PIN.
    pub fn setup_pin(
        &mut self,
        dev: &mut VirtualDevice,
        user: &mut UserModel,
        hook: Option<&mut (dyn MitmHook + '_)>,
    ) -> Result<(), FlowError> {
        user.begin_flow("setup-pin", Expectation::new(true, 0));
        let pin = user.enter_pin(dev.now());
        let r = match pin {
            Some(pin) => self.set_pin_slot(dev, user, hook, &pin, PinSlot::Normal),
            None => Err(FlowError::PinDeclined),
        };
        user.end_flow();
        r
    }

    pub fn get_info_flow(
        &mut self,
        dev: &mut VirtualDevice,
        user: &mut UserModel,
        hook: Option<&mut (dyn MitmHook + '_)>,
    ) -> Result<CborMap, FlowError> {
        user.begin_flow("get-info", Expectation::new(false, 0));
        let r = self.call_ok(dev, user, hook, &CtapRequest::get_info());
        user.end_flow();
        r
    }

    /// Picking this authenticator out of several by touching it.
    pub fn selection_flow(
        &mut self,
        dev: &mut VirtualDevice,
        user: &mut UserModel,
        hook: Option<&mut (dyn MitmHook + '_)>,
    ) -> Result<(), FlowError> {
        user.begin_flow("select", Expectation::new(false, 1));
        let r = self.call_ok(dev, user, hook, &CtapRequest::selection()).map(|_| ());
        user.end_flow();
        r
    }

    /// Checking the PIN from the platform's security-key settings.
    pub fn pin_check_flow(
        &mut self,
        dev: &mut VirtualDevice,
        user: &mut UserModel,
        hook: Option<&mut (dyn MitmHook + '_)>,
    ) -> Result<(), FlowError> {
        user.begin_flow("pin-check", Expectation::new(true, 0));
        let r = self.pin_ceremony(dev, user, hook).map(|_| ());
        user.end_flow();
        r
    }

    /// Opening the passkey manager: PIN, then the storage summary.
    pub fn manage_credentials_flow(
        &mut self,
        dev: &mut VirtualDevice,
        user: &mut UserModel,
        mut hook: Option<&mut (dyn MitmHook + '_)>,
    ) -> Result<CborMap, FlowError> {
        user.begin_flow("manage-credentials", Expectation::new(true, 0));
        let r = self.pin_ceremony(dev, user, hook.as_deref_mut()).and_then(|token| {
            let mut p = CredMgmtParams::new(CredMgmtSub::GetCredsMetadata);
            p.protocol = Some(1);
            p.pin_auth = Some(pin_auth(&token, &p.auth_message()).to_vec());
            self.call_ok(dev, user, hook, &CtapRequest::cred_mgmt(CredMgmtSub::GetCredsMetadata, p.to_map()))
        });
        user.end_flow();
        r
    }

    /// Factory reset from the platform settings, right after plugging in.
    pub fn reset_flow(
        &mut self,
        dev: &mut VirtualDevice,
        user: &mut UserModel,
        hook: Option<&mut (dyn MitmHook + '_)>,
    ) -> Result<(), FlowError> {
        user.begin_flow("reset", Expectation::new(false, 1).destructive());
        let r = self.call_ok(dev, user, hook, &CtapRequest::reset()).map(|_| ());
        user.end_flow();
        r
    }

    pub fn register(
        &mut self,
        dev: &mut VirtualDevice,
        user: &mut UserModel,
        hook: Option<&mut (dyn MitmHook + '_)>,
        rp: &mut RelyingParty,
        user_name: &str,
    ) -> Result<CredentialRecord, FlowError> {
        user.begin_flow(format!("register {}", rp.rp_id()), Expectation::new(true, 1));
        let r = self.register_inner(dev, user, hook, rp, user_name);
        user.end_flow();
        r
    }

    fn register_inner(
        &mut self,
        dev: &mut VirtualDevice,
        user: &mut UserModel,
        mut hook: Option<&mut (dyn MitmHook + '_)>,
        rp: &mut RelyingParty,
        user_name: &str,
    ) -> Result<CredentialRecord, FlowError> {
        let token = self.pin_ceremony(dev, user, hook.as_deref_mut())?;
        let cdh = rp.challenge();
        let user_id = rp.user_id_for(user_name);
        let params = MakeCredentialParams {
            client_data_hash: cdh,
            rp_id: rp.rp_id().to_string(),
            user_id: user_id.clone(),
            user_name: user_name.to_string(),
            rk: rp.template.kind.discoverable(),
            cred_protect: rp.template.requested_policy(),
            cred_blob: None,
            pin_auth: Some(pin_auth(&token, &cdh).to_vec()),
            pin_protocol: Some(1),
        };
        let payload = self.call_ok(dev, user, hook, &CtapRequest::make_credential(params.to_map()))?;
        let att = AttestationObject::from_map(&payload).ok_or(FlowError::Malformed("attestation"))?;
        let auth = AuthData::parse(&att.auth_data).ok_or(FlowError::Malformed("authenticator data"))?;
        let attested = auth.attested.ok_or(FlowError::Malformed("attested credential"))?;
        let mut signed = att.auth_data.clone();
        signed.extend_from_slice(&cdh);
        if !verify(&attested.public_key, &signed, &att.signature) {
            return Err(FlowError::Verify(VerifyError::BadSignature));
        }
        let record = CredentialRecord {
            rp_id: rp.rp_id().to_string(),
            user_name: user_name.to_string(),
            user_id,
            cred_id: attested.cred_id,
            public_key: attested.public_key,
            sign_count: auth.sign_count,
        };
        rp.store(record.clone());
        Ok(record)
    }

    /// Signs in to `rp`. Discoverable templates use an empty allow list;
    /// UV is collected only when the template asks for it.
    pub fn authenticate(
        &mut self,
        dev: &mut VirtualDevice,
        user: &mut UserModel,
        hook: Option<&mut (dyn MitmHook + '_)>,
        rp: &mut RelyingParty,
        user_name: &str,
    ) -> Result<AssertionRecord, FlowError> {
        let uv = rp.template.requires_uv();
        user.begin_flow(format!("authenticate {}", rp.rp_id()), Expectation::new(uv, 1));
        let r = self.authenticate_inner(dev, user, hook, rp, user_name, uv);
        user.end_flow();
        r
    }

    fn authenticate_inner(
        &mut self,
        dev: &mut VirtualDevice,
        user: &mut UserModel,
        mut hook: Option<&mut (dyn MitmHook + '_)>,
        rp: &mut RelyingParty,
        user_name: &str,
        uv: bool,
    ) -> Result<AssertionRecord, FlowError> {
        let token = if uv { Some(self.pin_ceremony(dev, user, hook.as_deref_mut())?) } else { None };
        let cdh = rp.challenge();
        let mut params = GetAssertionParams::new(rp.rp_id(), cdh);
        if !rp.template.kind.discoverable() {
            params.allow_list = rp.records().iter().map(|r| r.cred_id.clone()).collect();
        }
        if let Some(t) = token {
            params.pin_auth = Some(pin_auth(&t, &cdh).to_vec());
            params.pin_protocol = Some(1);
        }
        let payload = self.call_ok(dev, user, hook.as_deref_mut(), &CtapRequest::get_assertion(params.to_map()))?;
        let first = AssertionResponse::from_map(&payload).ok_or(FlowError::Malformed("assertion"))?;
        let mut candidates = vec![first.clone()];
        for _ in 1..first.number_of_credentials.unwrap_or(1) {
            let p = self.call_ok(dev, user, hook.as_deref_mut(), &CtapRequest::get_next_assertion())?;
            candidates.push(AssertionResponse::from_map(&p).ok_or(FlowError::Malformed("assertion"))?);
        }
        let wanted = rp.record_for(user_name).map(|r| r.user_id.clone());
        let chosen = candidates
            .iter()
            .find(|a| a.user_id.is_some() && a.user_id == wanted)
            .unwrap_or(&candidates[0])
            .clone();
        rp.verify_assertion(&cdh, &chosen).map_err(FlowError::Verify)
    }
}
