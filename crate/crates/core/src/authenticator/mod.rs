//! The virtual CTAP2 authenticator.
//!
//! [`Authenticator`] owns its state, its RNG and a logical millisecond clock.
//! Requests are served synchronously: the physical user is reached through
//! the [`PhysicalUser`] callback carried in the [`RequestContext`].
//! [`Authenticator::process`] reports how long the request kept the device
//! busy without moving the clock, so a transport can interleave other
//! traffic; [`Authenticator::handle_request`] advances the clock itself.

mod config;
mod cred_mgmt;
mod pin;
mod snapshot;
mod state;

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub use config::{AuthenticatorConfig, Countermeasure, Transport, DEFAULT_ROTATION_PERIOD};
pub use snapshot::SnapshotError;
pub use state::{
    ApiClass, AssertionQueue, AuthenticatorState, CredCursor, Credential, FeedbackEvent,
    PinState, PinUvToken, RpCursor, TokenScope, INITIAL_PIN_RETRIES, SOFT_LOCK_THRESHOLD,
};

use crate::cbor::{CborMap, CborValue};
use crate::codec::{
    CodecError, Command, CredMgmtSub, CtapRequest, CtapResponse, StatusCode, Subcommand,
};
use crate::crypto::{derive_credential_key, hmac_sha256, sign, verify_pin_auth, AgreementKey};
use crate::messages::{
    AssertionResponse, AttestationObject, AttestedCredential, AuthData, ClientPinParams,
    CredMgmtParams, GetAssertionParams, MakeCredentialParams, ProtectPolicy, FLAG_AT, FLAG_UP,
    FLAG_UV, INFO_MAX_DISCOVERABLE_KEY, PIN_PROTOCOL_ONE,
};

pub const USB_RESET_WINDOW_MS: u64 = 10_000;
pub const UP_TIMEOUT_MS: u64 = 30_000;
pub const SELECTION_WINDOW_MS: u64 = 120_000;
pub const SELECTION_MAX_CALLS: usize = 3;
pub const RESET_PROCESSING_MS: u64 = 200;
pub const FEEDBACK_DURATION_MS: u64 = 600;

const NONCE_LEN: usize = 16;
const CRED_TAG_LEN: usize = 16;
pub const CRED_ID_LEN: usize = NONCE_LEN + CRED_TAG_LEN;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PresenceRequest {
    pub command: Command,
    pub subcommand: Option<Subcommand>,
    pub at_ms: u64,
    pub transport: Transport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PresenceDecision {
    /// The button was pressed `after_ms` after the request.
    Granted { after_ms: u64 },
    Declined,
}

/// Whoever is physically holding the authenticator.
pub trait PhysicalUser {
    fn request_presence(&mut self, request: &PresenceRequest) -> PresenceDecision;

    fn notice_feedback(&mut self, _event: &FeedbackEvent) {}
}

/// Nobody is there to touch the device.
#[derive(Debug, Default, Clone, Copy)]
pub struct NobodyPresent;

impl PhysicalUser for NobodyPresent {
    fn request_presence(&mut self, _: &PresenceRequest) -> PresenceDecision {
        PresenceDecision::Declined
    }
}

/// Presses the button on every request after a fixed delay.
#[derive(Debug, Default, Clone)]
pub struct AlwaysPresent {
    pub delay_ms: u64,
    pub requests: Vec<PresenceRequest>,
}

impl PhysicalUser for AlwaysPresent {
    fn request_presence(&mut self, request: &PresenceRequest) -> PresenceDecision {
        self.requests.push(request.clone());
        PresenceDecision::Granted { after_ms: self.delay_ms }
    }
}

pub struct RequestContext<'a> {
    pub transport: Transport,
    pub client_id: &'a str,
    pub user: &'a mut dyn PhysicalUser,
}

impl<'a> RequestContext<'a> {
    pub fn new(transport: Transport, client_id: &'a str, user: &'a mut dyn PhysicalUser) -> Self {
        RequestContext { transport, client_id, user }
    }
}

/// A served request plus how long the device was busy with it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Processed {
    pub response: CtapResponse,
    /// Time spent blocked on user presence.
    pub up_wait_ms: u64,
    /// Time spent on other long-running work.
    pub processing_ms: u64,
}

impl Processed {
    pub fn busy_ms(&self) -> u64 {
        self.up_wait_ms + self.processing_ms
    }
}

/// Whether a request destroys user data.
pub fn api_class(command: Command, sub: Option<Subcommand>) -> ApiClass {
    match (command, sub) {
        (Command::Reset, _) => ApiClass::Destructive,
        (_, Some(Subcommand::CredMgmt(CredMgmtSub::DeleteCredential))) => ApiClass::Destructive,
        _ => ApiClass::NonDestructive,
    }
}

/// Maps a request decoding failure to the status an authenticator reports.
pub fn status_for_codec_error(e: &CodecError) -> StatusCode {
    match e {
        CodecError::Empty => StatusCode::InvalidLength,
        CodecError::UnknownCommand(_) => StatusCode::InvalidCommand,
        CodecError::MissingParams(_) => StatusCode::MissingParameter,
        CodecError::BadSubcommand => StatusCode::InvalidSubcommand,
        CodecError::UnexpectedParams(_) => StatusCode::InvalidParameter,
        _ => StatusCode::InvalidCbor,
    }
}

type Outcome = Result<Option<CborMap>, StatusCode>;

pub struct Authenticator {
    config: AuthenticatorConfig,
    state: AuthenticatorState,
    rng: ChaCha20Rng,
    now_ms: u64,
    feedback_log: Vec<FeedbackEvent>,
    last_block: Option<Countermeasure>,
    presence_requests: u64,
    up_wait_ms: u64,
    processing_ms: u64,
    /// Scope of a token issued by the request immediately preceding this one.
    fresh_pin_entry: Option<TokenScope>,
}

impl std::fmt::Debug for Authenticator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Authenticator")
            .field("profile", &self.config.profile)
            .field("now_ms", &self.now_ms)
            .field("credentials", &self.state.credentials.len())
            .finish_non_exhaustive()
    }
}

impl Clone for Authenticator {
    fn clone(&self) -> Self {
        Authenticator {
            config: self.config.clone(),
            state: self.state.clone(),
            rng: self.rng.clone(),
            now_ms: self.now_ms,
            feedback_log: self.feedback_log.clone(),
            last_block: self.last_block,
            presence_requests: self.presence_requests,
            up_wait_ms: 0,
            processing_ms: 0,
            fresh_pin_entry: self.fresh_pin_entry,
        }
    }
}

impl Authenticator {
    pub fn new(config: AuthenticatorConfig, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut master_key = [0u8; 32];
        rng.fill_bytes(&mut master_key);
        let key_agreement_key = AgreementKey::generate(&mut rng);
        Authenticator {
            config,
            state: AuthenticatorState {
                master_key,
                credentials: Vec::new(),
                pin: PinState::default(),
                powered_on_at: 0,
                key_agreement_key,
                issued_token: None,
                rp_cursor: None,
                cred_cursor: None,
                assertion_queue: None,
                selection_call_log: Vec::new(),
                assertion_counters: BTreeMap::new(),
                sign_count: 0,
            },
            rng,
            now_ms: 0,
            feedback_log: Vec::new(),
            last_block: None,
            presence_requests: 0,
            up_wait_ms: 0,
            processing_ms: 0,
            fresh_pin_entry: None,
        }
    }

    pub fn config(&self) -> &AuthenticatorConfig {
        &self.config
    }

    pub fn state(&self) -> &AuthenticatorState {
        &self.state
    }

    pub fn now(&self) -> u64 {
        self.now_ms
    }

    pub fn advance(&mut self, ms: u64) {
        self.now_ms += ms;
    }

    /// Unplug and replug, or leave and re-enter the NFC field.
    pub fn power_cycle(&mut self) {
        self.state.powered_on_at = self.now_ms;
        self.state.pin.new_session();
        self.state.key_agreement_key = AgreementKey::generate(&mut self.rng);
        self.state.issued_token = None;
        self.state.clear_cursors();
        self.fresh_pin_entry = None;
    }

    /// Countermeasure that denied the most recent request, if any.
    pub fn last_block(&self) -> Option<Countermeasure> {
        self.last_block
    }

    /// Number of times the device asked the user for a touch.
    pub fn presence_requests(&self) -> u64 {
        self.presence_requests
    }

    pub fn feedback_log(&self) -> &[FeedbackEvent] {
        &self.feedback_log
    }

    /// CTAPHID wink. Suppressed while API feedback owns the LED.
    pub fn wink(&mut self) -> bool {
        !(self.config.has(Countermeasure::C2)
            && self
                .feedback_log
                .last()
                .is_some_and(|e| self.now_ms < e.at_ms + FEEDBACK_DURATION_MS))
    }

    /// Serves one request and advances the clock past the time it kept the device busy.
    pub fn handle_request(&mut self, req: &CtapRequest, ctx: &mut RequestContext) -> CtapResponse {
        let out = self.process(req, ctx);
        self.now_ms += out.busy_ms();
        out.response
    }

    /// Decodes raw CTAP bytes and serves them; undecodable input yields an error status.
    pub fn process_bytes(&mut self, bytes: &[u8], ctx: &mut RequestContext) -> Processed {
        match CtapRequest::decode(bytes) {
            Ok(req) => self.process(&req, ctx),
            Err(e) => {
                self.last_block = None;
                Processed {
                    response: CtapResponse::error(status_for_codec_error(&e)),
                    up_wait_ms: 0,
                    processing_ms: 0,
                }
            }
        }
    }

    pub fn process(&mut self, req: &CtapRequest, ctx: &mut RequestContext) -> Processed {
        self.last_block = None;
        self.up_wait_ms = 0;
        self.processing_ms = 0;
        let fresh_pin_entry = self.fresh_pin_entry.take();
        let response = match self.dispatch(req, ctx, fresh_pin_entry) {
            Ok(Some(payload)) => CtapResponse::ok_with(payload),
            Ok(None) => CtapResponse::ok(),
            Err(status) => CtapResponse::error(status),
        };
        Processed {
            response,
            up_wait_ms: self.up_wait_ms,
            processing_ms: self.processing_ms,
        }
    }

    fn block(&mut self, cm: Countermeasure, status: StatusCode) -> StatusCode {
        self.last_block = Some(cm);
        status
    }

    fn dispatch(
        &mut self,
        req: &CtapRequest,
        ctx: &mut RequestContext,
        fresh_pin_entry: Option<TokenScope>,
    ) -> Outcome {
        if self.config.has(Countermeasure::C1)
            && !self.config.trusted_clients.contains(ctx.client_id)
        {
            return Err(self.block(Countermeasure::C1, StatusCode::ClientNotTrusted));
        }
        let command = req.command();
        let sub = req.subcommand();
        if !matches!(command, Command::GetInfo | Command::Reset) {
            if self.state.pin.hard_locked {
                return Err(StatusCode::PinBlocked);
            }
            if self.state.pin.soft_locked {
                return Err(StatusCode::PinAuthBlocked);
            }
        }
        if self.config.has(Countermeasure::C2) {
            let blinks = match api_class(command, sub) {
                ApiClass::Destructive => 2,
                ApiClass::NonDestructive => 1,
            };
            let event = FeedbackEvent { at_ms: self.now_ms, blinks, command };
            ctx.user.notice_feedback(&event);
            self.feedback_log.push(event);
        }

        if sub != Some(Subcommand::CredMgmt(CredMgmtSub::EnumerateRpsGetNextRp)) {
            self.state.rp_cursor = None;
        }
        if sub != Some(Subcommand::CredMgmt(CredMgmtSub::EnumerateCredentialsGetNextCredential)) {
            self.state.cred_cursor = None;
        }
        if sub != Some(Subcommand::GetNextAssertion) {
            self.state.assertion_queue = None;
        }

        let params = req.params().cloned().unwrap_or_default();
        match (command, sub) {
            (Command::GetInfo, _) => Ok(Some(self.get_info())),
            (Command::Reset, _) => self.reset(ctx, fresh_pin_entry),
            (Command::Selection, _) => self.selection(ctx),
            (Command::MakeCredential, _) => {
                let p = MakeCredentialParams::from_map(&params)?;
                self.make_credential(&p, ctx)
            }
            (Command::GetAssertion, Some(Subcommand::GetNextAssertion)) => self.get_next_assertion(),
            (Command::GetAssertion, _) => {
                let p = GetAssertionParams::from_map(&params)?;
                self.get_assertion(&p, ctx)
            }
            (Command::ClientPin, Some(Subcommand::ClientPin(s))) => {
                let p = ClientPinParams::from_map(s, &params)?;
                self.client_pin(&p)
            }
            (Command::CredentialManagement, Some(Subcommand::CredMgmt(s))) => {
                let p = CredMgmtParams::from_map(s, &params)?;
                self.credential_management(&p, ctx)
            }
            _ => Err(StatusCode::InvalidSubcommand),
        }
    }

    /// Checks a `pinUvAuthParam` against the current token.
    fn verify_token(
        &mut self,
        message: &[u8],
        auth: Option<&[u8]>,
        protocol: Option<u64>,
        class: ApiClass,
    ) -> Result<(), StatusCode> {
        let auth = auth.ok_or(StatusCode::PinRequired)?;
        match protocol {
            None => return Err(StatusCode::MissingParameter),
            Some(PIN_PROTOCOL_ONE) => {}
            Some(_) => return Err(StatusCode::InvalidParameter),
        }
        let token = self.state.valid_token().ok_or(StatusCode::PinAuthInvalid)?;
        if !verify_pin_auth(&token.token, message, auth) {
            return Err(StatusCode::PinAuthInvalid);
        }
        if self.config.has(Countermeasure::C4) {
            let needed = match class {
                ApiClass::Destructive => TokenScope::Destructive,
                ApiClass::NonDestructive => TokenScope::Normal,
            };
            if token.scope != needed {
                return Err(self.block(Countermeasure::C4, StatusCode::PinRequired));
            }
        }
        Ok(())
    }

    /// Obtains UP for the running request. `gate` names the countermeasure
    /// that introduced this check, if any.
    fn require_presence(
        &mut self,
        ctx: &mut RequestContext,
        command: Command,
        subcommand: Option<Subcommand>,
        gate: Option<Countermeasure>,
    ) -> Result<(), StatusCode> {
        let nfc = ctx.transport == Transport::Nfc;
        if nfc && !self.config.has(Countermeasure::C3) {
            return Ok(());
        }
        self.presence_requests += 1;
        let request = PresenceRequest {
            command,
            subcommand,
            at_ms: self.now_ms + self.up_wait_ms + self.processing_ms,
            transport: ctx.transport,
        };
        match ctx.user.request_presence(&request) {
            PresenceDecision::Granted { after_ms } => {
                self.up_wait_ms += after_ms.min(UP_TIMEOUT_MS);
                Ok(())
            }
            PresenceDecision::Declined => {
                self.up_wait_ms += UP_TIMEOUT_MS;
                let status = match command {
                    Command::Selection => StatusCode::UserActionTimeout,
                    _ => StatusCode::UpRequired,
                };
                match gate.or(nfc.then_some(Countermeasure::C3)) {
                    Some(cm) => Err(self.block(cm, status)),
                    None => Err(status),
                }
            }
        }
    }

    fn get_info(&self) -> CborMap {
        let options = CborMap::new()
            .with("rk", true)
            .with("up", true)
            .with("clientPin", self.state.pin.is_set())
            .with("credMgmt", true);
        let transports: Vec<CborValue> = self
            .config
            .transports
            .iter()
            .map(|t| CborValue::from(t.as_str()))
            .collect();
        let remaining = self.config.max_discoverable.saturating_sub(self.state.discoverable_count());
        CborMap::new()
            .with(0x01, vec![CborValue::from("FIDO_2_0"), CborValue::from("FIDO_2_1")])
            .with(0x02, vec![CborValue::from("credProtect"), CborValue::from("credBlob")])
            .with(0x03, self.config.aaguid.to_vec())
            .with(0x04, options)
            .with(0x06, vec![CborValue::from(PIN_PROTOCOL_ONE)])
            .with(0x09, transports)
            .with(0x0e, self.config.firmware_version)
            .with(0x14, remaining)
            .with(INFO_MAX_DISCOVERABLE_KEY, self.config.max_discoverable)
    }

    fn reset(&mut self, ctx: &mut RequestContext, fresh_pin_entry: Option<TokenScope>) -> Outcome {
        if ctx.transport == Transport::Usb
            && self.now_ms - self.state.powered_on_at > USB_RESET_WINDOW_MS
        {
            return Err(StatusCode::NotAllowed);
        }
        // Reset carries no parameters, so UV means the PIN was entered by the
        // request right before this one.
        if self.config.has(Countermeasure::C6) && fresh_pin_entry.is_none() {
            return Err(self.block(Countermeasure::C6, StatusCode::PinRequired));
        }
        if self.config.has(Countermeasure::C4) && fresh_pin_entry != Some(TokenScope::Destructive) {
            return Err(self.block(Countermeasure::C4, StatusCode::PinRequired));
        }
        self.require_presence(ctx, Command::Reset, None, None)?;
        self.processing_ms += RESET_PROCESSING_MS;
        self.wipe();
        Ok(None)
    }

    fn wipe(&mut self) {
        let s = &mut self.state;
        self.rng.fill_bytes(&mut s.master_key);
        s.credentials.clear();
        s.pin = PinState::default();
        s.key_agreement_key = AgreementKey::generate(&mut self.rng);
        s.issued_token = None;
        s.clear_cursors();
        s.assertion_counters.clear();
    }

    fn selection(&mut self, ctx: &mut RequestContext) -> Outcome {
        if !self.config.supports_selection {
            return Err(StatusCode::NotSupported);
        }
        if self.config.has(Countermeasure::C8) {
            let now = self.now_ms;
            let recent = self
                .state
                .selection_call_log
                .iter()
                .filter(|&&t| now - t < SELECTION_WINDOW_MS)
                .count();
            if recent >= SELECTION_MAX_CALLS {
                return Err(self.block(Countermeasure::C8, StatusCode::RateLimited));
            }
        }
        self.state.selection_call_log.push(self.now_ms);
        self.require_presence(ctx, Command::Selection, None, None)?;
        Ok(None)
    }

    fn random_bytes<const N: usize>(&mut self) -> [u8; N] {
        let mut out = [0u8; N];
        self.rng.fill_bytes(&mut out);
        out
    }

    /// `nonce ‖ LEFT(HMAC(master, rp_id ‖ nonce), 16)`: self-authenticating, so
    /// ids minted under an old master key stop being recognized after Reset.
    fn mint_cred_id(&mut self, rp_id: &str) -> Vec<u8> {
        let nonce: [u8; NONCE_LEN] = self.random_bytes();
        let mut id = nonce.to_vec();
        id.extend_from_slice(&self.cred_tag(rp_id, &nonce));
        id
    }

    fn cred_tag(&self, rp_id: &str, nonce: &[u8]) -> [u8; CRED_TAG_LEN] {
        let mut msg = rp_id.as_bytes().to_vec();
        msg.extend_from_slice(nonce);
        hmac_sha256(&self.state.master_key, &msg)[..CRED_TAG_LEN].try_into().unwrap()
    }

    /// Rebuilds a non-discoverable credential from its id, if this device minted it for `rp_id`.
    fn recover_credential(&self, rp_id: &str, cred_id: &[u8]) -> Option<Credential> {
        if cred_id.len() != CRED_ID_LEN {
            return None;
        }
        let (nonce, tag) = cred_id.split_at(NONCE_LEN);
        if self.cred_tag(rp_id, nonce) != tag {
            return None;
        }
        let key = derive_credential_key(&self.state.master_key, cred_id);
        Some(Credential {
            cred_id: cred_id.to_vec(),
            rp_id: rp_id.to_owned(),
            user_id: Vec::new(),
            user_name: String::new(),
            private_key: key.to_bytes().into(),
            protect_policy: ProtectPolicy::UvOptional,
            cred_blob: None,
            discoverable: false,
            created_at: 0,
        })
    }

    fn make_credential(&mut self, p: &MakeCredentialParams, ctx: &mut RequestContext) -> Outcome {
        let uv = if self.state.pin.is_set() {
            self.verify_token(
                &p.client_data_hash,
                p.pin_auth.as_deref(),
                p.pin_protocol,
                ApiClass::NonDestructive,
            )?;
            true
        } else if p.pin_auth.is_some() {
            return Err(StatusCode::PinNotSet);
        } else {
            false
        };
        let replaces = p.rk.then(|| {
            self.state
                .credentials
                .iter()
                .position(|c| c.discoverable && c.rp_id == p.rp_id && c.user_id == p.user_id)
        });
        let replaces = replaces.flatten();
        if p.rk && replaces.is_none() && self.state.discoverable_count() >= self.config.max_discoverable {
            return Err(StatusCode::KeyStoreFull);
        }
        self.require_presence(ctx, Command::MakeCredential, None, None)?;

        let cred_id = self.mint_cred_id(&p.rp_id);
        let key = derive_credential_key(&self.state.master_key, &cred_id);
        let protect_policy = if p.rk && self.config.has(Countermeasure::C5) {
            ProtectPolicy::UvRequired
        } else {
            p.cred_protect.unwrap_or(ProtectPolicy::UvOptional)
        };
        let cred = Credential {
            cred_id: cred_id.clone(),
            rp_id: p.rp_id.clone(),
            user_id: p.user_id.clone(),
            user_name: p.user_name.clone(),
            private_key: key.to_bytes().into(),
            protect_policy,
            cred_blob: p.cred_blob.clone(),
            discoverable: p.rk,
            created_at: self.now_ms,
        };
        self.state.sign_count += 1;
        let mut flags = FLAG_UP | FLAG_AT;
        if uv {
            flags |= FLAG_UV;
        }
        let mut auth_data = AuthData::new(&p.rp_id, flags, self.state.sign_count);
        auth_data.attested = Some(AttestedCredential {
            aaguid: self.config.aaguid,
            cred_id,
            public_key: cred.public_key(),
        });
        let auth_data = auth_data.encode();
        let mut signed = auth_data.clone();
        signed.extend_from_slice(&p.client_data_hash);
        let signature = sign(&key, &signed);
        if p.rk {
            if let Some(i) = replaces {
                let old = self.state.credentials.remove(i);
                self.state.assertion_counters.remove(&old.cred_id);
            }
            self.state.credentials.push(cred);
        }
        Ok(Some(AttestationObject { auth_data, signature }.to_map()))
    }

    fn get_assertion(&mut self, p: &GetAssertionParams, ctx: &mut RequestContext) -> Outcome {
        let uv = match &p.pin_auth {
            Some(auth) => {
                self.verify_token(
                    &p.client_data_hash,
                    Some(auth),
                    p.pin_protocol,
                    ApiClass::NonDestructive,
                )?;
                true
            }
            None => false,
        };
        // With button-press UP over NFC the up=false shortcut is not honored
        // either, so an NFC reader cannot read credentials silently.
        let up = p.up || (ctx.transport == Transport::Nfc && self.config.has(Countermeasure::C3));

        let mut candidates: Vec<(Credential, bool)> = Vec::new();
        if p.allow_list.is_empty() {
            let mut stored: Vec<&Credential> = self
                .state
                .credentials
                .iter()
                .filter(|c| c.discoverable && c.rp_id == p.rp_id)
                .collect();
            stored.sort_by_key(|c| std::cmp::Reverse(c.created_at));
            candidates.extend(stored.into_iter().map(|c| (c.clone(), false)));
        } else {
            for id in &p.allow_list {
                let found = self
                    .state
                    .credentials
                    .iter()
                    .find(|c| c.rp_id == p.rp_id && &c.cred_id == id)
                    .cloned()
                    .or_else(|| self.recover_credential(&p.rp_id, id));
                if let Some(c) = found {
                    candidates.push((c, true));
                }
            }
        }
        candidates.retain(|(c, listed)| match c.protect_policy {
            ProtectPolicy::UvOptional => true,
            ProtectPolicy::UvOptionalWithCredIdList => uv || *listed,
            ProtectPolicy::UvRequired => uv,
        });
        if candidates.is_empty() {
            return Err(StatusCode::NoCredentials);
        }
        if up {
            self.require_presence(ctx, Command::GetAssertion, None, None)?;
        }
        let mut flags = 0;
        if up {
            flags |= FLAG_UP;
        }
        if uv {
            flags |= FLAG_UV;
        }
        let from_allow_list = !p.allow_list.is_empty();
        if from_allow_list {
            candidates.truncate(1);
        }
        let total = candidates.len();
        let mut iter = candidates.into_iter().map(|(c, _)| c);
        let first = iter.next().expect("non-empty");
        let rest: Vec<Vec<u8>> = iter.map(|c| c.cred_id).collect();
        if !rest.is_empty() {
            self.state.assertion_queue = Some(AssertionQueue {
                client_data_hash: p.client_data_hash,
                flags,
                want_cred_blob: p.want_cred_blob,
                cred_ids: rest,
            });
        }
        let number = (total > 1).then_some(total as u64);
        let resp = self.assert_with(first, &p.client_data_hash, flags, p.want_cred_blob, number);
        Ok(Some(resp.to_map()))
    }

    fn get_next_assertion(&mut self) -> Outcome {
        let mut queue = self.state.assertion_queue.take().ok_or(StatusCode::NotAllowed)?;
        if queue.cred_ids.is_empty() {
            return Err(StatusCode::NotAllowed);
        }
        let id = queue.cred_ids.remove(0);
        let cred = self
            .state
            .credentials
            .iter()
            .find(|c| c.cred_id == id)
            .cloned()
            .ok_or(StatusCode::NotAllowed)?;
        let (cdh, flags, blob) = (queue.client_data_hash, queue.flags, queue.want_cred_blob);
        if !queue.cred_ids.is_empty() {
            self.state.assertion_queue = Some(queue);
        }
        Ok(Some(self.assert_with(cred, &cdh, flags, blob, None).to_map()))
    }

    fn assert_with(
        &mut self,
        mut cred: Credential,
        client_data_hash: &[u8; 32],
        flags: u8,
        want_cred_blob: bool,
        number_of_credentials: Option<u64>,
    ) -> AssertionResponse {
        if cred.discoverable && self.config.has(Countermeasure::C5) {
            let counter = self.state.assertion_counters.entry(cred.cred_id.clone()).or_insert(0);
            *counter += 1;
            if *counter >= self.config.rotation_period {
                cred = self.rotate_identifiers(&cred.cred_id).unwrap_or(cred);
            }
        }
        self.state.sign_count += 1;
        let auth_data = AuthData::new(&cred.rp_id, flags, self.state.sign_count).encode();
        let mut signed = auth_data.clone();
        signed.extend_from_slice(client_data_hash);
        let signature = sign(&cred.signing_key(), &signed);
        AssertionResponse {
            cred_id: cred.cred_id.clone(),
            auth_data,
            signature,
            user_id: cred.discoverable.then(|| cred.user_id.clone()),
            user_name: (cred.discoverable && flags & FLAG_UV != 0).then(|| cred.user_name.clone()),
            number_of_credentials,
            cred_blob: if want_cred_blob && cred.discoverable { cred.cred_blob.clone() } else { None },
        }
    }

    /// Gives a stored credential fresh credential and user ids, keeping its key.
    pub fn rotate_identifiers(&mut self, cred_id: &[u8]) -> Option<Credential> {
        let idx = self.state.credentials.iter().position(|c| c.cred_id == cred_id)?;
        let rp_id = self.state.credentials[idx].rp_id.clone();
        let new_id = self.mint_cred_id(&rp_id);
        let user_len = self.state.credentials[idx].user_id.len().max(1);
        let mut new_user = vec![0u8; user_len];
        self.rng.fill_bytes(&mut new_user);
        let cred = &mut self.state.credentials[idx];
        self.state.assertion_counters.remove(&cred.cred_id);
        cred.cred_id = new_id.clone();
        cred.user_id = new_user;
        self.state.assertion_counters.insert(new_id, 0);
        Some(cred.clone())
    }

    pub fn lookup_credential(&self, rp_id: &str, cred_id: &[u8]) -> Option<Credential> {
        self.state
            .credentials
            .iter()
            .find(|c| c.rp_id == rp_id && c.cred_id == cred_id)
            .cloned()
            .or_else(|| self.recover_credential(rp_id, cred_id))
    }
}

#[cfg(test)]
mod tests;
