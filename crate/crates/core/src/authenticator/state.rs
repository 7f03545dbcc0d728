use std::collections::BTreeMap;

use p256::ecdsa::SigningKey;

use crate::crypto::{credential_public_cose, AgreementKey};
use crate::cbor::CborMap;
use crate::codec::Command;
use crate::messages::{PinSlot, ProtectPolicy};

pub const INITIAL_PIN_RETRIES: u8 = 8;
pub const SOFT_LOCK_THRESHOLD: u8 = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Credential {
    pub cred_id: Vec<u8>,
    pub rp_id: String,
    pub user_id: Vec<u8>,
    pub user_name: String,
    /// P-256 private scalar.
    pub private_key: [u8; 32],
    pub protect_policy: ProtectPolicy,
    pub cred_blob: Option<Vec<u8>>,
    pub discoverable: bool,
    pub created_at: u64,
}

impl Credential {
    pub fn signing_key(&self) -> SigningKey {
        SigningKey::from_bytes(&self.private_key.into()).expect("stored scalar is valid")
    }

    pub fn public_key(&self) -> CborMap {
        credential_public_cose(&self.signing_key())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PinState {
    pub pin_hash: Option<[u8; 16]>,
    /// Second PIN authorizing destructive commands (dual-PIN countermeasure).
    pub destructive_pin_hash: Option<[u8; 16]>,
    pub total_retries_remaining: u8,
    pub consecutive_failures_since_boot: u8,
    pub soft_locked: bool,
    pub hard_locked: bool,
}

impl Default for PinState {
    fn default() -> Self {
        PinState {
            pin_hash: None,
            destructive_pin_hash: None,
            total_retries_remaining: INITIAL_PIN_RETRIES,
            consecutive_failures_since_boot: 0,
            soft_locked: false,
            hard_locked: false,
        }
    }
}

impl PinState {
    pub fn is_set(&self) -> bool {
        self.pin_hash.is_some()
    }

    pub fn hash_for(&self, slot: PinSlot) -> Option<[u8; 16]> {
        match slot {
            PinSlot::Normal => self.pin_hash,
            PinSlot::Destructive => self.destructive_pin_hash,
        }
    }

    /// Records one wrong PIN. Hard lock takes precedence over soft lock.
    pub fn record_failure(&mut self) {
        self.total_retries_remaining = self.total_retries_remaining.saturating_sub(1);
        self.consecutive_failures_since_boot += 1;
        if self.total_retries_remaining == 0 {
            self.hard_locked = true;
        } else if self.consecutive_failures_since_boot >= SOFT_LOCK_THRESHOLD {
            self.soft_locked = true;
        }
    }

    pub fn record_success(&mut self) {
        self.consecutive_failures_since_boot = 0;
    }

    pub fn new_session(&mut self) {
        self.consecutive_failures_since_boot = 0;
        self.soft_locked = false;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenScope {
    Normal,
    Destructive,
}

impl TokenScope {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenScope::Normal => "normal",
            TokenScope::Destructive => "destructive",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PinUvToken {
    pub token: [u8; 32],
    pub issued_at: u64,
    pub valid: bool,
    pub scope: TokenScope,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RpCursor {
    /// Index of the next relying party to return.
    pub next: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CredCursor {
    pub rp_id_hash: [u8; 32],
    pub next: usize,
}

/// Remaining credentials of a multi-credential GetAssertion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssertionQueue {
    pub client_data_hash: [u8; 32],
    pub flags: u8,
    pub want_cred_blob: bool,
    pub cred_ids: Vec<Vec<u8>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ApiClass {
    NonDestructive,
    Destructive,
}

/// One LED feedback pattern shown for an API call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeedbackEvent {
    pub at_ms: u64,
    pub blinks: u8,
    pub command: Command,
}

impl FeedbackEvent {
    pub fn class(&self) -> ApiClass {
        if self.blinks >= 2 {
            ApiClass::Destructive
        } else {
            ApiClass::NonDestructive
        }
    }
}

#[derive(Debug, Clone)]
pub struct AuthenticatorState {
    pub master_key: [u8; 32],
    pub credentials: Vec<Credential>,
    pub pin: PinState,
    pub powered_on_at: u64,
    pub key_agreement_key: AgreementKey,
    pub issued_token: Option<PinUvToken>,
    pub rp_cursor: Option<RpCursor>,
    pub cred_cursor: Option<CredCursor>,
    pub assertion_queue: Option<AssertionQueue>,
    pub selection_call_log: Vec<u64>,
    pub assertion_counters: BTreeMap<Vec<u8>, u32>,
    pub sign_count: u32,
}

impl AuthenticatorState {
    pub fn discoverable_count(&self) -> usize {
        self.credentials.iter().filter(|c| c.discoverable).count()
    }

    /// Distinct relying parties with stored credentials, in first-stored order.
    pub fn rp_ids(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in self.credentials.iter().filter(|c| c.discoverable) {
            if !out.contains(&c.rp_id) {
                out.push(c.rp_id.clone());
            }
        }
        out
    }

    pub fn valid_token(&self) -> Option<&PinUvToken> {
        self.issued_token.as_ref().filter(|t| t.valid)
    }

    pub fn clear_cursors(&mut self) {
        self.rp_cursor = None;
        self.cred_cursor = None;
        self.assertion_queue = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_consecutive_failures_soft_lock() {
        let mut pin = PinState::default();
        pin.record_failure();
        pin.record_failure();
        assert!(!pin.soft_locked);
        pin.record_failure();
        assert!(pin.soft_locked);
        assert_eq!(pin.total_retries_remaining, 5);
        pin.new_session();
        assert!(!pin.soft_locked);
    }

    #[test]
    fn eighth_failure_hard_locks() {
        let mut pin = PinState::default();
        for i in 0..8 {
            if i % 2 == 0 {
                pin.new_session();
            }
            pin.record_failure();
        }
        assert!(pin.hard_locked);
        assert_eq!(pin.total_retries_remaining, 0);
        pin.new_session();
        assert!(pin.hard_locked);
    }
}
