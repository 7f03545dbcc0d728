use super::{Authenticator, Outcome, PinUvToken, TokenScope};
use crate::cbor::CborMap;
use crate::codec::{ClientPinSub, StatusCode};
use crate::crypto::{
    aes256_cbc_decrypt, aes256_cbc_encrypt, cose_to_public_key, pin_hash, unpad_pin,
    verify_pin_auth, PIN_PADDED_LEN,
};
use crate::messages::{ClientPinParams, PinSlot, PIN_PROTOCOL_ONE};

const MIN_PIN_CHARS: usize = 4;
const MAX_PIN_CHARS: usize = 63;

impl Authenticator {
    pub(super) fn client_pin(&mut self, p: &ClientPinParams) -> Outcome {
        if p.sub != ClientPinSub::GetRetries {
            match p.protocol {
                None => return Err(StatusCode::MissingParameter),
                Some(PIN_PROTOCOL_ONE) => {}
                Some(_) => return Err(StatusCode::InvalidParameter),
            }
        }
        if p.slot == PinSlot::Destructive && !self.config.has(super::Countermeasure::C4) {
            return Err(StatusCode::InvalidParameter);
        }
        match p.sub {
            ClientPinSub::GetRetries => Ok(Some(
                CborMap::new().with(3, u64::from(self.state.pin.total_retries_remaining)),
            )),
            ClientPinSub::GetKeyAgreement => {
                Ok(Some(CborMap::new().with(1, self.state.key_agreement_key.public_cose())))
            }
            ClientPinSub::SetPin => self.set_pin(p),
            ClientPinSub::ChangePin => self.change_pin(p),
            ClientPinSub::GetPinToken => self.get_pin_token(p),
        }
    }

    fn shared_secret(&self, p: &ClientPinParams) -> Result<[u8; 32], StatusCode> {
        let cose = p.key_agreement.as_ref().ok_or(StatusCode::MissingParameter)?;
        let peer = cose_to_public_key(cose).ok_or(StatusCode::InvalidParameter)?;
        Ok(self.state.key_agreement_key.shared_secret(&peer))
    }

    fn decrypt_new_pin(shared: &[u8; 32], new_pin_enc: &[u8]) -> Result<[u8; 16], StatusCode> {
        if new_pin_enc.len() != PIN_PADDED_LEN {
            return Err(StatusCode::InvalidParameter);
        }
        let padded = aes256_cbc_decrypt(shared, new_pin_enc).ok_or(StatusCode::InvalidParameter)?;
        let pin = unpad_pin(&padded).ok_or(StatusCode::PinPolicyViolation)?;
        let chars = pin.chars().count();
        if !(MIN_PIN_CHARS..=MAX_PIN_CHARS).contains(&chars) {
            return Err(StatusCode::PinPolicyViolation);
        }
        Ok(pin_hash(&pin))
    }

    fn store_pin(&mut self, slot: PinSlot, hash: [u8; 16]) {
        match slot {
            PinSlot::Normal => self.state.pin.pin_hash = Some(hash),
            PinSlot::Destructive => self.state.pin.destructive_pin_hash = Some(hash),
        }
    }

    fn set_pin(&mut self, p: &ClientPinParams) -> Outcome {
        if self.state.pin.hash_for(p.slot).is_some() {
            return Err(StatusCode::NotAllowed);
        }
        let shared = self.shared_secret(p)?;
        let new_pin_enc = p.new_pin_enc.as_deref().ok_or(StatusCode::MissingParameter)?;
        let auth = p.pin_auth.as_deref().ok_or(StatusCode::MissingParameter)?;
        if !verify_pin_auth(&shared, new_pin_enc, auth) {
            return Err(StatusCode::PinAuthInvalid);
        }
        let hash = Self::decrypt_new_pin(&shared, new_pin_enc)?;
        self.store_pin(p.slot, hash);
        Ok(None)
    }

    /// Compares an encrypted PIN hash against `slot`, updating retry state.
    fn check_pin_hash(
        &mut self,
        shared: &[u8; 32],
        slot: PinSlot,
        pin_hash_enc: &[u8],
    ) -> Result<(), StatusCode> {
        let expected = self.state.pin.hash_for(slot).ok_or(StatusCode::PinNotSet)?;
        if pin_hash_enc.len() != 16 {
            return Err(StatusCode::InvalidParameter);
        }
        let got = aes256_cbc_decrypt(shared, pin_hash_enc).ok_or(StatusCode::InvalidParameter)?;
        if got[..] == expected[..] {
            self.state.pin.record_success();
            return Ok(());
        }
        self.state.pin.record_failure();
        if self.state.pin.hard_locked {
            self.state.issued_token = None;
            Err(StatusCode::PinBlocked)
        } else if self.state.pin.soft_locked {
            Err(StatusCode::PinAuthBlocked)
        } else {
            Err(StatusCode::PinInvalid)
        }
    }

    fn change_pin(&mut self, p: &ClientPinParams) -> Outcome {
        if self.state.pin.hash_for(p.slot).is_none() {
            return Err(StatusCode::PinNotSet);
        }
        let shared = self.shared_secret(p)?;
        let new_pin_enc = p.new_pin_enc.as_deref().ok_or(StatusCode::MissingParameter)?;
        let pin_hash_enc = p.pin_hash_enc.as_deref().ok_or(StatusCode::MissingParameter)?;
        let auth = p.pin_auth.as_deref().ok_or(StatusCode::MissingParameter)?;
        let mut signed = new_pin_enc.to_vec();
        signed.extend_from_slice(pin_hash_enc);
        if !verify_pin_auth(&shared, &signed, auth) {
            return Err(StatusCode::PinAuthInvalid);
        }
        self.check_pin_hash(&shared, p.slot, pin_hash_enc)?;
        let hash = Self::decrypt_new_pin(&shared, new_pin_enc)?;
        self.store_pin(p.slot, hash);
        self.state.issued_token = None;
        Ok(None)
    }

    fn get_pin_token(&mut self, p: &ClientPinParams) -> Outcome {
        if self.state.pin.hash_for(p.slot).is_none() {
            return Err(StatusCode::PinNotSet);
        }
        let shared = self.shared_secret(p)?;
        let pin_hash_enc = p.pin_hash_enc.as_deref().ok_or(StatusCode::MissingParameter)?;
        self.check_pin_hash(&shared, p.slot, pin_hash_enc)?;
        let scope = match p.slot {
            PinSlot::Normal => TokenScope::Normal,
            PinSlot::Destructive => TokenScope::Destructive,
        };
        let token: [u8; 32] = self.random_bytes();
        self.state.issued_token =
            Some(PinUvToken { token, issued_at: self.now_ms, valid: true, scope });
        self.fresh_pin_entry = Some(scope);
        let enc = aes256_cbc_encrypt(&shared, &token).expect("token is two blocks");
        Ok(Some(CborMap::new().with(2, enc)))
    }
}
