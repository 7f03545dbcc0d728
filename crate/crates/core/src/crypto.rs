//! Primitives for PIN/UV auth protocol one and credential keys.

use aes::Aes256;
use cbc::cipher::block_padding::NoPadding;
use cbc::cipher::{BlockDecryptMut, BlockEncryptMut, KeyIvInit};
use hmac::{Hmac, Mac};
use p256::ecdsa::signature::{Signer, Verifier};
use p256::ecdsa::{Signature, SigningKey, VerifyingKey};
use p256::elliptic_curve::sec1::ToEncodedPoint;
use p256::{EncodedPoint, PublicKey, SecretKey};
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};

use crate::cbor::CborMap;

type HmacSha256 = Hmac<Sha256>;

/// COSE_Key labels and values used for the ECDH key agreement key.
const COSE_KTY: i64 = 1;
const COSE_ALG: i64 = 3;
const COSE_CRV: i64 = -1;
const COSE_X: i64 = -2;
const COSE_Y: i64 = -3;
const COSE_KTY_EC2: i64 = 2;
const COSE_ALG_ECDH_ES_HKDF_256: i64 = -25;
const COSE_ALG_ES256: i64 = -7;
const COSE_CRV_P256: i64 = 1;

pub const PIN_PADDED_LEN: usize = 64;
pub const PIN_AUTH_LEN: usize = 16;

pub fn sha256(data: &[u8]) -> [u8; 32] {
    Sha256::digest(data).into()
}

pub fn hmac_sha256(key: &[u8], data: &[u8]) -> [u8; 32] {
    let mut mac = HmacSha256::new_from_slice(key).expect("HMAC accepts any key length");
    mac.update(data);
    mac.finalize().into_bytes().into()
}

/// First 16 bytes of HMAC-SHA-256, the protocol-one `pinUvAuthParam`.
pub fn pin_auth(key: &[u8], data: &[u8]) -> [u8; PIN_AUTH_LEN] {
    hmac_sha256(key, data)[..PIN_AUTH_LEN].try_into().unwrap()
}

pub fn verify_pin_auth(key: &[u8], data: &[u8], tag: &[u8]) -> bool {
    let mut mac = HmacSha256::new_from_slice(key).expect("HMAC accepts any key length");
    mac.update(data);
    tag.len() == PIN_AUTH_LEN && mac.verify_truncated_left(tag).is_ok()
}

/// LEFT(SHA-256(pin), 16).
pub fn pin_hash(pin: &str) -> [u8; 16] {
    sha256(pin.as_bytes())[..16].try_into().unwrap()
}

/// AES-256-CBC with an all-zero IV and no padding. `data` must be a whole
/// number of blocks.
pub fn aes256_cbc_encrypt(key: &[u8; 32], data: &[u8]) -> Option<Vec<u8>> {
    if !data.len().is_multiple_of(16) {
        return None;
    }
    let mut buf = data.to_vec();
    let len = buf.len();
    cbc::Encryptor::<Aes256>::new(key.into(), &[0u8; 16].into())
        .encrypt_padded_mut::<NoPadding>(&mut buf, len)
        .ok()?;
    Some(buf)
}

pub fn aes256_cbc_decrypt(key: &[u8; 32], data: &[u8]) -> Option<Vec<u8>> {
    if data.is_empty() || !data.len().is_multiple_of(16) {
        return None;
    }
    let mut buf = data.to_vec();
    let out = cbc::Decryptor::<Aes256>::new(key.into(), &[0u8; 16].into())
        .decrypt_padded_mut::<NoPadding>(&mut buf)
        .ok()?
        .len();
    buf.truncate(out);
    Some(buf)
}

/// Zero-pads a PIN to the fixed 64-byte block used by SetPin/ChangePin.
pub fn pad_pin(pin: &str) -> Option<[u8; PIN_PADDED_LEN]> {
    let raw = pin.as_bytes();
    if raw.len() >= PIN_PADDED_LEN {
        return None;
    }
    let mut out = [0u8; PIN_PADDED_LEN];
    out[..raw.len()].copy_from_slice(raw);
    Some(out)
}

/// Inverse of [`pad_pin`]; `None` when the block is not valid UTF-8.
pub fn unpad_pin(padded: &[u8]) -> Option<String> {
    let end = padded.iter().position(|&b| b == 0).unwrap_or(padded.len());
    if padded[end..].iter().any(|&b| b != 0) {
        return None;
    }
    String::from_utf8(padded[..end].to_vec()).ok()
}

/// An ephemeral P-256 key used for the PIN protocol ECDH.
#[derive(Clone)]
pub struct AgreementKey {
    secret: SecretKey,
}

impl AgreementKey {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        AgreementKey { secret: SecretKey::random(rng) }
    }

    pub fn from_bytes(bytes: &[u8; 32]) -> Option<Self> {
        SecretKey::from_slice(bytes).ok().map(|secret| AgreementKey { secret })
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        self.secret.to_bytes().into()
    }

    pub fn public(&self) -> PublicKey {
        self.secret.public_key()
    }

    pub fn public_cose(&self) -> CborMap {
        public_key_to_cose(&self.public(), COSE_ALG_ECDH_ES_HKDF_256)
    }

    /// SHA-256 of the ECDH x-coordinate.
    pub fn shared_secret(&self, peer: &PublicKey) -> [u8; 32] {
        let shared = p256::ecdh::diffie_hellman(self.secret.to_nonzero_scalar(), peer.as_affine());
        sha256(shared.raw_secret_bytes())
    }
}

impl std::fmt::Debug for AgreementKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AgreementKey").finish_non_exhaustive()
    }
}

pub fn public_key_to_cose(pk: &PublicKey, alg: i64) -> CborMap {
    let point = pk.to_encoded_point(false);
    CborMap::new()
        .with(COSE_KTY, COSE_KTY_EC2)
        .with(COSE_ALG, alg)
        .with(COSE_CRV, COSE_CRV_P256)
        .with(COSE_X, point.x().expect("uncompressed point").to_vec())
        .with(COSE_Y, point.y().expect("uncompressed point").to_vec())
}

pub fn cose_to_public_key(map: &CborMap) -> Option<PublicKey> {
    let x = map.get_int(COSE_X)?.as_bytes()?;
    let y = map.get_int(COSE_Y)?.as_bytes()?;
    if x.len() != 32 || y.len() != 32 || map.get_int(COSE_KTY)?.as_i64()? != COSE_KTY_EC2 {
        return None;
    }
    let point = EncodedPoint::from_affine_coordinates(x.into(), y.into(), false);
    PublicKey::from_sec1_bytes(point.as_bytes()).ok()
}

/// Derives the signing key bound to a credential id under a master key.
pub fn derive_credential_key(master_key: &[u8; 32], cred_id: &[u8]) -> SigningKey {
    let mut counter = 0u8;
    loop {
        let mut input = b"credential-key".to_vec();
        input.extend_from_slice(cred_id);
        input.push(counter);
        if let Ok(sk) = SecretKey::from_slice(&hmac_sha256(master_key, &input)) {
            return SigningKey::from(sk);
        }
        counter = counter.wrapping_add(1);
    }
}

pub fn credential_public_cose(key: &SigningKey) -> CborMap {
    let pk = PublicKey::from(key.verifying_key());
    public_key_to_cose(&pk, COSE_ALG_ES256)
}

/// DER-encoded ECDSA P-256 signature (RFC 6979 nonces, so deterministic).
pub fn sign(key: &SigningKey, message: &[u8]) -> Vec<u8> {
    let sig: Signature = key.sign(message);
    sig.to_der().as_bytes().to_vec()
}

pub fn verify(public: &CborMap, message: &[u8], der: &[u8]) -> bool {
    let Some(pk) = cose_to_public_key(public) else {
        return false;
    };
    let Ok(sig) = Signature::from_der(der) else {
        return false;
    };
    VerifyingKey::from(&pk).verify(message, &sig).is_ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn ecdh_agrees() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let a = AgreementKey::generate(&mut rng);
        let b = AgreementKey::generate(&mut rng);
        let pb = cose_to_public_key(&b.public_cose()).unwrap();
        assert_eq!(a.shared_secret(&pb), b.shared_secret(&a.public()));
    }

    #[test]
    fn cbc_round_trip_and_block_check() {
        let key = [7u8; 32];
        let ct = aes256_cbc_encrypt(&key, &[1u8; 32]).unwrap();
        assert_ne!(ct, [1u8; 32]);
        assert_eq!(aes256_cbc_decrypt(&key, &ct).unwrap(), [1u8; 32]);
        assert!(aes256_cbc_encrypt(&key, &[0u8; 15]).is_none());
    }

    #[test]
    fn pin_padding() {
        let p = pad_pin("1234").unwrap();
        assert_eq!(unpad_pin(&p).as_deref(), Some("1234"));
        assert!(pad_pin(&"x".repeat(64)).is_none());
    }

    #[test]
    fn truncated_hmac_verifies() {
        let tag = pin_auth(b"k", b"m");
        assert!(verify_pin_auth(b"k", b"m", &tag));
        assert!(!verify_pin_auth(b"k", b"n", &tag));
        assert!(!verify_pin_auth(b"k", b"m", &tag[..8]));
    }

    #[test]
    fn signatures_verify_against_cose_key() {
        let key = derive_credential_key(&[3u8; 32], b"cred");
        let sig = sign(&key, b"hello");
        let cose = credential_public_cose(&key);
        assert!(verify(&cose, b"hello", &sig));
        assert!(!verify(&cose, b"hellO", &sig));
    }
}
