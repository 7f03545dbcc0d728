//! Relying-party bookkeeping: accounts, registered public keys and
//! challenge/verify, with WebAuthn reduced to what the authenticator signs.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::templates::RelyingPartyTemplate;
use crate::cbor::CborMap;
use crate::crypto::{sha256, verify};
use crate::messages::{AssertionResponse, AuthData};

#[derive(Debug, Clone, PartialEq)]
pub struct CredentialRecord {
    pub rp_id: String,
    pub user_name: String,
    pub user_id: Vec<u8>,
    pub cred_id: Vec<u8>,
    pub public_key: CborMap,
    pub sign_count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssertionRecord {
    pub user_name: String,
    pub cred_id: Vec<u8>,
    pub user_id: Option<Vec<u8>>,
    pub sign_count: u32,
    pub user_verified: bool,
    /// The authenticator presented new identifiers for this credential.
    pub rotated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VerifyError {
    MalformedAuthData,
    WrongRp,
    UnknownCredential,
    BadSignature,
}

#[derive(Debug, Clone)]
pub struct RelyingParty {
    pub template: RelyingPartyTemplate,
    records: Vec<CredentialRecord>,
    rng: ChaCha20Rng,
}

impl RelyingParty {
    pub fn new(template: RelyingPartyTemplate, seed: u64) -> Self {
        let mut material = seed.to_be_bytes().to_vec();
        material.extend_from_slice(template.rp_id.as_bytes());
        let rng = ChaCha20Rng::from_seed(sha256(&material));
        RelyingParty { template, records: Vec::new(), rng }
    }

    pub fn rp_id(&self) -> &str {
        &self.template.rp_id
    }

    pub fn records(&self) -> &[CredentialRecord] {
        &self.records
    }

    pub fn record_for(&self, user_name: &str) -> Option<&CredentialRecord> {
        self.records.iter().find(|r| r.user_name == user_name)
    }

    /// Account handle for a user, created on first use and fixed afterwards.
    pub fn user_id_for(&mut self, user_name: &str) -> Vec<u8> {
        if let Some(r) = self.record_for(user_name) {
            return r.user_id.clone();
        }
        let mut id = vec![0u8; 32];
        self.rng.fill_bytes(&mut id);
        id
    }

    /// Hash of fresh client data for the next ceremony.
    pub fn challenge(&mut self) -> [u8; 32] {
        let mut nonce = [0u8; 32];
        self.rng.fill_bytes(&mut nonce);
        let mut client_data = b"webauthn:".to_vec();
        client_data.extend_from_slice(self.template.rp_id.as_bytes());
        client_data.extend_from_slice(&nonce);
        sha256(&client_data)
    }

    pub fn store(&mut self, record: CredentialRecord) {
        self.records.retain(|r| r.user_name != record.user_name);
        self.records.push(record);
    }

    /// Checks an assertion against the registered keys. A credential that
    /// shows up under new identifiers is accepted when its signature
    /// verifies under a registered key, and the record follows the new ids.
    pub fn verify_assertion(
        &mut self,
        client_data_hash: &[u8; 32],
        resp: &AssertionResponse,
    ) -> Result<AssertionRecord, VerifyError> {
        let auth = AuthData::parse(&resp.auth_data).ok_or(VerifyError::MalformedAuthData)?;
        if auth.rp_id_hash != sha256(self.template.rp_id.as_bytes()) {
            return Err(VerifyError::WrongRp);
        }
        let mut signed = resp.auth_data.clone();
        signed.extend_from_slice(client_data_hash);
        let known = self.records.iter().position(|r| r.cred_id == resp.cred_id);
        let idx = match known {
            Some(i) => i,
            None => self
                .records
                .iter()
                .position(|r| verify(&r.public_key, &signed, &resp.signature))
                .ok_or(VerifyError::UnknownCredential)?,
        };
        let rec = &mut self.records[idx];
        if !verify(&rec.public_key, &signed, &resp.signature) {
            return Err(VerifyError::BadSignature);
        }
        let rotated = known.is_none();
        if rotated {
            rec.cred_id = resp.cred_id.clone();
            if let Some(u) = &resp.user_id {
                rec.user_id = u.clone();
            }
        }
        rec.sign_count = auth.sign_count;
        Ok(AssertionRecord {
            user_name: rec.user_name.clone(),
            cred_id: resp.cred_id.clone(),
            user_id: resp.user_id.clone(),
            sign_count: auth.sign_count,
            user_verified: auth.flags & crate::messages::FLAG_UV != 0,
            rotated,
        })
    }
}
