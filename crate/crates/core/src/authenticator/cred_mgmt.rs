use super::{api_class, Authenticator, Countermeasure, CredCursor, Outcome, RequestContext, RpCursor};
use crate::cbor::CborMap;
use crate::codec::{Command, CredMgmtSub, StatusCode, Subcommand};
use crate::crypto::sha256;
use crate::messages::{CredMgmtParams, EnumeratedCredential, EnumeratedRp};

impl Authenticator {
    pub(super) fn credential_management(
        &mut self,
        p: &CredMgmtParams,
        ctx: &mut RequestContext,
    ) -> Outcome {
        use CredMgmtSub::*;
        if matches!(p.sub, GetCredsMetadata | EnumerateRpsBegin | EnumerateCredentialsBegin | DeleteCredential) {
            let class = api_class(Command::CredentialManagement, Some(Subcommand::CredMgmt(p.sub)));
            self.verify_token(&p.auth_message(), p.pin_auth.as_deref(), p.protocol, class)?;
        }
        match p.sub {
            GetCredsMetadata => {
                let stored = self.state.discoverable_count();
                Ok(Some(
                    CborMap::new()
                        .with(1, stored)
                        .with(2, self.config.max_discoverable.saturating_sub(stored)),
                ))
            }
            EnumerateRpsBegin => {
                let rps = self.state.rp_ids();
                let first = rps.first().ok_or(StatusCode::NoCredentials)?;
                let out = EnumeratedRp {
                    rp_id: first.clone(),
                    rp_id_hash: sha256(first.as_bytes()),
                    total: Some(rps.len() as u64),
                };
                self.state.rp_cursor = Some(RpCursor { next: 1 });
                Ok(Some(out.to_map()))
            }
            EnumerateRpsGetNextRp => self.next_rp(),
            EnumerateCredentialsBegin => {
                let hash = p.rp_id_hash.ok_or(StatusCode::MissingParameter)?;
                let creds = self.creds_for_hash(&hash);
                if creds.is_empty() {
                    return Err(StatusCode::NoCredentials);
                }
                self.state.cred_cursor = Some(CredCursor { rp_id_hash: hash, next: 1 });
                Ok(Some(self.enumerated(&creds, 0, Some(creds.len() as u64))))
            }
            EnumerateCredentialsGetNextCredential => {
                let cursor = self.state.cred_cursor.clone().ok_or(StatusCode::NotAllowed)?;
                let creds = self.creds_for_hash(&cursor.rp_id_hash);
                if cursor.next >= creds.len() {
                    self.state.cred_cursor = None;
                    return Err(StatusCode::NotAllowed);
                }
                self.state.cred_cursor = Some(CredCursor { next: cursor.next + 1, ..cursor.clone() });
                Ok(Some(self.enumerated(&creds, cursor.next, None)))
            }
            DeleteCredential => {
                let id = p.credential_id.as_ref().ok_or(StatusCode::MissingParameter)?;
                let idx = self
                    .state
                    .credentials
                    .iter()
                    .position(|c| c.discoverable && &c.cred_id == id)
                    .ok_or(StatusCode::InvalidParameter)?;
                if self.config.has(Countermeasure::C7) {
                    self.require_presence(
                        ctx,
                        Command::CredentialManagement,
                        Some(Subcommand::CredMgmt(DeleteCredential)),
                        Some(Countermeasure::C7),
                    )?;
                }
                let removed = self.state.credentials.remove(idx);
                self.state.assertion_counters.remove(&removed.cred_id);
                Ok(None)
            }
        }
    }

    fn next_rp(&mut self) -> Outcome {
        let cursor = match self.state.rp_cursor.take() {
            Some(c) => c,
            // The flawed firmware keeps a default cursor that behaves as if
            // the first relying party had already been returned.
            None if self.config.cve_2024_35311 => RpCursor { next: 1 },
            None => return Err(StatusCode::NotAllowed),
        };
        let rps = self.state.rp_ids();
        if rps.is_empty() {
            return Err(StatusCode::NoCredentials);
        }
        let Some(rp) = rps.get(cursor.next) else {
            return Err(StatusCode::NotAllowed);
        };
        self.state.rp_cursor = Some(RpCursor { next: cursor.next + 1 });
        Ok(Some(
            EnumeratedRp { rp_id: rp.clone(), rp_id_hash: sha256(rp.as_bytes()), total: None }.to_map(),
        ))
    }

    fn creds_for_hash(&self, hash: &[u8; 32]) -> Vec<usize> {
        self.state
            .credentials
            .iter()
            .enumerate()
            .filter(|(_, c)| c.discoverable && &sha256(c.rp_id.as_bytes()) == hash)
            .map(|(i, _)| i)
            .collect()
    }

    fn enumerated(&self, idxs: &[usize], at: usize, total: Option<u64>) -> CborMap {
        let c = &self.state.credentials[idxs[at]];
        EnumeratedCredential {
            user_id: c.user_id.clone(),
            user_name: c.user_name.clone(),
            cred_id: c.cred_id.clone(),
            public_key: c.public_key(),
            total,
            protect_policy: c.protect_policy,
        }
        .to_map()
    }
}
