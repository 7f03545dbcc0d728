//! Persisted authenticator state.
//!
//! The snapshot is line-oriented `key=value` text. Secrets and free-form
//! strings are hex encoded, sets are comma separated, `-` marks an absent
//! value. Lines, in order:
//!
//! ```text
//! ctaplab-snapshot v1
//! config.profile=<name>
//! config.max_discoverable=<n>
//! config.supports_selection=<bool>
//! config.transports=<usb,nfc>
//! config.countermeasures=<C1,..|->
//! config.cve_2024_35311=<bool>
//! config.trusted_clients=<hex,..|->
//! config.rotation_period=<n>
//! config.aaguid=<hex16>
//! config.firmware_version=<n>
//! clock.now_ms=<n>
//! clock.powered_on_at=<n>
//! rng.seed=<hex32>
//! rng.stream=<n>
//! rng.word_pos=<n>
//! master_key=<hex32>
//! pin.hash=<hex16|->
//! pin.destructive_hash=<hex16|->
//! pin.retries=<n>
//! pin.consecutive_failures=<n>
//! pin.soft_locked=<bool>
//! pin.hard_locked=<bool>
//! key_agreement=<hex32>
//! token=<hex32>:<issued_at>:<normal|destructive>|-
//! sign_count=<n>
//! selection_calls=<ms,..|->
//! credential=<cred_id>:<rp_id>:<user_id>:<user_name>:<key>:<policy>:<blob|->:<discoverable>:<created_at>:<assertions>
//! checksum=<hex sha256 of every preceding byte>
//! ```
//!
//! `credential` repeats once per stored credential. Enumeration cursors, the
//! pending assertion queue and the feedback log are not persisted.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand_chacha::ChaCha20Rng;
use rand::SeedableRng;
use thiserror::Error;

use super::{
    Authenticator, AuthenticatorConfig, AuthenticatorState, Countermeasure, Credential, PinState,
    PinUvToken, TokenScope, Transport,
};
use crate::crypto::{sha256, AgreementKey};
use crate::messages::ProtectPolicy;

const HEADER: &str = "ctaplab-snapshot v1";

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("not a snapshot file")]
    BadHeader,
    #[error("missing field {0}")]
    MissingField(String),
    #[error("bad value for {field}: {value:?}")]
    BadValue { field: String, value: String },
    #[error("checksum mismatch")]
    ChecksumMismatch,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn opt_hex(v: Option<&[u8]>) -> String {
    v.map(hex::encode).unwrap_or_else(|| "-".into())
}

fn join_or_dash(items: impl Iterator<Item = String>) -> String {
    let v: Vec<String> = items.collect();
    if v.is_empty() {
        "-".into()
    } else {
        v.join(",")
    }
}

impl Authenticator {
    pub fn to_snapshot(&self) -> String {
        let c = &self.config;
        let s = &self.state;
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            writeln!(out, "{k}={v}").unwrap();
        };
        line("config.profile", c.profile.clone());
        line("config.max_discoverable", c.max_discoverable.to_string());
        line("config.supports_selection", c.supports_selection.to_string());
        line("config.transports", join_or_dash(c.transports.iter().map(|t| t.to_string())));
        line("config.countermeasures", join_or_dash(c.countermeasures.iter().map(|m| m.to_string())));
        line("config.cve_2024_35311", c.cve_2024_35311.to_string());
        line("config.trusted_clients", join_or_dash(c.trusted_clients.iter().map(hex::encode)));
        line("config.rotation_period", c.rotation_period.to_string());
        line("config.aaguid", hex::encode(c.aaguid));
        line("config.firmware_version", c.firmware_version.to_string());
        line("clock.now_ms", self.now_ms.to_string());
        line("clock.powered_on_at", s.powered_on_at.to_string());
        line("rng.seed", hex::encode(self.rng.get_seed()));
        line("rng.stream", self.rng.get_stream().to_string());
        line("rng.word_pos", self.rng.get_word_pos().to_string());
        line("master_key", hex::encode(s.master_key));
        line("pin.hash", opt_hex(s.pin.pin_hash.as_ref().map(|h| &h[..])));
        line("pin.destructive_hash", opt_hex(s.pin.destructive_pin_hash.as_ref().map(|h| &h[..])));
        line("pin.retries", s.pin.total_retries_remaining.to_string());
        line("pin.consecutive_failures", s.pin.consecutive_failures_since_boot.to_string());
        line("pin.soft_locked", s.pin.soft_locked.to_string());
        line("pin.hard_locked", s.pin.hard_locked.to_string());
        line("key_agreement", hex::encode(s.key_agreement_key.to_bytes()));
        line(
            "token",
            match s.valid_token() {
                Some(t) => format!("{}:{}:{}", hex::encode(t.token), t.issued_at, t.scope.as_str()),
                None => "-".into(),
            },
        );
        line("sign_count", s.sign_count.to_string());
        line("selection_calls", join_or_dash(s.selection_call_log.iter().map(u64::to_string)));
        for cred in &s.credentials {
            let assertions = s.assertion_counters.get(&cred.cred_id).copied().unwrap_or(0);
            line(
                "credential",
                format!(
                    "{}:{}:{}:{}:{}:{}:{}:{}:{}:{}",
                    hex::encode(&cred.cred_id),
                    hex::encode(cred.rp_id.as_bytes()),
                    hex::encode(&cred.user_id),
                    hex::encode(cred.user_name.as_bytes()),
                    hex::encode(cred.private_key),
                    cred.protect_policy.to_u64(),
                    opt_hex(cred.cred_blob.as_deref()),
                    cred.discoverable,
                    cred.created_at,
                    assertions,
                ),
            );
        }
        let body = format!("{HEADER}\n{out}");
        let sum = hex::encode(sha256(body.as_bytes()));
        format!("{body}checksum={sum}\n")
    }

    pub fn from_snapshot(text: &str) -> Result<Self, SnapshotError> {
        let (body, sum_line) = match text.trim_end_matches('\n').rsplit_once('\n') {
            Some((body, last)) => (format!("{body}\n"), last),
            None => return Err(SnapshotError::BadHeader),
        };
        if !body.starts_with(HEADER) {
            return Err(SnapshotError::BadHeader);
        }
        let sum = sum_line
            .strip_prefix("checksum=")
            .ok_or_else(|| SnapshotError::MissingField("checksum".into()))?;
        if hex::encode(sha256(body.as_bytes())) != sum {
            return Err(SnapshotError::ChecksumMismatch);
        }
        let mut fields = Fields::default();
        for l in body.lines().skip(1) {
            let (k, v) = l.split_once('=').ok_or_else(|| bad("line", l))?;
            if k == "credential" {
                fields.credentials.push(v.to_owned());
            } else {
                fields.map.insert(k.to_owned(), v.to_owned());
            }
        }

        let config = AuthenticatorConfig {
            profile: fields.get("config.profile")?.to_owned(),
            max_discoverable: fields.parse("config.max_discoverable")?,
            supports_selection: fields.parse("config.supports_selection")?,
            transports: fields.set("config.transports", Transport::parse)?,
            countermeasures: fields.set("config.countermeasures", Countermeasure::parse)?,
            cve_2024_35311: fields.parse("config.cve_2024_35311")?,
            trusted_clients: fields.set("config.trusted_clients", |h| {
                String::from_utf8(hex::decode(h).ok()?).ok()
            })?,
            rotation_period: fields.parse("config.rotation_period")?,
            aaguid: fields.hex_array("config.aaguid")?,
            firmware_version: fields.parse("config.firmware_version")?,
        };
        let mut rng = ChaCha20Rng::from_seed(fields.hex_array("rng.seed")?);
        rng.set_stream(fields.parse("rng.stream")?);
        rng.set_word_pos(fields.parse("rng.word_pos")?);

        let ka: [u8; 32] = fields.hex_array("key_agreement")?;
        let key_agreement_key =
            AgreementKey::from_bytes(&ka).ok_or_else(|| bad("key_agreement", "invalid scalar"))?;
        let issued_token = match fields.get("token")? {
            "-" => None,
            t => {
                let parts: Vec<&str> = t.split(':').collect();
                let [tok, at, scope] = parts[..] else { return Err(bad("token", t)) };
                Some(PinUvToken {
                    token: decode_array(tok).ok_or_else(|| bad("token", t))?,
                    issued_at: at.parse().map_err(|_| bad("token", t))?,
                    valid: true,
                    scope: match scope {
                        "normal" => TokenScope::Normal,
                        "destructive" => TokenScope::Destructive,
                        _ => return Err(bad("token", t)),
                    },
                })
            }
        };
        let selection_call_log = match fields.get("selection_calls")? {
            "-" => Vec::new(),
            v => v
                .split(',')
                .map(|x| x.parse().map_err(|_| bad("selection_calls", v)))
                .collect::<Result<_, _>>()?,
        };
        let mut credentials = Vec::new();
        let mut assertion_counters = BTreeMap::new();
        for raw in &fields.credentials {
            let (cred, count) = parse_credential(raw).ok_or_else(|| bad("credential", raw))?;
            if count > 0 {
                assertion_counters.insert(cred.cred_id.clone(), count);
            }
            credentials.push(cred);
        }
        let state = AuthenticatorState {
            master_key: fields.hex_array("master_key")?,
            credentials,
            pin: PinState {
                pin_hash: fields.opt_hex_array("pin.hash")?,
                destructive_pin_hash: fields.opt_hex_array("pin.destructive_hash")?,
                total_retries_remaining: fields.parse("pin.retries")?,
                consecutive_failures_since_boot: fields.parse("pin.consecutive_failures")?,
                soft_locked: fields.parse("pin.soft_locked")?,
                hard_locked: fields.parse("pin.hard_locked")?,
            },
            powered_on_at: fields.parse("clock.powered_on_at")?,
            key_agreement_key,
            issued_token,
            rp_cursor: None,
            cred_cursor: None,
            assertion_queue: None,
            selection_call_log,
            assertion_counters,
            sign_count: fields.parse("sign_count")?,
        };
        let mut auth = Authenticator::new(config, 0);
        auth.state = state;
        auth.rng = rng;
        auth.now_ms = fields.parse("clock.now_ms")?;
        Ok(auth)
    }

    pub fn save(&self, path: &Path) -> Result<(), SnapshotError> {
        std::fs::write(path, self.to_snapshot())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SnapshotError> {
        Self::from_snapshot(&std::fs::read_to_string(path)?)
    }
}

fn bad(field: &str, value: &str) -> SnapshotError {
    SnapshotError::BadValue { field: field.to_owned(), value: value.to_owned() }
}

fn decode_array<const N: usize>(h: &str) -> Option<[u8; N]> {
    hex::decode(h).ok()?.try_into().ok()
}

fn parse_credential(raw: &str) -> Option<(Credential, u32)> {
    let parts: Vec<&str> = raw.split(':').collect();
    let [id, rp, user, name, key, policy, blob, disc, created, count] = parts[..] else {
        return None;
    };
    let cred = Credential {
        cred_id: hex::decode(id).ok()?,
        rp_id: String::from_utf8(hex::decode(rp).ok()?).ok()?,
        user_id: hex::decode(user).ok()?,
        user_name: String::from_utf8(hex::decode(name).ok()?).ok()?,
        private_key: decode_array(key)?,
        protect_policy: ProtectPolicy::from_u64(policy.parse().ok()?)?,
        cred_blob: if blob == "-" { None } else { Some(hex::decode(blob).ok()?) },
        discoverable: disc.parse().ok()?,
        created_at: created.parse().ok()?,
    };
    // Rejects scalars outside the curve order.
    p256::SecretKey::from_slice(&cred.private_key).ok()?;
    Some((cred, count.parse().ok()?))
}

#[derive(Default)]
struct Fields {
    map: BTreeMap<String, String>,
    credentials: Vec<String>,
}

impl Fields {
    fn get(&self, k: &str) -> Result<&str, SnapshotError> {
        self.map.get(k).map(String::as_str).ok_or_else(|| SnapshotError::MissingField(k.into()))
    }

    fn parse<T: FromStr>(&self, k: &str) -> Result<T, SnapshotError> {
        let v = self.get(k)?;
        v.parse().map_err(|_| bad(k, v))
    }

    fn hex_array<const N: usize>(&self, k: &str) -> Result<[u8; N], SnapshotError> {
        let v = self.get(k)?;
        decode_array(v).ok_or_else(|| bad(k, v))
    }

    fn opt_hex_array<const N: usize>(&self, k: &str) -> Result<Option<[u8; N]>, SnapshotError> {
        match self.get(k)? {
            "-" => Ok(None),
            _ => self.hex_array(k).map(Some),
        }
    }

    fn set<T: Ord>(&self, k: &str, f: impl Fn(&str) -> Option<T>) -> Result<BTreeSet<T>, SnapshotError> {
        let v = self.get(k)?;
        if v == "-" {
            return Ok(BTreeSet::new());
        }
        v.split(',').map(|x| f(x).ok_or_else(|| bad(k, v))).collect()
    }
}
