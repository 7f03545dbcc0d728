//! Identifier fingerprints harvested from assertions.

use std::collections::BTreeMap;
use std::fmt;

use crate::crypto::sha256;

/// One credential as seen through an assertion.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Sighting {
    pub rp_id: String,
    pub cred_id: Vec<u8>,
    pub user_id: Vec<u8>,
}

/// Sorted multiset of sightings, plus GetInfo fields when profiling ran in
/// the same session.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Fingerprint {
    sightings: Vec<Sighting>,
    pub info: Option<BTreeMap<String, String>>,
}

impl Fingerprint {
    pub fn new(mut sightings: Vec<Sighting>) -> Self {
        sightings.sort();
        Fingerprint { sightings, info: None }
    }

    pub fn push(&mut self, s: Sighting) {
        let at = self.sightings.partition_point(|x| x <= &s);
        self.sightings.insert(at, s);
    }

    pub fn sightings(&self) -> &[Sighting] {
        &self.sightings
    }

    pub fn len(&self) -> usize {
        self.sightings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sightings.is_empty()
    }

    pub fn rp_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.sightings.iter().map(|s| s.rp_id.as_str()).collect();
        ids.dedup();
        ids
    }

    /// Short stable digest for reports.
    pub fn digest(&self) -> String {
        let mut buf = Vec::new();
        for s in &self.sightings {
            for part in [s.rp_id.as_bytes(), &s.cred_id, &s.user_id] {
                buf.extend_from_slice(&(part.len() as u32).to_be_bytes());
                buf.extend_from_slice(part);
            }
        }
        if let Some(info) = &self.info {
            for (k, v) in info {
                buf.extend_from_slice(k.as_bytes());
                buf.push(b'=');
                buf.extend_from_slice(v.as_bytes());
                buf.push(0);
            }
        }
        hex::encode(&sha256(&buf)[..8])
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.len(), self.digest())
    }
}

/// Two harvests point at the same person.
pub fn match_fingerprints(a: &Fingerprint, b: &Fingerprint) -> bool {
    !a.is_empty() && a == b
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(rp: &str, c: u8, u: u8) -> Sighting {
        Sighting { rp_id: rp.into(), cred_id: vec![c; 4], user_id: vec![u; 4] }
    }

    #[test]
    fn order_does_not_matter() {
        let a = Fingerprint::new(vec![s("b.com", 1, 1), s("a.com", 2, 2)]);
        let mut b = Fingerprint::default();
        b.push(s("a.com", 2, 2));
        b.push(s("b.com", 1, 1));
        assert!(match_fingerprints(&a, &b));
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.rp_ids(), ["a.com", "b.com"]);
    }

    #[test]
    fn multiplicity_counts() {
        let a = Fingerprint::new(vec![s("a.com", 1, 1)]);
        let b = Fingerprint::new(vec![s("a.com", 1, 1), s("a.com", 1, 1)]);
        assert!(!match_fingerprints(&a, &b));
    }

    #[test]
    fn empty_never_matches() {
        assert!(!match_fingerprints(&Fingerprint::default(), &Fingerprint::default()));
    }

    #[test]
    fn rotated_ids_do_not_match() {
        let a = Fingerprint::new(vec![s("a.com", 1, 1)]);
        let b = Fingerprint::new(vec![s("a.com", 3, 1)]);
        assert!(!match_fingerprints(&a, &b));
    }
}
