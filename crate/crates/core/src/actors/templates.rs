//! Relying-party templates: which RP id a site uses, what kind of
//! credential it registers and under which protection policy.

use std::fmt;

use serde::Deserialize;
use thiserror::Error;

use crate::messages::ProtectPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Deserialize)]
pub enum CredentialKind {
    #[serde(rename = "Disc")]
    Discoverable,
    /// Discoverable, registered with the default (weakest) policy.
    #[serde(rename = "DiscWeak")]
    DiscoverableWeak,
    #[serde(rename = "NonDisc")]
    NonDiscoverable,
}

impl CredentialKind {
    pub fn label(self) -> &'static str {
        match self {
            CredentialKind::Discoverable => "Disc",
            CredentialKind::DiscoverableWeak => "DiscWeak",
            CredentialKind::NonDiscoverable => "NonDisc",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "Disc" => Some(CredentialKind::Discoverable),
            "DiscWeak" => Some(CredentialKind::DiscoverableWeak),
            "NonDisc" => Some(CredentialKind::NonDiscoverable),
            _ => None,
        }
    }

    pub fn discoverable(self) -> bool {
        self != CredentialKind::NonDiscoverable
    }
}

impl fmt::Display for CredentialKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct RelyingPartyTemplate {
    pub name: String,
    pub rp_id: String,
    pub kind: CredentialKind,
}

impl RelyingPartyTemplate {
    pub fn new(name: &str, rp_id: &str, kind: CredentialKind) -> Self {
        RelyingPartyTemplate { name: name.into(), rp_id: rp_id.into(), kind }
    }

    /// Policy the RP asks for at registration. `None` leaves the
    /// authenticator default in place.
    pub fn requested_policy(&self) -> Option<ProtectPolicy> {
        match self.kind {
            CredentialKind::Discoverable => Some(ProtectPolicy::UvRequired),
            CredentialKind::DiscoverableWeak | CredentialKind::NonDiscoverable => None,
        }
    }

    /// Policy the stored credential ends up with on an authenticator that
    /// applies the default when none is requested.
    pub fn protect_policy(&self) -> ProtectPolicy {
        self.requested_policy().unwrap_or(ProtectPolicy::UvOptional)
    }

    /// Whether the RP asks for user verification when signing in.
    pub fn requires_uv(&self) -> bool {
        self.kind == CredentialKind::Discoverable
    }
}

const BUILTIN: [(&str, &str, CredentialKind); 10] = [
    ("adobe-like", "adobe.com", CredentialKind::Discoverable),
    ("apple-like", "apple.com", CredentialKind::DiscoverableWeak),
    ("docusign-like", "account.docusign.com", CredentialKind::NonDiscoverable),
    ("facebook-like", "facebook.com", CredentialKind::NonDiscoverable),
    ("github-like", "github.com", CredentialKind::Discoverable),
    ("hancock-like", "hancock.ink", CredentialKind::Discoverable),
    ("microsoft-like", "login.microsoft.com", CredentialKind::DiscoverableWeak),
    ("nvidia-like", "login.nvgs.nvidia.com", CredentialKind::Discoverable),
    ("synology-like", "account.synology.com", CredentialKind::Discoverable),
    ("vaultvision-like", "auth.vaultvision.com", CredentialKind::Discoverable),
];

pub fn builtin_templates() -> Vec<RelyingPartyTemplate> {
    BUILTIN.iter().map(|&(n, r, k)| RelyingPartyTemplate::new(n, r, k)).collect()
}

pub fn builtin_template(name: &str) -> Option<RelyingPartyTemplate> {
    builtin_templates().into_iter().find(|t| t.name == name)
}

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("duplicate template name {0:?}")]
    Duplicate(String),
    #[error("template {0:?} has an empty rp_id")]
    EmptyRpId(String),
}

#[derive(Deserialize)]
struct TemplateFile {
    #[serde(default)]
    template: Vec<RelyingPartyTemplate>,
}

/// Reads templates from TOML:
///
/// ```toml
/// [[template]]
/// name = "example-like"
/// rp_id = "example.com"
/// kind = "DiscWeak"
/// ```
pub fn load_templates(text: &str) -> Result<Vec<RelyingPartyTemplate>, TemplateError> {
    let file: TemplateFile = toml::from_str(text)?;
    let mut seen = std::collections::BTreeSet::new();
    for t in &file.template {
        if t.rp_id.is_empty() {
            return Err(TemplateError::EmptyRpId(t.name.clone()));
        }
        if !seen.insert(t.name.clone()) {
            return Err(TemplateError::Duplicate(t.name.clone()));
        }
    }
    Ok(file.template)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_kinds() {
        let t = builtin_templates();
        assert_eq!(t.len(), 10);
        let weak: Vec<_> = t.iter().filter(|t| t.kind == CredentialKind::DiscoverableWeak).map(|t| t.rp_id.as_str()).collect();
        assert_eq!(weak, ["apple.com", "login.microsoft.com"]);
        let nondisc = t.iter().filter(|t| !t.kind.discoverable()).count();
        assert_eq!(nondisc, 2);
        assert!(t.iter().filter(|t| t.kind == CredentialKind::DiscoverableWeak).all(|t| t.protect_policy() == ProtectPolicy::UvOptional));
        assert_eq!(builtin_template("github-like").unwrap().protect_policy(), ProtectPolicy::UvRequired);
    }

    #[test]
    fn load_from_toml() {
        let text = "[[template]]\nname = \"x-like\"\nrp_id = \"x.test\"\nkind = \"NonDisc\"\n";
        let t = load_templates(text).unwrap();
        assert_eq!(t, [RelyingPartyTemplate::new("x-like", "x.test", CredentialKind::NonDiscoverable)]);
        assert!(load_templates("[[template]]\nname = \"a\"\nrp_id = \"a\"\nkind = \"Weird\"\n").is_err());
        let dup = format!("{text}{text}");
        assert!(matches!(load_templates(&dup), Err(TemplateError::Duplicate(_))));
    }
}
