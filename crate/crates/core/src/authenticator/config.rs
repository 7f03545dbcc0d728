use std::collections::BTreeSet;
use std::fmt;

/// Physical link between a client and the authenticator. `Direct` is an
/// in-process call with no transport semantics (tests, tooling).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Transport {
    Usb,
    Nfc,
    Direct,
}

impl Transport {
    pub fn as_str(self) -> &'static str {
        match self {
            Transport::Usb => "usb",
            Transport::Nfc => "nfc",
            Transport::Direct => "direct",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "usb" => Some(Transport::Usb),
            "nfc" => Some(Transport::Nfc),
            "direct" => Some(Transport::Direct),
            _ => None,
        }
    }
}

impl fmt::Display for Transport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Optional hardening switches. Each one closes the vulnerability with the
/// same index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Countermeasure {
    /// Only clients on the trusted list may talk to the authenticator.
    C1,
    /// LED feedback per API call: one blink non-destructive, two destructive.
    C2,
    /// UP over NFC needs a button press.
    C3,
    /// Destructive APIs need a token from a dedicated second PIN.
    C4,
    /// Credential and user ids rotate every `rotation_period` assertions.
    C5,
    /// Reset needs UV.
    C6,
    /// Each DeleteCredential call needs its own UP.
    C7,
    /// Selection is rate limited to three calls per two minutes.
    C8,
}

impl Countermeasure {
    pub const ALL: [Countermeasure; 8] = [
        Countermeasure::C1,
        Countermeasure::C2,
        Countermeasure::C3,
        Countermeasure::C4,
        Countermeasure::C5,
        Countermeasure::C6,
        Countermeasure::C7,
        Countermeasure::C8,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Countermeasure::C1 => "C1",
            Countermeasure::C2 => "C2",
            Countermeasure::C3 => "C3",
            Countermeasure::C4 => "C4",
            Countermeasure::C5 => "C5",
            Countermeasure::C6 => "C6",
            Countermeasure::C7 => "C7",
            Countermeasure::C8 => "C8",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.id().eq_ignore_ascii_case(s))
    }

    pub fn description(self) -> &'static str {
        match self {
            Countermeasure::C1 => "trusted client list",
            Countermeasure::C2 => "per-call LED feedback",
            Countermeasure::C3 => "button press for UP over NFC",
            Countermeasure::C4 => "dedicated PIN for destructive APIs",
            Countermeasure::C5 => "identifier rotation",
            Countermeasure::C6 => "UV required for Reset",
            Countermeasure::C7 => "one UP per credential deletion",
            Countermeasure::C8 => "Selection rate limit",
        }
    }
}

impl fmt::Display for Countermeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

pub const DEFAULT_ROTATION_PERIOD: u32 = 10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthenticatorConfig {
    pub profile: String,
    pub max_discoverable: usize,
    pub supports_selection: bool,
    pub transports: BTreeSet<Transport>,
    pub countermeasures: BTreeSet<Countermeasure>,
    pub cve_2024_35311: bool,
    pub trusted_clients: BTreeSet<String>,
    pub rotation_period: u32,
    pub aaguid: [u8; 16],
    pub firmware_version: u64,
}

/// Built-in capability profiles: (name, discoverable slots, Selection, NFC, firmware).
const PROFILES: [(&str, usize, bool, bool, u64); 3] = [
    ("yubikey5-like", 25, false, true, 0x0005_0207),
    ("solo2-like", 50, true, true, 0x0002_0964),
    ("opensk-like", 150, true, false, 0x0002_0001),
];

impl AuthenticatorConfig {
    pub fn profile_names() -> impl Iterator<Item = &'static str> {
        PROFILES.iter().map(|p| p.0)
    }

    pub fn profile(name: &str) -> Option<Self> {
        let (idx, &(profile, max, selection, nfc, fw)) =
            PROFILES.iter().enumerate().find(|(_, p)| p.0 == name)?;
        let mut transports = BTreeSet::from([Transport::Usb]);
        if nfc {
            transports.insert(Transport::Nfc);
        }
        let mut aaguid = *b"ctaplab-profile0";
        aaguid[15] = b'0' + idx as u8;
        Some(AuthenticatorConfig {
            profile: profile.to_owned(),
            max_discoverable: max,
            supports_selection: selection,
            transports,
            countermeasures: BTreeSet::new(),
            cve_2024_35311: false,
            trusted_clients: BTreeSet::new(),
            rotation_period: DEFAULT_ROTATION_PERIOD,
            aaguid,
            firmware_version: fw,
        })
    }

    pub fn has(&self, cm: Countermeasure) -> bool {
        self.countermeasures.contains(&cm)
    }

    pub fn with_countermeasures(mut self, cms: impl IntoIterator<Item = Countermeasure>) -> Self {
        self.countermeasures.extend(cms);
        self
    }

    pub fn with_trusted_client(mut self, client_id: &str) -> Self {
        self.trusted_clients.insert(client_id.to_owned());
        self
    }

    pub fn supports_transport(&self, t: Transport) -> bool {
        t == Transport::Direct || self.transports.contains(&t)
    }
}

impl Default for AuthenticatorConfig {
    fn default() -> Self {
        Self::profile("solo2-like").expect("built-in profile")
    }
}
