//! Client-impersonation (CI) and API-confusion (AC) attacks, run against a
//! freshly provisioned [`Testbed`] and scored in an [`AttackReport`].
//!
//! CI attacks talk to the device as a rogue client of their own. AC attacks
//! sit between the honest client and the device as a [`MitmHook`] and swap
//! the request the victim meant to send for one of the attacker's choosing.
//!
//! [`MitmHook`]: crate::transports::MitmHook

mod ac;
mod ci;
mod fingerprint;
mod matrix;
mod mitm;
mod wire;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

pub use ac::{run_ac, run_ac1, run_ac2, run_ac3, run_ac4, run_ac5, run_ac6, run_ac7, ConfusionRun, VictimFlow};
pub use ci::{identify_profile, run_ci1, run_ci2, run_ci2_profiled, run_ci3, run_ci4, run_cve_rp_leak};
pub use fingerprint::{match_fingerprints, Fingerprint, Sighting};
pub use matrix::{
    classify, enumerate_confusions, provided_by, required_by, AuthSet, ConfusionMatrix, ConfusionPair, Constraint,
    MatrixConfig, CELL_COUNT, COLUMN_ORDER, ROW_ORDER,
};
pub use mitm::{ConfusionHook, Payload, PayloadResult};
pub use wire::{AttackerWire, Wire};

use crate::actors::{
    builtin_templates, ClientSession, CredentialKind, FlowError, RelyingParty, RelyingPartyTemplate, UserModel,
    HONEST_CLIENT_ID,
};
use crate::authenticator::{Authenticator, AuthenticatorConfig, Countermeasure, Transport};
use crate::codec::Command;
use crate::transports::{Pipeline, VirtualDevice};

/// Client id of the rogue app used for impersonation.
pub const ATTACKER_APP_ID: &str = "attacker-app";
/// Client id the man-in-the-middle presents to the device.
pub const MITM_RELAY_ID: &str = "mitm-relay";
pub const VICTIM_PIN: &str = "246810";
pub const VICTIM_ACCOUNT: &str = "alice";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttackId {
    CI1,
    CI2,
    CI3,
    CI4,
    AC1,
    AC2,
    AC3,
    AC4,
    AC5,
    AC6,
    AC7,
}

impl AttackId {
    pub const ALL: [AttackId; 11] = [
        AttackId::CI1,
        AttackId::CI2,
        AttackId::CI3,
        AttackId::CI4,
        AttackId::AC1,
        AttackId::AC2,
        AttackId::AC3,
        AttackId::AC4,
        AttackId::AC5,
        AttackId::AC6,
        AttackId::AC7,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackId::CI1 => "CI1",
            AttackId::CI2 => "CI2",
            AttackId::CI3 => "CI3",
            AttackId::CI4 => "CI4",
            AttackId::AC1 => "AC1",
            AttackId::AC2 => "AC2",
            AttackId::AC3 => "AC3",
            AttackId::AC4 => "AC4",
            AttackId::AC5 => "AC5",
            AttackId::AC6 => "AC6",
            AttackId::AC7 => "AC7",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name().eq_ignore_ascii_case(s))
    }

    pub fn context(self) -> Context {
        match self {
            AttackId::CI1 | AttackId::CI2 | AttackId::CI3 | AttackId::CI4 => Context::Impersonation,
            _ => Context::Mitm,
        }
    }

    pub fn goal(self) -> &'static str {
        match self {
            AttackId::CI1 | AttackId::AC2 => "factory reset",
            AttackId::CI2 | AttackId::AC3 => "track user",
            AttackId::CI3 | AttackId::AC5 => "lockout",
            AttackId::CI4 | AttackId::AC7 => "profile authenticator",
            AttackId::AC1 => "delete credentials",
            AttackId::AC4 => "fill credential storage",
            AttackId::AC6 => "denial of service",
        }
    }

    /// Needs at least one discoverable credential on the device to mean anything.
    pub fn needs_discoverable(self) -> bool {
        matches!(self, AttackId::AC1 | AttackId::AC3 | AttackId::AC4 | AttackId::CI2)
    }
}

impl fmt::Display for AttackId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Context {
    /// A rogue client of the attacker's own.
    Impersonation,
    /// A relay between the honest client and the device.
    Mitm,
}

impl Context {
    pub fn name(self) -> &'static str {
        match self {
            Context::Impersonation => "impersonation",
            Context::Mitm => "mitm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Leak {
    Fingerprint(Fingerprint),
    RpList(Vec<String>),
    Info(BTreeMap<String, String>),
}

impl fmt::Display for Leak {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Leak::Fingerprint(fp) => write!(f, "fingerprint:{fp}"),
            Leak::RpList(rps) => write!(f, "rps:{}", rps.join(",")),
            Leak::Info(info) => {
                let profile = info.get("profile").map(String::as_str).unwrap_or("?");
                write!(f, "info:{}fields:{profile}", info.len())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttackReport {
    /// `CI1`..`AC7`, `CVE-2024-35311`, or `AC(A->B)` for a bare confusion.
    pub label: String,
    pub attack: Option<AttackId>,
    pub profile: String,
    pub transport: Transport,
    pub template: Option<String>,
    pub countermeasures: BTreeSet<Countermeasure>,
    pub context: Context,
    pub pair: Option<(Command, Command)>,
    pub applicable: bool,
    pub success: bool,
    /// Nothing landed in the victim's alarm log while the attack ran.
    pub stealthy: bool,
    pub uv_consumed: bool,
    pub up_grants_consumed: u32,
    pub leaked: Option<Leak>,
    pub blocked_by: Option<Countermeasure>,
    pub outcome: String,
    pub detail: Vec<(&'static str, String)>,
}

impl AttackReport {
    pub fn new(label: impl Into<String>, attack: Option<AttackId>, tb: &TestbedConfig, context: Context) -> Self {
        AttackReport {
            label: label.into(),
            attack,
            profile: tb.profile.clone(),
            transport: tb.transport,
            template: tb.template_label(),
            countermeasures: tb.countermeasures.clone(),
            context,
            pair: None,
            applicable: true,
            success: false,
            stealthy: true,
            uv_consumed: false,
            up_grants_consumed: 0,
            leaked: None,
            blocked_by: None,
            outcome: String::new(),
            detail: Vec::new(),
        }
    }

    pub fn not_applicable(mut self, why: &str) -> Self {
        self.applicable = false;
        self.outcome = why.to_owned();
        self
    }

    pub fn with_detail(mut self, key: &'static str, value: impl ToString) -> Self {
        self.detail.push((key, value.to_string()));
        self
    }

    pub fn detail(&self, key: &str) -> Option<&str> {
        self.detail.iter().find(|(k, _)| *k == key).map(|(_, v)| v.as_str())
    }

    /// One `key=value` record with a fixed field order.
    pub fn to_line(&self) -> String {
        let dash = || "-".to_string();
        let cms = if self.countermeasures.is_empty() {
            dash()
        } else {
            self.countermeasures.iter().map(|c| c.id()).collect::<Vec<_>>().join(",")
        };
        let pair = self.pair.map(|(a, b)| format!("{}->{}", a.short_name(), b.short_name())).unwrap_or_else(dash);
        let mut line = format!(
            "attack={} profile={} transport={} template={} countermeasures={} context={} pair={} applicable={} success={} stealthy={} uv_consumed={} up_grants={} blocked_by={} outcome={} leaked={}",
            self.label,
            self.profile,
            self.transport,
            self.template.clone().unwrap_or_else(dash),
            cms,
            self.context.name(),
            pair,
            self.applicable,
            self.success,
            self.stealthy,
            self.uv_consumed,
            self.up_grants_consumed,
            self.blocked_by.map(|c| c.id().to_string()).unwrap_or_else(dash),
            if self.outcome.is_empty() { dash() } else { self.outcome.clone() },
            self.leaked.as_ref().map(|l| l.to_string()).unwrap_or_else(dash),
        );
        for (k, v) in &self.detail {
            line.push_str(&format!(" {k}={v}"));
        }
        line
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TestbedError {
    #[error("unknown authenticator profile {0:?}")]
    UnknownProfile(String),
    #[error("profile {profile} has no {transport} interface")]
    TransportUnsupported { profile: String, transport: Transport },
    #[error("provisioning failed: {0}")]
    Setup(FlowError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestbedConfig {
    pub profile: String,
    pub transport: Transport,
    pub countermeasures: BTreeSet<Countermeasure>,
    pub cve_2024_35311: bool,
    pub templates: Vec<RelyingPartyTemplate>,
    pub seed: u64,
    /// Logical time between power-on and the first attacker request.
    pub plug_delay_ms: u64,
}

impl TestbedConfig {
    pub fn new(profile: &str, transport: Transport) -> Self {
        TestbedConfig {
            profile: profile.to_owned(),
            transport,
            countermeasures: BTreeSet::new(),
            cve_2024_35311: false,
            templates: builtin_templates(),
            seed: 1,
            plug_delay_ms: 0,
        }
    }

    pub fn with_countermeasures(mut self, cms: impl IntoIterator<Item = Countermeasure>) -> Self {
        self.countermeasures.extend(cms);
        self
    }

    pub fn with_templates(mut self, templates: Vec<RelyingPartyTemplate>) -> Self {
        self.templates = templates;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_cve(mut self, on: bool) -> Self {
        self.cve_2024_35311 = on;
        self
    }

    pub fn with_plug_delay(mut self, ms: u64) -> Self {
        self.plug_delay_ms = ms;
        self
    }

    /// Template name when the bed is provisioned with exactly one.
    fn template_label(&self) -> Option<String> {
        match self.templates.as_slice() {
            [one] => Some(one.name.clone()),
            _ => None,
        }
    }

    fn authenticator_config(&self) -> Result<AuthenticatorConfig, TestbedError> {
        let mut cfg = AuthenticatorConfig::profile(&self.profile)
            .ok_or_else(|| TestbedError::UnknownProfile(self.profile.clone()))?
            .with_countermeasures(self.countermeasures.iter().copied())
            .with_trusted_client(HONEST_CLIENT_ID);
        if !cfg.supports_transport(self.transport) {
            return Err(TestbedError::TransportUnsupported { profile: self.profile.clone(), transport: self.transport });
        }
        cfg.cve_2024_35311 = self.cve_2024_35311;
        Ok(cfg)
    }
}

/// A provisioned authenticator with its owner and the accounts they hold.
#[derive(Debug, Clone)]
pub struct Testbed {
    pub config: TestbedConfig,
    pub dev: VirtualDevice,
    pub victim: UserModel,
    /// The victim's own client, connected without a relay.
    pub client: ClientSession,
    pub rps: Vec<RelyingParty>,
}

/// Counters captured before an attack so the report can show what it cost.
#[derive(Debug, Clone, Copy)]
pub struct Window {
    alarms: usize,
    up_grants: u32,
}

impl Testbed {
    /// Sets a PIN and registers the victim's account on every template.
    pub fn new(config: TestbedConfig) -> Result<Self, TestbedError> {
        let auth_cfg = config.authenticator_config()?;
        let dev = VirtualDevice::new(Authenticator::new(auth_cfg, config.seed));
        let client = ClientSession::new(Pipeline::direct(config.transport, HONEST_CLIENT_ID), config.seed ^ 0x5eed);
        let rps = config
            .templates
            .iter()
            .enumerate()
            .map(|(i, t)| RelyingParty::new(t.clone(), config.seed.wrapping_add(i as u64 + 1)))
            .collect();
        let mut tb = Testbed { config, dev, victim: UserModel::new(VICTIM_PIN), client, rps };
        tb.client.setup_pin(&mut tb.dev, &mut tb.victim, None).map_err(TestbedError::Setup)?;
        for i in 0..tb.rps.len() {
            let rp = &mut tb.rps[i];
            tb.client.register(&mut tb.dev, &mut tb.victim, None, rp, VICTIM_ACCOUNT).map_err(TestbedError::Setup)?;
        }
        Ok(tb)
    }

    pub fn transport(&self) -> Transport {
        self.config.transport
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn has(&self, cm: Countermeasure) -> bool {
        self.config.countermeasures.contains(&cm)
    }

    /// Device loses power; the honest client has to reconnect.
    pub fn power_cycle(&mut self) {
        self.dev.power_cycle();
        self.client.pipeline_mut().link_mut().reset();
        self.client.forget_token();
    }

    /// The victim plugs the key in (or taps it) and the scenario's delay passes.
    pub fn plug_in(&mut self) {
        self.power_cycle();
        self.dev.advance(self.config.plug_delay_ms);
    }

    pub fn window(&self) -> Window {
        Window { alarms: self.victim.alarms().len(), up_grants: self.victim.up_grants() }
    }

    /// Fills the stealth and touch fields of `report` from what happened since `w`.
    pub fn close(&self, w: Window, report: &mut AttackReport) {
        report.stealthy = self.victim.alarms().len() == w.alarms;
        report.up_grants_consumed = self.victim.up_grants() - w.up_grants;
    }

    pub fn discoverable_count(&self) -> usize {
        self.dev.authenticator().state().discoverable_count()
    }

    pub fn any_discoverable_template(&self) -> bool {
        self.config.templates.iter().any(|t| t.kind.discoverable())
    }

    /// RP ids an attacker would probe: every template the victim uses.
    pub fn target_rp_ids(&self) -> Vec<String> {
        self.config.templates.iter().map(|t| t.rp_id.clone()).collect()
    }

    /// First account whose sign-in asks for the PIN, else the first account.
    pub fn uv_rp_index(&self) -> usize {
        self.rps.iter().position(|r| r.template.requires_uv()).unwrap_or(0)
    }

    /// First account whose sign-in needs no PIN, else the first account.
    pub fn plain_rp_index(&self) -> usize {
        self.rps.iter().position(|r| !r.template.requires_uv()).unwrap_or(0)
    }

    /// The victim signs in to account `idx` through their own client.
    pub fn victim_sign_in(&mut self, idx: usize) -> Result<(), FlowError> {
        let rp = &mut self.rps[idx];
        self.client.authenticate(&mut self.dev, &mut self.victim, None, rp, VICTIM_ACCOUNT).map(|_| ())
    }

    pub fn supports_selection(&self) -> bool {
        self.dev.authenticator().config().supports_selection
    }
}

/// A template for sign-ups the victim has not done yet.
pub fn signup_template() -> RelyingPartyTemplate {
    RelyingPartyTemplate::new("signup-like", "signup.example", CredentialKind::Discoverable)
}

/// Runs one catalogued attack on a copy of `base`.
pub fn run_attack(id: AttackId, base: &Testbed) -> AttackReport {
    run_attack_on(id, &mut base.clone())
}

/// Runs one catalogued attack on `tb` itself, leaving its state and trace behind.
pub fn run_attack_on(id: AttackId, tb: &mut Testbed) -> AttackReport {
    if id.needs_discoverable() && !tb.any_discoverable_template() {
        return AttackReport::new(id.name(), Some(id), &tb.config, id.context()).not_applicable("NoDiscoverable");
    }
    match id {
        AttackId::CI1 => run_ci1(tb),
        AttackId::CI2 => run_ci2(tb),
        AttackId::CI3 => run_ci3(tb),
        AttackId::CI4 => run_ci4(tb),
        AttackId::AC1 => run_ac1(tb),
        AttackId::AC2 => run_ac2(tb),
        AttackId::AC3 => run_ac3(tb),
        AttackId::AC4 => run_ac4(tb, None),
        AttackId::AC5 => run_ac5(tb),
        AttackId::AC6 => run_ac6(tb),
        AttackId::AC7 => run_ac7(tb),
    }
}

#[cfg(test)]
mod tests;
