//! Scenario files: which testbeds to build, which attacks to run on them.
//!
//! ```toml
//! name = "demo"
//! seed = 7
//!
//! [[run]]
//! profiles = ["solo2-like"]
//! transports = ["usb", "nfc"]
//! countermeasures = ["C6"]
//! attacks = ["CI1", "AC2", "GA->CM", "CVE-2024-35311"]
//! clock = ["advance 11000ms"]
//! ```
//!
//! Every run expands to one testbed per (profile, transport) and, with
//! `each_template = true`, per template. Each attack gets a fresh copy of
//! the provisioned testbed. Clock events run between plugging the key in
//! and the attacker's first request.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Deserialize;
use thiserror::Error;

use crate::actors::{builtin_template, builtin_templates, RelyingPartyTemplate};
use crate::attacks::{
    run_ac, run_attack_on, run_cve_rp_leak, AttackId, AttackReport, Context, Testbed, TestbedConfig, TestbedError,
};
use crate::authenticator::{AuthenticatorConfig, Countermeasure, Transport};
use crate::codec::Command;
use crate::transports::TransportFrame;

pub const DEFAULT_SEED: u64 = 1;
pub const CVE_LABEL: &str = "CVE-2024-35311";

const BUNDLED: [(&str, &str); 3] = [
    ("table3-baseline", include_str!("../scenarios/table3-baseline.toml")),
    ("countermeasures-full", include_str!("../scenarios/countermeasures-full.toml")),
    ("table5", include_str!("../scenarios/table5.toml")),
];

pub fn bundled_names() -> impl Iterator<Item = &'static str> {
    BUNDLED.iter().map(|(n, _)| *n)
}

pub fn bundled(name: &str) -> Option<Scenario> {
    let (_, text) = BUNDLED.iter().find(|(n, _)| *n == name)?;
    Some(Scenario::parse(text).expect("bundled scenarios parse"))
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario syntax: {0}")]
    Syntax(#[from] toml::de::Error),
    #[error("unknown profile {0:?}")]
    Profile(String),
    #[error("unknown transport {0:?}")]
    Transport(String),
    #[error("unknown countermeasure {0:?}")]
    Countermeasure(String),
    #[error("unknown template {0:?}")]
    Template(String),
    #[error("unknown attack {0:?}")]
    Attack(String),
    #[error("bad clock event {0:?}")]
    Clock(String),
    #[error("run {0} has no {1}")]
    Empty(usize, &'static str),
    #[error("testbed setup failed: {0}")]
    Runtime(TestbedError),
}

impl ScenarioError {
    /// 1 for anything wrong with the file, 2 when the protocol itself failed.
    pub fn exit_code(&self) -> i32 {
        match self {
            ScenarioError::Runtime(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackSpec {
    Catalogued(AttackId),
    /// A bare confusion of API A into API B.
    Confusion(Command, Command),
    CveRpLeak,
}

impl AttackSpec {
    pub fn parse(s: &str) -> Option<Self> {
        if s.eq_ignore_ascii_case(CVE_LABEL) {
            return Some(AttackSpec::CveRpLeak);
        }
        if let Some((a, b)) = s.split_once("->") {
            return Some(AttackSpec::Confusion(Command::from_short_name(a.trim())?, Command::from_short_name(b.trim())?));
        }
        AttackId::parse(s).map(AttackSpec::Catalogued)
    }

    fn label(self) -> String {
        match self {
            AttackSpec::Catalogued(id) => id.name().to_owned(),
            AttackSpec::Confusion(a, b) => format!("AC({}->{})", a.short_name(), b.short_name()),
            AttackSpec::CveRpLeak => CVE_LABEL.to_owned(),
        }
    }

    fn context(self) -> Context {
        match self {
            AttackSpec::Catalogued(id) => id.context(),
            AttackSpec::Confusion(..) => Context::Mitm,
            AttackSpec::CveRpLeak => Context::Impersonation,
        }
    }

    fn id(self) -> Option<AttackId> {
        match self {
            AttackSpec::Catalogued(id) => Some(id),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClockEvent {
    Advance(u64),
}

impl ClockEvent {
    /// `advance <n>ms` or `advance <n>s`.
    pub fn parse(s: &str) -> Option<Self> {
        let rest = s.trim().strip_prefix("advance")?.trim();
        let (digits, scale) = match rest.strip_suffix("ms") {
            Some(d) => (d, 1),
            None => (rest.strip_suffix('s')?, 1000),
        };
        digits.trim().parse::<u64>().ok().map(|n| ClockEvent::Advance(n * scale))
    }
}

/// One testbed and the attacks to run against copies of it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunSpec {
    pub profile: String,
    pub transport: Transport,
    pub countermeasures: BTreeSet<Countermeasure>,
    pub cve: bool,
    pub templates: Vec<RelyingPartyTemplate>,
    pub attacks: Vec<AttackSpec>,
    pub clock: Vec<ClockEvent>,
}

impl RunSpec {
    fn plug_delay(&self) -> u64 {
        self.clock.iter().map(|ClockEvent::Advance(ms)| ms).sum()
    }

    pub fn testbed_config(&self, seed: u64) -> TestbedConfig {
        TestbedConfig::new(&self.profile, self.transport)
            .with_countermeasures(self.countermeasures.iter().copied())
            .with_templates(self.templates.clone())
            .with_seed(seed)
            .with_cve(self.cve)
            .with_plug_delay(self.plug_delay())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub runs: Vec<RunSpec>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: String,
    seed: Option<u64>,
    #[serde(rename = "run", default)]
    runs: Vec<RunFile>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum TemplateRef {
    Builtin(String),
    Inline(RelyingPartyTemplate),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RunFile {
    profiles: Vec<String>,
    transports: Vec<String>,
    #[serde(default)]
    countermeasures: Vec<String>,
    #[serde(default)]
    cve: bool,
    templates: Option<Vec<TemplateRef>>,
    #[serde(default)]
    each_template: bool,
    attacks: Vec<String>,
    #[serde(default)]
    clock: Vec<String>,
}

fn parse_all<T>(items: &[String], parse: impl Fn(&str) -> Option<T>, err: fn(String) -> ScenarioError) -> Result<Vec<T>, ScenarioError> {
    items.iter().map(|s| parse(s).ok_or_else(|| err(s.clone()))).collect()
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let file: ScenarioFile = toml::from_str(text)?;
        let mut runs = Vec::new();
        for (i, r) in file.runs.iter().enumerate() {
            if r.profiles.is_empty() {
                return Err(ScenarioError::Empty(i, "profiles"));
            }
            if r.transports.is_empty() {
                return Err(ScenarioError::Empty(i, "transports"));
            }
            for p in &r.profiles {
                if AuthenticatorConfig::profile(p).is_none() {
                    return Err(ScenarioError::Profile(p.clone()));
                }
            }
            let transports = parse_all(&r.transports, Transport::parse, ScenarioError::Transport)?;
            let countermeasures: BTreeSet<_> =
                parse_all(&r.countermeasures, Countermeasure::parse, ScenarioError::Countermeasure)?.into_iter().collect();
            let attacks = parse_all(&r.attacks, AttackSpec::parse, ScenarioError::Attack)?;
            let clock = parse_all(&r.clock, ClockEvent::parse, ScenarioError::Clock)?;
            let templates = match &r.templates {
                None => builtin_templates(),
                Some(list) => list
                    .iter()
                    .map(|t| match t {
                        TemplateRef::Builtin(n) => builtin_template(n).ok_or_else(|| ScenarioError::Template(n.clone())),
                        TemplateRef::Inline(t) => Ok(t.clone()),
                    })
                    .collect::<Result<_, _>>()?,
            };
            let template_sets: Vec<Vec<RelyingPartyTemplate>> =
                if r.each_template { templates.iter().map(|t| vec![t.clone()]).collect() } else { vec![templates] };
            for p in &r.profiles {
                for &t in &transports {
                    for set in &template_sets {
                        runs.push(RunSpec {
                            profile: p.clone(),
                            transport: t,
                            countermeasures: countermeasures.clone(),
                            cve: r.cve,
                            templates: set.clone(),
                            attacks: attacks.clone(),
                            clock: clock.clone(),
                        });
                    }
                }
            }
        }
        Ok(Scenario { name: file.name, seed: file.seed.unwrap_or(DEFAULT_SEED), runs })
    }
}

#[derive(Debug, Clone, Default)]
pub struct ScenarioOutput {
    pub reports: Vec<AttackReport>,
    /// Device-side frames of every attack, one attack after another.
    pub trace: Vec<TransportFrame>,
}

impl ScenarioOutput {
    /// One record per line, in run order.
    pub fn report_text(&self) -> String {
        self.reports.iter().map(|r| r.to_line() + "\n").collect()
    }
}

/// Runs every attack of every run. `seed` overrides the file's seed.
pub fn run_scenario(s: &Scenario, seed: Option<u64>) -> Result<ScenarioOutput, ScenarioError> {
    let seed = seed.unwrap_or(s.seed);
    let mut out = ScenarioOutput::default();
    for run in &s.runs {
        let cfg = run.testbed_config(seed);
        let mut base = match Testbed::new(cfg.clone()) {
            Ok(tb) => tb,
            Err(TestbedError::TransportUnsupported { .. }) => {
                for a in &run.attacks {
                    let rep = AttackReport::new(a.label(), a.id(), &cfg, a.context());
                    out.reports.push(rep.not_applicable("TransportUnsupported"));
                }
                continue;
            }
            Err(e) => return Err(ScenarioError::Runtime(e)),
        };
        base.dev.take_trace();
        for &a in &run.attacks {
            let mut tb = base.clone();
            let rep = match a {
                AttackSpec::Catalogued(id) => run_attack_on(id, &mut tb),
                AttackSpec::Confusion(x, y) => run_ac(&mut tb, x, y),
                AttackSpec::CveRpLeak => run_cve_rp_leak(&mut tb),
            };
            out.trace.extend(tb.dev.take_trace());
            out.reports.push(rep);
        }
    }
    Ok(out)
}

fn cell(reports: &[&AttackReport]) -> &'static str {
    let applicable: Vec<_> = reports.iter().filter(|r| r.applicable).collect();
    if applicable.is_empty() {
        "n/a"
    } else if applicable.iter().all(|r| r.success) {
        "✓"
    } else {
        "✗"
    }
}

/// Attacks by profile, folded over transports.
pub fn attack_table(reports: &[AttackReport]) -> String {
    let mut profiles: Vec<&str> = Vec::new();
    for r in reports {
        if !profiles.contains(&r.profile.as_str()) {
            profiles.push(&r.profile);
        }
    }
    let mut out = format!("{:<7}", "attack");
    for p in &profiles {
        let _ = write!(out, " {p:>14}");
    }
    out.push('\n');
    for id in AttackId::ALL {
        let mut line = format!("{:<7}", id.name());
        let mut any = false;
        for p in &profiles {
            let hits: Vec<&AttackReport> =
                reports.iter().filter(|r| r.attack == Some(id) && r.profile == *p).collect();
            any |= !hits.is_empty();
            let _ = write!(line, " {:>14}", if hits.is_empty() { "-" } else { cell(&hits) });
        }
        if any {
            out.push_str(&line);
            out.push('\n');
        }
    }
    out
}

const EFFECTS: [(&str, &[AttackId]); 3] = [
    ("delete", &[AttackId::AC1, AttackId::CI1, AttackId::AC2]),
    ("track", &[AttackId::CI2, AttackId::AC3]),
    ("dos", &[AttackId::AC4, AttackId::CI3, AttackId::AC5, AttackId::AC6]),
];

/// Per template: which attacks apply to each effect, and which tracking
/// attacks worked without spending UV.
pub fn template_table(reports: &[AttackReport]) -> String {
    let mut by_template: BTreeMap<&str, Vec<&AttackReport>> = BTreeMap::new();
    let mut order = Vec::new();
    for r in reports {
        if let Some(t) = r.template.as_deref() {
            if !by_template.contains_key(t) {
                order.push(t);
            }
            by_template.entry(t).or_default().push(r);
        }
    }
    let mut out = String::new();
    for t in order {
        let rs = &by_template[t];
        let _ = write!(out, "{t:<18}");
        for (effect, ids) in EFFECTS {
            let names: Vec<&str> = ids
                .iter()
                .filter(|id| rs.iter().any(|r| r.attack == Some(**id) && r.applicable))
                .map(|id| id.name())
                .collect();
            let _ = write!(out, " {effect}={}", if names.is_empty() { "n/a".into() } else { names.join(",") });
        }
        let zero_uv: Vec<&str> = rs
            .iter()
            .filter(|r| matches!(r.attack, Some(AttackId::CI2 | AttackId::AC3)) && r.success && !r.uv_consumed)
            .filter_map(|r| r.attack.map(AttackId::name))
            .collect();
        let _ = writeln!(out, " zero_uv_track={}", if zero_uv.is_empty() { "-".into() } else { zero_uv.join(",") });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_scenarios_parse() {
        for n in bundled_names() {
            let s = bundled(n).unwrap();
            assert_eq!(s.name, n);
            assert!(!s.runs.is_empty());
        }
    }

    #[test]
    fn attack_spec_forms() {
        assert_eq!(AttackSpec::parse("ac1"), Some(AttackSpec::Catalogued(AttackId::AC1)));
        assert_eq!(AttackSpec::parse("GA->CM"), Some(AttackSpec::Confusion(Command::GetAssertion, Command::CredentialManagement)));
        assert_eq!(AttackSpec::parse("cve-2024-35311"), Some(AttackSpec::CveRpLeak));
        assert_eq!(AttackSpec::parse("XX->CM"), None);
        assert_eq!(AttackSpec::parse("CI9"), None);
    }

    #[test]
    fn clock_events() {
        assert_eq!(ClockEvent::parse("advance 11000ms"), Some(ClockEvent::Advance(11_000)));
        assert_eq!(ClockEvent::parse("advance 2s"), Some(ClockEvent::Advance(2_000)));
        assert_eq!(ClockEvent::parse("wait 2s"), None);
        assert_eq!(ClockEvent::parse("advance ms"), None);
    }

    #[test]
    fn expansion_is_cartesian() {
        let s = Scenario::parse(
            r#"
            name = "x"
            [[run]]
            profiles = ["solo2-like", "yubikey5-like"]
            transports = ["usb", "nfc"]
            templates = ["github-like", "apple-like", "facebook-like"]
            each_template = true
            attacks = ["CI4"]
            "#,
        )
        .unwrap();
        assert_eq!(s.runs.len(), 12);
        assert_eq!(s.seed, DEFAULT_SEED);
    }

    #[test]
    fn inline_template() {
        let s = Scenario::parse(
            r#"
            name = "x"
            [[run]]
            profiles = ["solo2-like"]
            transports = ["usb"]
            templates = [{ name = "corp", rp_id = "corp.example", kind = "Disc" }, "apple-like"]
            attacks = ["CI2"]
            "#,
        )
        .unwrap();
        assert_eq!(s.runs[0].templates[0].rp_id, "corp.example");
    }

    #[test]
    fn parse_errors_exit_one() {
        for bad in [
            "name = 1",
            "name = \"x\"\n[[run]]\nprofiles=[\"nope\"]\ntransports=[\"usb\"]\nattacks=[]",
            "name = \"x\"\n[[run]]\nprofiles=[\"solo2-like\"]\ntransports=[\"ble\"]\nattacks=[]",
            "name = \"x\"\n[[run]]\nprofiles=[\"solo2-like\"]\ntransports=[\"usb\"]\nattacks=[\"CI7\"]",
            "name = \"x\"\n[[run]]\nprofiles=[\"solo2-like\"]\ntransports=[\"usb\"]\nattacks=[]\nclock=[\"later\"]",
            "name = \"x\"\nbogus = true",
        ] {
            let e = Scenario::parse(bad).unwrap_err();
            assert_eq!(e.exit_code(), 1, "{bad}");
        }
    }

    #[test]
    fn clock_script_closes_the_reset_window() {
        let s = Scenario::parse(
            r#"
            name = "late"
            [[run]]
            profiles = ["solo2-like"]
            transports = ["usb"]
            attacks = ["CI1"]
            clock = ["advance 11000ms"]
            "#,
        )
        .unwrap();
        let out = run_scenario(&s, None).unwrap();
        assert!(!out.reports[0].success);
    }

    #[test]
    fn missing_transport_reports_not_applicable() {
        let s = Scenario::parse(
            r#"
            name = "x"
            [[run]]
            profiles = ["opensk-like"]
            transports = ["nfc"]
            attacks = ["CI1", "AC6"]
            "#,
        )
        .unwrap();
        let out = run_scenario(&s, None).unwrap();
        assert_eq!(out.reports.len(), 2);
        assert!(out.reports.iter().all(|r| !r.applicable && r.outcome == "TransportUnsupported"));
    }
}
