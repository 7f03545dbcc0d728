//! API confusion: the relay swaps the victim's request for its own.

use std::cell::Cell;

use rand_chacha::ChaCha20Rng;

use super::fingerprint::{match_fingerprints, Fingerprint};
use super::mitm::{ConfusionHook, Payload, PayloadResult};
use super::wire::{self, Wire};
use super::{signup_template, AttackId, AttackReport, Context, Leak, Testbed, MITM_RELAY_ID, VICTIM_ACCOUNT, VICTIM_PIN};
use crate::actors::{ClientSession, FlowError, RelyingParty, HONEST_CLIENT_ID};
use crate::authenticator::{Countermeasure, Transport};
use crate::codec::{Command, CtapRequest, CtapResponse, StatusCode};
use crate::transports::{Link, MitmHook, Pipeline, SessionError};

/// Bound on confounded sessions when driving the PIN to a hard lock.
const MAX_LOCKOUT_SESSIONS: usize = 8;
/// Logical length of the denial-of-service window.
const DOS_WINDOW_MS: u64 = 300_000;

/// What the victim is doing when the relay strikes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VictimFlow {
    /// Signing up on a site they have no account with yet.
    Register,
    /// Signing in to account `idx` of the testbed.
    Authenticate(usize),
    ManageCredentials,
    PinCheck,
    Reset,
    Selection,
    GetInfo,
}

impl VictimFlow {
    /// The everyday flow whose traffic contains `api`.
    pub fn for_api(api: Command, tb: &Testbed) -> Self {
        match api {
            Command::MakeCredential => VictimFlow::Register,
            Command::GetAssertion => VictimFlow::Authenticate(tb.uv_rp_index()),
            Command::CredentialManagement => VictimFlow::ManageCredentials,
            Command::ClientPin => VictimFlow::PinCheck,
            Command::Reset => VictimFlow::Reset,
            Command::Selection => VictimFlow::Selection,
            Command::GetInfo => VictimFlow::GetInfo,
        }
    }

    pub fn api(self) -> Command {
        match self {
            VictimFlow::Register => Command::MakeCredential,
            VictimFlow::Authenticate(_) => Command::GetAssertion,
            VictimFlow::ManageCredentials => Command::CredentialManagement,
            VictimFlow::PinCheck => Command::ClientPin,
            VictimFlow::Reset => Command::Reset,
            VictimFlow::Selection => Command::Selection,
            VictimFlow::GetInfo => Command::GetInfo,
        }
    }

    pub fn run(
        self,
        tb: &mut Testbed,
        client: &mut ClientSession,
        hook: &mut (dyn MitmHook + '_),
    ) -> Result<(), FlowError> {
        let (dev, user) = (&mut tb.dev, &mut tb.victim);
        match self {
            VictimFlow::Register => {
                let mut rp = RelyingParty::new(signup_template(), tb.config.seed ^ 0x5167);
                client.register(dev, user, Some(hook), &mut rp, VICTIM_ACCOUNT).map(|_| ())
            }
            VictimFlow::Authenticate(i) => {
                client.authenticate(dev, user, Some(hook), &mut tb.rps[i], VICTIM_ACCOUNT).map(|_| ())
            }
            VictimFlow::ManageCredentials => client.manage_credentials_flow(dev, user, Some(hook)).map(|_| ()),
            VictimFlow::PinCheck => client.pin_check_flow(dev, user, Some(hook)),
            VictimFlow::Reset => client.reset_flow(dev, user, Some(hook)),
            VictimFlow::Selection => client.selection_flow(dev, user, Some(hook)),
            VictimFlow::GetInfo => client.get_info_flow(dev, user, Some(hook)).map(|_| ()),
        }
    }
}

/// One victim flow run through the relay.
#[derive(Debug, Clone)]
pub struct ConfusionRun {
    pub flow: VictimFlow,
    /// The relay saw API A and ran its payload.
    pub fired: bool,
    pub result: Option<PayloadResult>,
    /// What the victim's client ended up with.
    pub flow_result: Result<(), FlowError>,
    pub harvest_denial: Option<(StatusCode, Option<Countermeasure>)>,
}

impl ConfusionRun {
    pub fn succeeded(&self) -> bool {
        self.result.as_ref().is_some_and(|r| r.success)
    }
}

/// Runs `flow` for the victim through a relay armed with `payload`.
pub fn confound(tb: &mut Testbed, flow: VictimFlow, salt: u64, payload: Payload<'_>) -> ConfusionRun {
    let seed = tb.seed() ^ salt;
    let pipeline = Pipeline::relayed(tb.transport(), HONEST_CLIENT_ID, MITM_RELAY_ID);
    let mut client = ClientSession::new(pipeline, seed ^ 0xc11e);
    let mut hook = ConfusionHook::new(flow.api(), seed, payload);
    let flow_result = flow.run(tb, &mut client, &mut hook);
    ConfusionRun {
        flow,
        fired: hook.fired(),
        result: hook.take_result(),
        flow_result,
        harvest_denial: hook.harvest_denial(),
    }
}

/// Copies a run's verdict into `rep`.
fn score(rep: &mut AttackReport, run: &ConfusionRun) {
    match (&run.result, run.harvest_denial) {
        (Some(r), _) => {
            rep.success = r.success;
            rep.outcome = r.outcome.clone();
            rep.blocked_by = r.blocked_by;
            rep.uv_consumed = r.uv_used;
            rep.leaked = r.leak.clone();
            rep.detail.extend(r.detail.iter().cloned());
        }
        (None, Some((status, cm))) => {
            rep.outcome = status.to_string();
            rep.blocked_by = cm;
        }
        (None, None) => {
            rep.outcome = match &run.flow_result {
                Err(e) => e.status().map_or_else(|| "NotReached".to_string(), |s| s.to_string()),
                Ok(()) => "NotReached".into(),
            };
        }
    }
    rep.detail.push(("victim_flow", format!("{:?}", run.flow)));
}

fn status_of(r: Result<impl Sized, wire::Denial>) -> PayloadResult {
    match r {
        Ok(_) => PayloadResult::from_status(true, StatusCode::Ok),
        Err(d) => PayloadResult::denied(d),
    }
}

/// The plain version of API B: one attempt at what the attacker wants from it.
fn generic_payload<'p>(api_b: Command, targets: Vec<String>) -> Payload<'p> {
    Box::new(move |w: &mut dyn Wire, token: Option<&[u8; 32]>, rng: &mut ChaCha20Rng| match api_b {
        Command::CredentialManagement => PayloadResult { uv_used: token.is_some(), ..status_of(wire::creds_metadata(w, token)) },
        Command::Reset => status_of(wire::call(w, &CtapRequest::reset())),
        Command::GetAssertion => harvest_result(wire::harvest_assertions(w, &targets, token, rng)),
        Command::MakeCredential => {
            PayloadResult { uv_used: token.is_some(), ..status_of(wire::inject_credential(w, token, rng)) }
        }
        Command::ClientPin => {
            let d = wire::wrong_guess(w, rng, VICTIM_PIN);
            PayloadResult {
                success: wire::is_guess_counted(d.status),
                blocked_by: d.blocked_by,
                ..PayloadResult::from_status(false, d.status)
            }
        }
        Command::Selection => {
            let s = w.send(&CtapRequest::selection()).status();
            PayloadResult {
                success: matches!(s, StatusCode::Ok | StatusCode::UserActionTimeout),
                blocked_by: w.last_block().filter(|_| s != StatusCode::Ok),
                ..PayloadResult::from_status(false, s)
            }
        }
        Command::GetInfo => match wire::call(w, &CtapRequest::get_info()) {
            Ok(m) => PayloadResult {
                leak: Some(Leak::Info(wire::info_summary(&m))),
                ..PayloadResult::from_status(true, StatusCode::Ok)
            },
            Err(d) => PayloadResult::denied(d),
        },
    })
}

fn harvest_result(h: wire::Harvest) -> PayloadResult {
    let success = !h.fingerprint.is_empty();
    let outcome = if success { "Leaked".to_string() } else { h.denial.map_or("NoLeak".into(), |d| d.status.to_string()) };
    PayloadResult {
        success,
        outcome,
        blocked_by: if success { None } else { h.denial.and_then(|d| d.blocked_by) },
        uv_used: h.uv_used,
        leak: success.then_some(Leak::Fingerprint(h.fingerprint)),
        detail: Vec::new(),
    }
}

fn ac_report(tb: &Testbed, id: AttackId, a: Command, b: Command) -> AttackReport {
    let mut rep = AttackReport::new(id.name(), Some(id), &tb.config, Context::Mitm);
    rep.pair = Some((a, b));
    rep
}

/// Confounds the victim's API A into a single attempt at API B.
pub fn run_ac(tb: &mut Testbed, api_a: Command, api_b: Command) -> AttackReport {
    let label = format!("AC({}->{})", api_a.short_name(), api_b.short_name());
    let mut rep = AttackReport::new(label, None, &tb.config, Context::Mitm);
    rep.pair = Some((api_a, api_b));
    if api_a == api_b {
        return rep.not_applicable("Diagonal");
    }
    tb.plug_in();
    let w = tb.window();
    let flow = VictimFlow::for_api(api_a, tb);
    let run = confound(tb, flow, 0xac, generic_payload(api_b, tb.target_rp_ids()));
    tb.close(w, &mut rep);
    score(&mut rep, &run);
    rep
}

/// Victim opens GetAssertion; the relay enumerates every discoverable
/// credential and deletes it.
pub fn run_ac1(tb: &mut Testbed) -> AttackReport {
    let mut rep = ac_report(tb, AttackId::AC1, Command::GetAssertion, Command::CredentialManagement);
    tb.plug_in();
    let w = tb.window();
    let before = tb.discoverable_count();
    let payload: Payload = Box::new(|w: &mut dyn Wire, token: Option<&[u8; 32]>, _: &mut ChaCha20Rng| {
        let Some(token) = token else {
            return PayloadResult::from_status(false, StatusCode::PinRequired);
        };
        let ids = match wire::enumerate_credentials(w, token) {
            Ok(ids) => ids,
            Err(d) => return PayloadResult { uv_used: true, ..PayloadResult::denied(d) },
        };
        let mut deleted = 0;
        let mut denial = None;
        for id in &ids {
            match wire::delete_credential(w, token, id) {
                Ok(()) => deleted += 1,
                Err(d) => {
                    denial = Some(d);
                    break;
                }
            }
        }
        let mut r = match denial {
            Some(d) => PayloadResult::denied(d),
            None => PayloadResult::from_status(true, StatusCode::Ok),
        };
        r.uv_used = true;
        r.detail = vec![("found", ids.len().to_string()), ("deleted", deleted.to_string())];
        r
    });
    let flow = VictimFlow::for_api(Command::GetAssertion, tb);
    let run = confound(tb, flow, 0xac1, payload);
    tb.close(w, &mut rep);
    score(&mut rep, &run);
    let after = tb.discoverable_count();
    rep.success = run.fired && before > 0 && after == 0;
    rep.detail.push(("remaining", after.to_string()));
    rep
}

/// Factory reset through a flow that never asks for the PIN. Over NFC the
/// victim only needs to tap for GetInfo; over USB a selection touch is
/// used, or a no-PIN sign-in on devices without Selection.
pub fn run_ac2(tb: &mut Testbed) -> AttackReport {
    let flow = match tb.transport() {
        Transport::Nfc => VictimFlow::GetInfo,
        _ if tb.supports_selection() => VictimFlow::Selection,
        _ => VictimFlow::Authenticate(tb.plain_rp_index()),
    };
    let mut rep = ac_report(tb, AttackId::AC2, flow.api(), Command::Reset);
    tb.plug_in();
    let w = tb.window();
    let before = tb.dev.authenticator().state().credentials.len();
    let run = confound(tb, flow, 0xac2, generic_payload(Command::Reset, Vec::new()));
    tb.close(w, &mut rep);
    score(&mut rep, &run);
    if rep.success {
        rep.detail.push(("wiped", before.to_string()));
    }
    rep
}

/// Tracking through the relay: two confounded sign-ups harvest silent
/// assertions, with the victim signing in normally between them.
pub fn run_ac3(tb: &mut Testbed) -> AttackReport {
    let mut rep = ac_report(tb, AttackId::AC3, Command::MakeCredential, Command::GetAssertion);
    if !tb.any_discoverable_template() {
        return rep.not_applicable("NoDiscoverable");
    }
    let targets = tb.target_rp_ids();
    tb.plug_in();
    let w1 = tb.window();
    let first = confound(tb, VictimFlow::Register, 0xac3, generic_payload(Command::GetAssertion, targets.clone()));
    let mut cost = rep.clone();
    tb.close(w1, &mut cost);

    let fp1 = leaked_fingerprint(&first);
    let idx = fp1
        .as_ref()
        .and_then(|fp| tb.rps.iter().position(|r| fp.rp_ids().contains(&r.rp_id())))
        .unwrap_or_else(|| tb.uv_rp_index());
    for _ in 0..tb.dev.authenticator().config().rotation_period {
        let _ = tb.victim_sign_in(idx);
    }

    tb.plug_in();
    let w2 = tb.window();
    let second = confound(tb, VictimFlow::Register, 0xac3 ^ 0xff, generic_payload(Command::GetAssertion, targets));
    tb.close(w2, &mut rep);
    rep.stealthy &= cost.stealthy;
    rep.up_grants_consumed += cost.up_grants_consumed;
    score(&mut rep, &first);
    let fp2 = leaked_fingerprint(&second);
    rep.uv_consumed = first.result.as_ref().is_some_and(|r| r.uv_used)
        || second.result.as_ref().is_some_and(|r| r.uv_used);
    rep.success = match (&fp1, &fp2) {
        (Some(a), Some(b)) => match_fingerprints(a, b),
        _ => false,
    };
    let c5 = tb.has(Countermeasure::C5);
    if rep.success {
        rep.outcome = "Tracked".into();
    } else if fp1.is_some() {
        rep.outcome = "Mismatch".into();
        rep.blocked_by = c5.then_some(Countermeasure::C5);
    } else if rep.blocked_by.is_none() && c5 {
        rep.blocked_by = Some(Countermeasure::C5);
    }
    rep.detail.push(("second", fp2.map_or("-".into(), |f| f.to_string())));
    rep
}

fn leaked_fingerprint(run: &ConfusionRun) -> Option<Fingerprint> {
    match run.result.as_ref()?.leak.as_ref()? {
        Leak::Fingerprint(fp) => Some(fp.clone()),
        _ => None,
    }
}

/// Fills the credential store with attacker credentials. Over NFC one
/// confounded sign-in is enough; over USB each injection needs a touch, so
/// every sign-in carries one, up to `max_flows` sign-ins.
pub fn run_ac4(tb: &mut Testbed, max_flows: Option<usize>) -> AttackReport {
    let mut rep = ac_report(tb, AttackId::AC4, Command::GetAssertion, Command::MakeCredential);
    if !tb.any_discoverable_template() {
        return rep.not_applicable("NoDiscoverable");
    }
    let capacity = tb.dev.authenticator().config().max_discoverable;
    let per_flow = if tb.transport() == Transport::Nfc { capacity + 1 } else { 1 };
    let max_flows = max_flows.unwrap_or(capacity + 2);
    tb.plug_in();
    let w = tb.window();
    let injected = Cell::new(0usize);
    let full = Cell::new(false);
    let mut flows = 0;
    let mut last = None;
    while flows < max_flows && !full.get() {
        flows += 1;
        let payload: Payload = Box::new(|w: &mut dyn Wire, token: Option<&[u8; 32]>, rng: &mut ChaCha20Rng| {
            let mut r = PayloadResult { uv_used: token.is_some(), ..PayloadResult::from_status(true, StatusCode::Ok) };
            for _ in 0..per_flow {
                match wire::inject_credential(w, token, rng) {
                    Ok(()) => injected.set(injected.get() + 1),
                    Err(d) => {
                        full.set(d.status == StatusCode::KeyStoreFull);
                        r = PayloadResult { uv_used: r.uv_used, ..PayloadResult::denied(d) };
                        break;
                    }
                }
            }
            r
        });
        let flow = VictimFlow::for_api(Command::GetAssertion, tb);
        let run = confound(tb, flow, 0xac4 + flows as u64, payload);
        let stop = !run.succeeded() && !full.get();
        last = Some(run);
        if stop {
            break;
        }
    }
    tb.close(w, &mut rep);
    if let Some(run) = &last {
        score(&mut rep, run);
    }
    rep.success = full.get();
    if rep.success {
        rep.blocked_by = None;
    }
    rep.detail.push(("flows", flows.to_string()));
    rep.detail.push(("injected", injected.get().to_string()));
    rep.detail.push(("stored", tb.discoverable_count().to_string()));
    rep
}

/// Hard-locks the PIN from confounded GetInfo calls, one session at a time.
pub fn run_ac5(tb: &mut Testbed) -> AttackReport {
    let mut rep = ac_report(tb, AttackId::AC5, Command::GetInfo, Command::ClientPin);
    let guesses = Cell::new(0u32);
    let w0 = tb.window();
    let mut sessions = 0;
    let mut last = None;
    for _ in 0..MAX_LOCKOUT_SESSIONS {
        sessions += 1;
        tb.plug_in();
        let payload: Payload = Box::new(|w: &mut dyn Wire, _: Option<&[u8; 32]>, rng: &mut ChaCha20Rng| loop {
            let d = wire::wrong_guess(w, rng, VICTIM_PIN);
            if !wire::is_guess_counted(d.status) {
                return PayloadResult::denied(d);
            }
            guesses.set(guesses.get() + 1);
            if d.status != StatusCode::PinInvalid {
                return PayloadResult::from_status(true, d.status);
            }
        });
        let run = confound(tb, VictimFlow::GetInfo, 0xac5 + sessions as u64, payload);
        let stop = !run.succeeded() || tb.dev.authenticator().state().pin.hard_locked;
        last = Some(run);
        if stop {
            break;
        }
    }
    tb.close(w0, &mut rep);
    if let Some(run) = &last {
        score(&mut rep, run);
    }
    rep.success = tb.dev.authenticator().state().pin.hard_locked;
    rep.detail.push(("guesses", guesses.get().to_string()));
    rep.detail.push(("sessions", sessions.to_string()));
    rep
}

/// Holds the device busy with back-to-back Selection requests nobody
/// answers, and checks whether an honest client gets through meanwhile.
pub fn run_ac6(tb: &mut Testbed) -> AttackReport {
    let mut rep = ac_report(tb, AttackId::AC6, Command::Selection, Command::Selection);
    if tb.transport() != Transport::Usb {
        return rep.not_applicable("NoUpWait");
    }
    tb.plug_in();
    let w = tb.window();
    let mut attacker = Link::new(tb.transport(), MITM_RELAY_ID);
    let mut honest = Link::new(tb.transport(), HONEST_CLIENT_ID);
    let selection = CtapRequest::selection().encode();
    let info = CtapRequest::get_info().encode();
    let start = tb.dev.now();
    let mut calls = 0;
    let mut refused = 0;
    let mut served = 0;
    let mut last = StatusCode::Ok;
    let mut block = None;
    let mut probe = |tb: &mut Testbed| match honest.submit(&mut tb.dev, &mut tb.victim, &info) {
        Err(SessionError::Hid(_)) => refused += 1,
        Err(_) => {}
        Ok(()) => {
            if honest.collect(&mut tb.dev).is_ok() {
                served += 1;
            }
        }
    };
    while tb.dev.now() < start + DOS_WINDOW_MS {
        if attacker.submit(&mut tb.dev, &mut tb.victim, &selection).is_err() {
            break;
        }
        calls += 1;
        let now = tb.dev.now();
        let ready = tb.dev.busy_until().unwrap_or(now);
        if ready > now + 1 {
            // The honest client shows up while the touch request is pending.
            tb.dev.advance((ready - now - 1).min(1_000));
            probe(tb);
        }
        last = match attacker.collect(&mut tb.dev).ok().and_then(|raw| CtapResponse::decode(&raw).ok()) {
            Some(r) => r.status(),
            None => StatusCode::Other,
        };
        if !matches!(last, StatusCode::Ok | StatusCode::UserActionTimeout) {
            block = tb.dev.authenticator().last_block();
            probe(tb);
            break;
        }
    }
    tb.close(w, &mut rep);
    rep.outcome = last.to_string();
    if last == StatusCode::NotSupported {
        return rep.not_applicable("NotSupported");
    }
    rep.blocked_by = block;
    rep.success = calls > 0 && served == 0 && refused > 0;
    rep.detail.push(("selection_calls", calls.to_string()));
    rep.detail.push(("honest_refused", refused.to_string()));
    rep.detail.push(("honest_served", served.to_string()));
    rep
}

/// Profiles the device from a confounded sign-in.
pub fn run_ac7(tb: &mut Testbed) -> AttackReport {
    let mut rep = ac_report(tb, AttackId::AC7, Command::GetAssertion, Command::GetInfo);
    tb.plug_in();
    let w = tb.window();
    let flow = VictimFlow::for_api(Command::GetAssertion, tb);
    let mut run = confound(tb, flow, 0xac7, generic_payload(Command::GetInfo, Vec::new()));
    if let Some(Leak::Info(info)) = run.result.as_mut().and_then(|r| r.leak.as_mut()) {
        if let Some(p) = super::identify_profile(info) {
            info.insert("profile".into(), p);
        }
    }
    tb.close(w, &mut rep);
    score(&mut rep, &run);
    rep
}
