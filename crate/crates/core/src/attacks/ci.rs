//! Impersonation: a rogue client of the attacker's own talks to the device.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::fingerprint::match_fingerprints;
use super::wire::{self, AttackerWire, Harvest};
use super::{AttackId, AttackReport, Context, Leak, Testbed, ATTACKER_APP_ID, VICTIM_PIN};
use crate::actors::Expectation;
use crate::authenticator::{AuthenticatorConfig, Countermeasure, Transport};
use crate::codec::{CtapRequest, StatusCode};
use crate::messages::GetAssertionParams;
use crate::transports::Pipeline;

/// Upper bound on the session count for the lockout loop.
const MAX_LOCKOUT_SESSIONS: usize = 8;
const MAX_LEAKED_RPS: usize = 1000;

fn rogue(tb: &Testbed) -> Pipeline {
    Pipeline::direct(tb.transport(), ATTACKER_APP_ID)
}

fn rng(tb: &Testbed, salt: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(tb.seed() ^ salt)
}

fn report(tb: &Testbed, id: AttackId) -> AttackReport {
    AttackReport::new(id.name(), Some(id), &tb.config, Context::Impersonation)
}

/// Factory reset from a rogue client. Over NFC nobody needs to touch
/// anything. Over USB the reset rides on a touch the victim meant for a
/// sign-in they were doing at the time.
pub fn run_ci1(tb: &mut Testbed) -> AttackReport {
    let mut rep = report(tb, AttackId::CI1);
    tb.plug_in();
    let w = tb.window();
    let usb = tb.transport() == Transport::Usb;
    if usb {
        tb.victim.begin_flow("authenticate", Expectation::new(false, 1));
    }
    let before = tb.dev.authenticator().state().credentials.len();
    let mut pipe = rogue(tb);
    let r = wire::call(
        &mut AttackerWire { pipeline: &mut pipe, dev: &mut tb.dev, user: &mut tb.victim },
        &CtapRequest::reset(),
    );
    if usb {
        tb.victim.end_flow();
    }
    tb.close(w, &mut rep);
    match r {
        Ok(_) => {
            rep.success = true;
            rep.outcome = StatusCode::Ok.to_string();
            rep.detail.push(("wiped", before.to_string()));
        }
        Err(d) => {
            rep.outcome = d.status.to_string();
            rep.blocked_by = d.blocked_by;
        }
    }
    rep
}

fn harvest(tb: &mut Testbed, rng: &mut ChaCha20Rng) -> Harvest {
    let targets = tb.target_rp_ids();
    let mut pipe = rogue(tb);
    let mut w = AttackerWire { pipeline: &mut pipe, dev: &mut tb.dev, user: &mut tb.victim };
    wire::harvest_assertions(&mut w, &targets, None, rng)
}

/// Account the victim keeps using between the two harvests.
fn busiest_account(tb: &Testbed, leaked: &[&str]) -> usize {
    let on_leaked = |uv: bool| {
        tb.rps.iter().position(|r| r.template.requires_uv() == uv && leaked.contains(&r.rp_id()))
    };
    on_leaked(true).or_else(|| on_leaked(false)).unwrap_or_else(|| tb.uv_rp_index())
}

/// Tracking: silent assertions in two separate sessions, with the victim
/// using their accounts in between, must yield the same identifiers.
pub fn run_ci2(tb: &mut Testbed) -> AttackReport {
    run_ci2_inner(tb, false)
}

/// [`run_ci2`] with GetInfo fields folded into each fingerprint, for runs
/// that also profiled the device in the same session.
pub fn run_ci2_profiled(tb: &mut Testbed) -> AttackReport {
    run_ci2_inner(tb, true)
}

fn get_info_summary(tb: &mut Testbed) -> Option<BTreeMap<String, String>> {
    let mut pipe = rogue(tb);
    let mut w = AttackerWire { pipeline: &mut pipe, dev: &mut tb.dev, user: &mut tb.victim };
    wire::call(&mut w, &CtapRequest::get_info()).ok().map(|m| wire::info_summary(&m))
}

fn run_ci2_inner(tb: &mut Testbed, with_info: bool) -> AttackReport {
    let mut rep = report(tb, AttackId::CI2);
    if !tb.any_discoverable_template() {
        return rep.not_applicable("NoDiscoverable");
    }
    let mut rng = rng(tb, 0xc12);
    tb.plug_in();
    let w1 = tb.window();
    let mut first = harvest(tb, &mut rng);
    if with_info {
        first.fingerprint.info = get_info_summary(tb);
    }
    let mut cost = rep.clone();
    tb.close(w1, &mut cost);

    let leaked: Vec<String> = first.fingerprint.rp_ids().into_iter().map(str::to_owned).collect();
    let refs: Vec<&str> = leaked.iter().map(String::as_str).collect();
    let idx = busiest_account(tb, &refs);
    let logins = tb.dev.authenticator().config().rotation_period;
    let mut ok_logins = 0;
    for _ in 0..logins {
        if tb.victim_sign_in(idx).is_ok() {
            ok_logins += 1;
        }
    }

    tb.plug_in();
    let w2 = tb.window();
    let mut second = harvest(tb, &mut rng);
    if with_info {
        second.fingerprint.info = get_info_summary(tb);
    }
    tb.close(w2, &mut rep);
    rep.stealthy &= cost.stealthy;
    rep.up_grants_consumed += cost.up_grants_consumed;

    rep.success = match_fingerprints(&first.fingerprint, &second.fingerprint);
    let c5 = tb.has(Countermeasure::C5);
    if first.fingerprint.is_empty() {
        rep.outcome = "NoLeak".into();
        rep.blocked_by = first.denial.and_then(|d| d.blocked_by).or(c5.then_some(Countermeasure::C5));
    } else if rep.success {
        rep.outcome = "Tracked".into();
    } else {
        rep.outcome = "Mismatch".into();
        rep.blocked_by = c5.then_some(Countermeasure::C5);
    }
    rep.detail.push(("sightings", first.fingerprint.len().to_string()));
    rep.detail.push(("victim_logins", ok_logins.to_string()));
    rep.detail.push(("second", second.fingerprint.to_string()));
    if !first.fingerprint.is_empty() {
        rep.leaked = Some(Leak::Fingerprint(first.fingerprint));
    }
    rep
}

/// Lockout: wrong guesses until the device stops counting them, then a
/// power cycle to clear the soft lock, until the PIN is blocked for good.
pub fn run_ci3(tb: &mut Testbed) -> AttackReport {
    let mut rep = report(tb, AttackId::CI3);
    let mut rng = rng(tb, 0xc13);
    tb.plug_in();
    let w = tb.window();
    let mut guesses = 0u32;
    let mut sessions = 0u32;
    let mut soft_after = None;
    'sessions: for _ in 0..MAX_LOCKOUT_SESSIONS {
        sessions += 1;
        let mut pipe = rogue(tb);
        loop {
            let mut wire = AttackerWire { pipeline: &mut pipe, dev: &mut tb.dev, user: &mut tb.victim };
            let d = wire::wrong_guess(&mut wire, &mut rng, VICTIM_PIN);
            if !wire::is_guess_counted(d.status) {
                rep.outcome = d.status.to_string();
                rep.blocked_by = d.blocked_by;
                break 'sessions;
            }
            guesses += 1;
            match d.status {
                StatusCode::PinBlocked => break 'sessions,
                StatusCode::PinAuthBlocked => {
                    soft_after.get_or_insert(guesses);
                    break;
                }
                _ => {}
            }
        }
        tb.plug_in();
    }
    let pin = tb.dev.authenticator().state().pin.clone();
    rep.success = pin.hard_locked;
    rep.detail.push(("guesses", guesses.to_string()));
    rep.detail.push(("sessions", sessions.to_string()));
    rep.detail.push(("soft_locked_after", soft_after.map_or("-".into(), |g| g.to_string())));
    if rep.success {
        let probe = probe_sign_in(tb);
        rep.outcome = probe.to_string();
        rep.detail.push(("retries", pin.total_retries_remaining.to_string()));
    }
    tb.close(w, &mut rep);
    rep
}

/// What a sign-in gets from a locked device.
fn probe_sign_in(tb: &mut Testbed) -> StatusCode {
    let rp = tb.target_rp_ids().into_iter().next().unwrap_or_else(|| "example.com".into());
    let mut params = GetAssertionParams::new(&rp, [0u8; 32]);
    params.pin_auth = Some(vec![0u8; 16]);
    params.pin_protocol = Some(1);
    let mut pipe = rogue(tb);
    let mut w = AttackerWire { pipeline: &mut pipe, dev: &mut tb.dev, user: &mut tb.victim };
    match wire::call(&mut w, &CtapRequest::get_assertion(params.to_map())) {
        Ok(_) => StatusCode::Ok,
        Err(d) => d.status,
    }
}

/// Names the profile whose storage capacity matches `maxCreds`.
pub fn identify_profile(info: &BTreeMap<String, String>) -> Option<String> {
    let n: usize = info.get("maxCreds")?.parse().ok()?;
    AuthenticatorConfig::profile_names()
        .find(|p| AuthenticatorConfig::profile(p).is_some_and(|c| c.max_discoverable == n))
        .map(str::to_owned)
}

/// Profiling: GetInfo needs no authorization at all.
pub fn run_ci4(tb: &mut Testbed) -> AttackReport {
    let mut rep = report(tb, AttackId::CI4);
    tb.plug_in();
    let w = tb.window();
    let mut pipe = rogue(tb);
    let mut wire = AttackerWire { pipeline: &mut pipe, dev: &mut tb.dev, user: &mut tb.victim };
    match wire::call(&mut wire, &CtapRequest::get_info()) {
        Ok(m) => {
            let mut info = wire::info_summary(&m);
            if let Some(p) = identify_profile(&info) {
                info.insert("profile".into(), p);
            }
            rep.success = true;
            rep.outcome = StatusCode::Ok.to_string();
            rep.detail.push(("digest", wire::info_digest(&info)));
            rep.leaked = Some(Leak::Info(info));
        }
        Err(d) => {
            rep.outcome = d.status.to_string();
            rep.blocked_by = d.blocked_by;
        }
    }
    tb.close(w, &mut rep);
    rep
}

/// Reads the RP list through the unauthenticated enumeration flaw.
pub fn run_cve_rp_leak(tb: &mut Testbed) -> AttackReport {
    let mut rep = AttackReport::new("CVE-2024-35311", None, &tb.config, Context::Impersonation);
    tb.plug_in();
    let w = tb.window();
    let mut pipe = rogue(tb);
    let mut wire = AttackerWire { pipeline: &mut pipe, dev: &mut tb.dev, user: &mut tb.victim };
    let (rps, last) = wire::leak_rps_without_token(&mut wire, MAX_LEAKED_RPS);
    rep.blocked_by = wire.dev.authenticator().last_block().filter(|_| rps.is_empty());
    tb.close(w, &mut rep);
    rep.success = !rps.is_empty();
    rep.outcome = if rep.success { "Leaked".into() } else { last.to_string() };
    rep.detail.push(("rps", rps.len().to_string()));
    if rep.success {
        rep.leaked = Some(Leak::RpList(rps));
    }
    rep
}
