use super::*;
use crate::actors::builtin_template;
use crate::codec::StatusCode;

fn bed(profile: &str, t: Transport) -> Testbed {
    Testbed::new(TestbedConfig::new(profile, t)).unwrap()
}

fn bed_with(t: Transport, cms: &[Countermeasure]) -> Testbed {
    Testbed::new(TestbedConfig::new("solo2-like", t).with_countermeasures(cms.iter().copied())).unwrap()
}

/// Runs every off-diagonal pair for real and compares with the derived grid.
fn brute_force(tb: &Testbed, config: MatrixConfig) {
    let m = enumerate_confusions(config);
    for a in ROW_ORDER {
        for b in COLUMN_ORDER {
            let r = run_ac(&mut tb.clone(), a, b);
            let seen = r.applicable && r.success && r.stealthy;
            assert_eq!(seen, m.get(a, b).constraint.feasible(), "{}", r.to_line());
        }
    }
}

#[test]
fn brute_force_nfc_matches_grid() {
    brute_force(&bed("solo2-like", Transport::Nfc), MatrixConfig::default());
}

#[test]
fn brute_force_usb_matches_grid() {
    brute_force(&bed("solo2-like", Transport::Usb), MatrixConfig { nfc: false, weak_credprotect: true });
}

#[test]
fn brute_force_without_weak_credentials() {
    let templates = ["github-like", "facebook-like"].map(|n| builtin_template(n).unwrap()).to_vec();
    let tb = Testbed::new(TestbedConfig::new("solo2-like", Transport::Nfc).with_templates(templates)).unwrap();
    brute_force(&tb, MatrixConfig { nfc: true, weak_credprotect: false });
}

#[test]
fn diagonal_is_not_applicable() {
    let r = run_ac(&mut bed("solo2-like", Transport::Usb), Command::Reset, Command::Reset);
    assert!(!r.applicable);
    assert_eq!(r.outcome, "Diagonal");
}

#[test]
fn every_attack_lands_on_an_undefended_key() {
    for t in [Transport::Usb, Transport::Nfc] {
        let tb = bed("solo2-like", t);
        for id in AttackId::ALL {
            let r = run_attack(id, &tb);
            if id == AttackId::AC6 && t == Transport::Nfc {
                assert!(!r.applicable);
                continue;
            }
            assert!(r.success && r.stealthy, "{}", r.to_line());
        }
    }
}

#[test]
fn ci1_wipes_over_nfc_without_a_touch() {
    let mut tb = bed("yubikey5-like", Transport::Nfc);
    let r = run_ci1(&mut tb);
    assert!(r.success);
    assert_eq!(r.up_grants_consumed, 0);
    assert!(tb.dev.authenticator().state().credentials.is_empty());
}

#[test]
fn ci1_over_usb_rides_one_touch() {
    let r = run_ci1(&mut bed("solo2-like", Transport::Usb));
    assert!(r.success);
    assert_eq!(r.up_grants_consumed, 1);
}

#[test]
fn ci1_after_the_reset_window_fails() {
    let cfg = TestbedConfig::new("solo2-like", Transport::Usb).with_plug_delay(11_000);
    let r = run_ci1(&mut Testbed::new(cfg).unwrap());
    assert!(!r.success);
    assert_eq!(r.outcome, StatusCode::NotAllowed.to_string());
}

#[test]
fn ci3_needs_three_sessions() {
    let mut tb = bed("solo2-like", Transport::Usb);
    let r = run_ci3(&mut tb);
    assert!(r.success);
    assert_eq!(r.detail("guesses"), Some("8"));
    assert_eq!(r.detail("sessions"), Some("3"));
    assert_eq!(r.detail("soft_locked_after"), Some("3"));
    assert_eq!(r.outcome, StatusCode::PinBlocked.to_string());
    assert!(tb.victim_sign_in(tb.uv_rp_index()).is_err());
}

#[test]
fn ci4_names_each_profile() {
    for p in ["yubikey5-like", "solo2-like", "opensk-like"] {
        let r = run_ci4(&mut bed(p, Transport::Usb));
        match r.leaked {
            Some(Leak::Info(info)) => assert_eq!(info.get("profile").map(String::as_str), Some(p)),
            other => panic!("{other:?}"),
        }
    }
}

#[test]
fn ci2_profiled_adds_info_to_both_fingerprints() {
    let r = run_ci2_profiled(&mut bed("solo2-like", Transport::Nfc));
    assert!(r.success);
    match r.leaked {
        Some(Leak::Fingerprint(fp)) => assert!(fp.info.is_some()),
        other => panic!("{other:?}"),
    }
}

#[test]
fn ci2_needs_discoverable_accounts() {
    let templates = vec![builtin_template("facebook-like").unwrap()];
    let tb = Testbed::new(TestbedConfig::new("solo2-like", Transport::Nfc).with_templates(templates)).unwrap();
    let r = run_attack(AttackId::CI2, &tb);
    assert!(!r.applicable);
}

#[test]
fn cve_leak_only_on_vulnerable_firmware() {
    let cfg = TestbedConfig::new("solo2-like", Transport::Usb).with_cve(true);
    let r = run_cve_rp_leak(&mut Testbed::new(cfg).unwrap());
    assert!(r.success, "{}", r.to_line());
    let r = run_cve_rp_leak(&mut bed("solo2-like", Transport::Usb));
    assert!(!r.success);
    assert!(r.leaked.is_none());
}

#[test]
fn ac4_single_usb_flow_injects_once() {
    let mut tb = bed("solo2-like", Transport::Usb);
    let before = tb.discoverable_count();
    let r = run_ac4(&mut tb, Some(1));
    assert!(!r.success);
    assert!(r.stealthy);
    assert_eq!(r.detail("injected"), Some("1"));
    assert_eq!(tb.discoverable_count(), before + 1);
}

#[test]
fn ac4_fills_storage_over_nfc_in_one_flow() {
    let mut tb = bed("yubikey5-like", Transport::Nfc);
    let r = run_ac4(&mut tb, None);
    assert!(r.success);
    assert_eq!(r.detail("flows"), Some("1"));
    assert_eq!(tb.discoverable_count(), 25);
}

#[test]
fn ac6_denies_the_honest_client() {
    let r = run_ac6(&mut bed("solo2-like", Transport::Usb));
    assert!(r.success);
    assert_eq!(r.detail("honest_served"), Some("0"));
}

#[test]
fn ac6_rate_limit() {
    let r = run_ac6(&mut bed_with(Transport::Usb, &[Countermeasure::C8]));
    assert!(!r.success);
    assert_eq!(r.blocked_by, Some(Countermeasure::C8));
    assert_eq!(r.outcome, StatusCode::RateLimited.to_string());
}

#[test]
fn ac6_without_selection_is_not_applicable() {
    let r = run_ac6(&mut bed("yubikey5-like", Transport::Usb));
    assert!(!r.applicable);
    assert_eq!(r.outcome, "NotSupported");
}

#[test]
fn unsupported_transport_is_an_error() {
    let err = Testbed::new(TestbedConfig::new("opensk-like", Transport::Nfc)).unwrap_err();
    assert!(matches!(err, TestbedError::TransportUnsupported { .. }));
}

#[test]
fn countermeasures_block_their_attacks() {
    let cases: &[(Countermeasure, Transport, AttackId)] = &[
        (Countermeasure::C3, Transport::Nfc, AttackId::CI1),
        (Countermeasure::C3, Transport::Nfc, AttackId::CI2),
        (Countermeasure::C3, Transport::Nfc, AttackId::AC2),
        (Countermeasure::C4, Transport::Usb, AttackId::CI1),
        (Countermeasure::C4, Transport::Nfc, AttackId::AC2),
        (Countermeasure::C5, Transport::Usb, AttackId::CI2),
        (Countermeasure::C5, Transport::Nfc, AttackId::AC3),
        (Countermeasure::C6, Transport::Usb, AttackId::CI1),
        (Countermeasure::C6, Transport::Usb, AttackId::AC2),
        (Countermeasure::C7, Transport::Usb, AttackId::AC1),
        (Countermeasure::C8, Transport::Usb, AttackId::AC6),
    ];
    for &(cm, t, id) in cases {
        let r = run_attack(id, &bed_with(t, &[cm]));
        assert!(!r.success, "{}", r.to_line());
        assert_eq!(r.blocked_by, Some(cm), "{}", r.to_line());
    }
}

#[test]
fn client_allowlist_blocks_everything() {
    for t in [Transport::Usb, Transport::Nfc] {
        let tb = bed_with(t, &[Countermeasure::C1]);
        for id in AttackId::ALL {
            let r = run_attack(id, &tb);
            assert!(!r.success, "{}", r.to_line());
            if r.applicable {
                assert_eq!(r.blocked_by, Some(Countermeasure::C1), "{}", r.to_line());
            }
        }
    }
}

#[test]
fn feedback_exposes_destructive_attacks() {
    let tb = bed_with(Transport::Usb, &[Countermeasure::C2]);
    for id in [AttackId::CI1, AttackId::AC1, AttackId::AC2] {
        let r = run_attack(id, &tb);
        assert!(r.success && !r.stealthy, "{}", r.to_line());
    }
}

#[test]
fn report_line_has_fixed_prefix() {
    let r = run_attack(AttackId::CI4, &bed("solo2-like", Transport::Usb));
    let line = r.to_line();
    let keys: Vec<&str> = line.split(' ').map(|kv| kv.split('=').next().unwrap()).collect();
    assert_eq!(
        &keys[..15],
        [
            "attack", "profile", "transport", "template", "countermeasures", "context", "pair", "applicable", "success",
            "stealthy", "uv_consumed", "up_grants", "blocked_by", "outcome", "leaked"
        ]
    );
}

#[test]
fn attack_ids_round_trip() {
    for id in AttackId::ALL {
        assert_eq!(AttackId::parse(id.name()), Some(id));
        assert_eq!(AttackId::parse(&id.name().to_lowercase()), Some(id));
    }
    assert_eq!(AttackId::parse("AC8"), None);
}
