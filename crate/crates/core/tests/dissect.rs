use ctaplab::attacks::{Testbed, TestbedConfig};
use ctaplab::authenticator::Transport;
use ctaplab::dissect::dissect;
use ctaplab::scenario::{self, run_scenario};
use ctaplab::transports::trace::{read_trace, write_trace};

#[test]
fn bundled_traces_dissect_cleanly() {
    for name in scenario::bundled_names() {
        let out = run_scenario(&scenario::bundled(name).unwrap(), None).unwrap();
        let mut text = Vec::new();
        write_trace(&mut text, &out.trace).unwrap();
        let entries = read_trace(text.as_slice()).unwrap();
        assert_eq!(entries.len(), out.trace.len());
        let records = dissect(&entries);
        assert_eq!(records.len(), entries.len());
        let bad: Vec<_> = records.iter().filter(|r| r.is_error()).take(3).collect();
        assert!(bad.is_empty(), "{name}: {bad:?}");
    }
}

#[test]
fn honest_usb_session_reads_in_order() {
    let mut tb = Testbed::new(TestbedConfig::new("solo2-like", Transport::Usb)).unwrap();
    tb.power_cycle();
    tb.dev.take_trace();
    let idx = tb.uv_rp_index();
    tb.victim_sign_in(idx).unwrap();
    let frames: Vec<_> = tb.dev.take_trace().into_iter().map(Ok).collect();
    let records = dissect(&frames);
    let events: Vec<String> = records
        .iter()
        .filter_map(|r| match (&r.name, r.keepalive) {
            (Some(n), _) => Some(format!("{}:{n}", r.frame_kind)),
            (None, Some(k)) => Some(format!("KEEPALIVE:{}", k.name())),
            (None, None) if r.frame_kind == "INIT" => Some("INIT".into()),
            _ => None,
        })
        .collect();
    assert_eq!(events.first().map(String::as_str), Some("INIT"));
    let ga = events.iter().position(|e| e.ends_with(":GetAssertion")).expect("GetAssertion");
    let waiting = events.iter().position(|e| e == "KEEPALIVE:WAITING").expect("touch wait");
    assert!(ga < waiting, "{events:?}");
    assert!(events.iter().any(|e| e.contains("GetPinToken")), "{events:?}");
    assert!(records.iter().any(|r| r.up_wait_ms.is_some()));
    let init_reply = records.iter().find(|r| r.frame_kind == "INIT" && !r.capabilities.is_empty()).unwrap();
    assert!(init_reply.capabilities.contains(&"CBOR"));
}
