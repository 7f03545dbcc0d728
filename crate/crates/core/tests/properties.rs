use ctaplab::authenticator::Transport;
use ctaplab::cbor::{decode_canonical, encode_canonical};
use ctaplab::codec::{Command, CtapRequest, CtapResponse, StatusCode};
use ctaplab::transports::apdu;
use ctaplab::transports::hid::{self, CtapHidFrame};
use ctaplab::transports::{Direction, TransportFrame};
use proptest::prelude::*;

mod common;
use common::{param_map, request, value};

proptest! {
    #[test]
    fn cbor_canonical_round_trip(v in value()) {
        let bytes = encode_canonical(&v);
        let back = decode_canonical(&bytes).unwrap();
        prop_assert_eq!(encode_canonical(&back), bytes);
        prop_assert_eq!(back, v);
    }

    #[test]
    fn request_round_trip(req in request()) {
        let decoded = CtapRequest::decode(&req.encode()).unwrap();
        prop_assert_eq!(decoded.encode(), req.encode());
        prop_assert_eq!(decoded.command(), req.command());
        prop_assert_eq!(decoded.subcommand(), req.subcommand());
    }

    #[test]
    fn response_round_trip(payload in param_map(), ok in any::<bool>()) {
        let resp = if ok { CtapResponse::ok_with(payload) } else { CtapResponse::error(StatusCode::PinInvalid) };
        prop_assert_eq!(CtapResponse::decode(&resp.encode()).unwrap(), resp);
    }

    #[test]
    fn hid_framing_round_trip(cid in 1u32..u32::MAX, data in proptest::collection::vec(any::<u8>(), 0..1200)) {
        let frames = hid::send(cid, &data).unwrap();
        let expected = 1 + data.len().saturating_sub(hid::INIT_DATA_LEN).div_ceil(hid::CONT_DATA_LEN);
        prop_assert_eq!(frames.len(), expected);
        let parsed: Vec<_> = frames.iter().map(|f| CtapHidFrame::from_report(&f.to_report()).unwrap()).collect();
        prop_assert_eq!(hid::recv(&parsed).unwrap().data, data);
    }

    #[test]
    fn apdu_chaining_round_trip(data in proptest::collection::vec(any::<u8>(), 1..1000)) {
        let apdus = apdu::wrap(&data);
        prop_assert_eq!(apdus.len(), data.len().div_ceil(apdu::MAX_COMMAND_DATA));
        let reparsed: Vec<_> = apdus.iter().map(|a| apdu::Apdu::decode(&a.encode()).unwrap()).collect();
        prop_assert_eq!(apdu::unwrap(&reparsed).unwrap(), data.clone());
        let parts = apdu::split_response(&data);
        prop_assert_eq!(apdu::join_response(&parts).unwrap(), data);
    }

    #[test]
    fn trace_line_round_trip(ts in any::<u64>(), nfc in any::<bool>(), up in any::<bool>(), raw in proptest::collection::vec(any::<u8>(), 1..70)) {
        let f = TransportFrame {
            timestamp: ts,
            transport: if nfc { Transport::Nfc } else { Transport::Usb },
            direction: if up { Direction::ToAuthenticator } else { Direction::ToClient },
            raw,
        };
        prop_assert_eq!(f.to_string().parse::<TransportFrame>().unwrap(), f);
    }
}

#[test]
fn every_command_has_a_short_name() {
    let names: Vec<_> = Command::ALL.iter().map(|c| c.short_name()).collect();
    assert_eq!(names, ["MC", "GA", "CM", "CP", "Re", "Se", "GI"]);
}
