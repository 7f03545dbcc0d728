//! Generators shared by the property tests and the acceptance run.
#![allow(dead_code)]

use ctaplab::cbor::{CborMap, CborValue};
use ctaplab::codec::{ClientPinSub, CredMgmtSub, CtapRequest};
use proptest::prelude::*;

pub fn leaf() -> impl Strategy<Value = CborValue> {
    prop_oneof![
        any::<u64>().prop_map(CborValue::Unsigned),
        any::<u64>().prop_map(CborValue::Negative),
        proptest::collection::vec(any::<u8>(), 0..40).prop_map(CborValue::Bytes),
        "[a-zA-Z0-9 ._-]{0,24}".prop_map(CborValue::Text),
        any::<bool>().prop_map(CborValue::Bool),
        Just(CborValue::Null),
    ]
}

pub fn value() -> impl Strategy<Value = CborValue> {
    leaf().prop_recursive(3, 32, 6, |inner| {
        prop_oneof![
            proptest::collection::vec(inner.clone(), 0..6).prop_map(CborValue::Array),
            proptest::collection::vec((-30i64..30, inner), 0..6).prop_map(|entries| {
                let mut m = CborMap::new();
                for (k, v) in entries {
                    m.insert(k, v);
                }
                CborValue::Map(m)
            }),
        ]
    })
}

pub fn param_map() -> impl Strategy<Value = CborMap> {
    proptest::collection::vec((1i64..12, leaf()), 0..6).prop_map(|entries| {
        let mut m = CborMap::new();
        for (k, v) in entries {
            m.insert(k, v);
        }
        m
    })
}

pub fn request() -> impl Strategy<Value = CtapRequest> {
    let pin_subs = prop::sample::select(ClientPinSub::ALL.to_vec());
    let cm_subs = prop::sample::select(CredMgmtSub::ALL.to_vec());
    prop_oneof![
        Just(CtapRequest::get_info()),
        Just(CtapRequest::reset()),
        Just(CtapRequest::selection()),
        Just(CtapRequest::get_next_assertion()),
        param_map().prop_map(CtapRequest::make_credential),
        param_map().prop_map(CtapRequest::get_assertion),
        (pin_subs, param_map()).prop_map(|(s, m)| CtapRequest::client_pin(s, m)),
        (cm_subs, param_map()).prop_map(|(s, m)| CtapRequest::cred_mgmt(s, m)),
    ]
}
