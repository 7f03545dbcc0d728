use super::*;
use crate::authenticator::{Authenticator, AuthenticatorConfig, Countermeasure, Transport, INITIAL_PIN_RETRIES};
use crate::codec::{CtapRequest, StatusCode};
use crate::messages::ProtectPolicy;
use crate::transports::{Pipeline, VirtualDevice};

struct Bench {
    dev: VirtualDevice,
    user: UserModel,
    client: ClientSession,
}

fn bench(profile: &str, transport: Transport, cms: &[Countermeasure]) -> Bench {
    let cfg = AuthenticatorConfig::profile(profile).unwrap().with_countermeasures(cms.iter().copied());
    let mut b = Bench {
        dev: VirtualDevice::new(Authenticator::new(cfg, 11)),
        user: UserModel::new("246810"),
        client: ClientSession::new(Pipeline::direct(transport, HONEST_CLIENT_ID), 5),
    };
    b.client.setup_pin(&mut b.dev, &mut b.user, None).unwrap();
    b
}

fn rp(name: &str) -> RelyingParty {
    RelyingParty::new(builtin_template(name).unwrap(), 1)
}

impl Bench {
    fn register(&mut self, rp: &mut RelyingParty, name: &str) -> Result<CredentialRecord, FlowError> {
        self.client.register(&mut self.dev, &mut self.user, None, rp, name)
    }

    fn authenticate(&mut self, rp: &mut RelyingParty, name: &str) -> Result<AssertionRecord, FlowError> {
        self.client.authenticate(&mut self.dev, &mut self.user, None, rp, name)
    }

    fn stored(&self) -> usize {
        self.dev.authenticator().state().discoverable_count()
    }
}

#[test]
fn honest_sessions_never_alarm() {
    for transport in [Transport::Usb, Transport::Nfc] {
        let mut b = bench("solo2-like", transport, &[]);
        let mut rps: Vec<_> = builtin_templates().into_iter().map(|t| RelyingParty::new(t, 2)).collect();
        for rp in &mut rps {
            b.register(rp, "alice").unwrap();
        }
        for rp in &mut rps {
            let a = b.authenticate(rp, "alice").unwrap();
            assert_eq!(a.user_verified, rp.template.requires_uv());
        }
        b.client.get_info_flow(&mut b.dev, &mut b.user, None).unwrap();
        assert!(!b.user.alarmed(), "{transport}: {:?}", b.user.alarms());
        assert!(b.user.up_grants() <= 20);
        assert_eq!(b.stored(), 8);
    }
}

#[test]
fn stored_policy_follows_template() {
    let mut b = bench("solo2-like", Transport::Usb, &[]);
    for name in ["microsoft-like", "github-like"] {
        let mut r = rp(name);
        b.register(&mut r, "alice").unwrap();
        let cred = b
            .dev
            .authenticator()
            .state()
            .credentials
            .iter()
            .find(|c| c.rp_id == r.rp_id())
            .cloned()
            .unwrap();
        assert!(cred.discoverable);
        assert_eq!(cred.protect_policy, r.template.protect_policy());
    }
    assert_eq!(
        b.dev.authenticator().state().credentials[0].protect_policy,
        ProtectPolicy::UvOptional
    );

    let before = b.stored();
    let mut fb = rp("facebook-like");
    b.register(&mut fb, "alice").unwrap();
    assert_eq!(b.stored(), before);
    assert!(b.authenticate(&mut fb, "alice").is_ok());
}

#[test]
fn full_store_surfaces_to_registration() {
    let mut b = bench("yubikey5-like", Transport::Usb, &[]);
    let mut gh = rp("github-like");
    for i in 0..25 {
        b.register(&mut gh, &format!("user{i}")).unwrap();
    }
    let err = b.register(&mut gh, "user25").unwrap_err();
    assert_eq!(err, FlowError::Status(StatusCode::KeyStoreFull));
}

#[test]
fn mistyped_pin_costs_one_retry() {
    let mut b = bench("solo2-like", Transport::Usb, &[]);
    b.user.mistype_next_pin();
    let mut gh = rp("github-like");
    assert_eq!(b.register(&mut gh, "alice").unwrap_err(), FlowError::Status(StatusCode::PinInvalid));
    let retries = b.dev.authenticator().state().pin.total_retries_remaining;
    assert_eq!(retries, INITIAL_PIN_RETRIES - 1);
}

#[test]
fn pin_prompt_outside_uv_flow_alarms() {
    let mut b = bench("solo2-like", Transport::Usb, &[]);
    b.user.begin_flow("get-info", Expectation::new(false, 0));
    let err = b.client.pin_ceremony(&mut b.dev, &mut b.user, None).unwrap_err();
    b.user.end_flow();
    assert_eq!(err, FlowError::PinDeclined);
    assert_eq!(b.user.alarms()[0].reason, AlarmReason::UnexpectedPinPrompt);
}

#[test]
fn weak_templates_sign_in_without_pin() {
    let mut b = bench("solo2-like", Transport::Usb, &[]);
    let mut ms = rp("microsoft-like");
    b.register(&mut ms, "alice").unwrap();
    let entries = b.user.pin_entries();
    let a = b.authenticate(&mut ms, "alice").unwrap();
    assert!(!a.user_verified);
    assert_eq!(b.user.pin_entries(), entries);
}

#[test]
fn reset_breaks_later_sign_in() {
    let mut b = bench("solo2-like", Transport::Nfc, &[]);
    let mut gh = rp("github-like");
    let mut fb = rp("facebook-like");
    b.register(&mut gh, "alice").unwrap();
    b.register(&mut fb, "alice").unwrap();
    let mut nobody = crate::authenticator::NobodyPresent;
    let resp = b.client.call(&mut b.dev, &mut nobody, None, &CtapRequest::reset()).unwrap();
    assert!(resp.is_ok());
    b.client.setup_pin(&mut b.dev, &mut b.user, None).unwrap();
    assert_eq!(b.authenticate(&mut gh, "alice").unwrap_err(), FlowError::Status(StatusCode::NoCredentials));
    assert_eq!(b.authenticate(&mut fb, "alice").unwrap_err(), FlowError::Status(StatusCode::NoCredentials));
}

#[test]
fn relying_party_follows_identifier_rotation() {
    let mut b = bench("solo2-like", Transport::Usb, &[Countermeasure::C5]);
    let mut weak = rp("microsoft-like");
    b.register(&mut weak, "alice").unwrap();
    // The mandated policy cuts off sign-in without UV.
    assert_eq!(b.authenticate(&mut weak, "alice").unwrap_err(), FlowError::Status(StatusCode::NoCredentials));

    let mut ms = rp("github-like");
    let reg = b.register(&mut ms, "alice").unwrap();
    let mut rotated_at = None;
    for i in 1..=12 {
        let a = b.authenticate(&mut ms, "alice").unwrap();
        if a.rotated {
            rotated_at.get_or_insert(i);
        }
    }
    assert_eq!(rotated_at, Some(10));
    assert_ne!(ms.record_for("alice").unwrap().cred_id, reg.cred_id);
    assert!(!b.user.alarmed());
}

#[test]
fn multiple_accounts_pick_the_requested_one() {
    let mut b = bench("solo2-like", Transport::Usb, &[]);
    let mut ms = rp("microsoft-like");
    b.register(&mut ms, "alice").unwrap();
    b.register(&mut ms, "bob").unwrap();
    assert_eq!(b.authenticate(&mut ms, "alice").unwrap().user_name, "alice");
    assert_eq!(b.authenticate(&mut ms, "bob").unwrap().user_name, "bob");
}
