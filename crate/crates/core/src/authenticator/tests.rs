use super::*;
use crate::codec::ClientPinSub;
use crate::crypto::{aes256_cbc_encrypt, pad_pin, pin_auth, pin_hash};
use crate::messages::{EnumeratedRp, PinSlot};

const PIN: &str = "1234";

fn auth(profile: &str) -> Authenticator {
    Authenticator::new(AuthenticatorConfig::profile(profile).unwrap(), 7)
}

fn with_cms(cms: &[Countermeasure]) -> Authenticator {
    let cfg = AuthenticatorConfig::profile("solo2-like").unwrap().with_countermeasures(cms.iter().copied());
    Authenticator::new(cfg, 7)
}

fn call(a: &mut Authenticator, t: Transport, user: &mut dyn PhysicalUser, req: &CtapRequest) -> CtapResponse {
    a.handle_request(req, &mut RequestContext::new(t, "platform-client", user))
}

fn direct(a: &mut Authenticator, req: &CtapRequest) -> CtapResponse {
    call(a, Transport::Usb, &mut AlwaysPresent::default(), req)
}

/// Client half of the PIN protocol.
struct Pin {
    shared: [u8; 32],
    cose: CborMap,
}

fn agree(a: &mut Authenticator) -> Pin {
    let resp = direct(a, &CtapRequest::client_pin(ClientPinSub::GetKeyAgreement, ClientPinParams::new(ClientPinSub::GetKeyAgreement).to_map()));
    let peer = crate::crypto::cose_to_public_key(resp.field(1).unwrap().as_map().unwrap()).unwrap();
    let mut rng = <ChaCha20Rng as SeedableRng>::seed_from_u64(99);
    let mine = AgreementKey::generate(&mut rng);
    Pin { shared: mine.shared_secret(&peer), cose: mine.public_cose() }
}

fn set_pin_slot(a: &mut Authenticator, pin: &str, slot: PinSlot) -> StatusCode {
    let k = agree(a);
    let enc = aes256_cbc_encrypt(&k.shared, &pad_pin(pin).unwrap()).unwrap();
    let mut p = ClientPinParams::new(ClientPinSub::SetPin);
    p.key_agreement = Some(k.cose);
    p.pin_auth = Some(pin_auth(&k.shared, &enc).to_vec());
    p.new_pin_enc = Some(enc);
    p.slot = slot;
    direct(a, &CtapRequest::client_pin(ClientPinSub::SetPin, p.to_map())).status()
}

fn set_pin(a: &mut Authenticator, pin: &str) {
    assert_eq!(set_pin_slot(a, pin, PinSlot::Normal), StatusCode::Ok);
}

fn token_slot(a: &mut Authenticator, pin: &str, slot: PinSlot) -> Result<[u8; 32], StatusCode> {
    let k = agree(a);
    let mut p = ClientPinParams::new(ClientPinSub::GetPinToken);
    p.key_agreement = Some(k.cose);
    p.pin_hash_enc = Some(aes256_cbc_encrypt(&k.shared, &pin_hash(pin)).unwrap());
    p.slot = slot;
    let resp = direct(a, &CtapRequest::client_pin(ClientPinSub::GetPinToken, p.to_map()));
    if !resp.is_ok() {
        return Err(resp.status());
    }
    let enc = resp.field(2).unwrap().as_bytes().unwrap();
    Ok(crate::crypto::aes256_cbc_decrypt(&k.shared, enc).unwrap().try_into().unwrap())
}

fn token(a: &mut Authenticator, pin: &str) -> Result<[u8; 32], StatusCode> {
    token_slot(a, pin, PinSlot::Normal)
}

fn mc(rp: &str, user: u8, rk: bool, tok: Option<&[u8; 32]>) -> CtapRequest {
    let cdh = [user; 32];
    let p = MakeCredentialParams {
        client_data_hash: cdh,
        rp_id: rp.into(),
        user_id: vec![user; 32],
        user_name: format!("user{user}"),
        rk,
        cred_protect: None,
        cred_blob: None,
        pin_auth: tok.map(|t| pin_auth(t, &cdh).to_vec()),
        pin_protocol: tok.map(|_| 1),
    };
    CtapRequest::make_credential(p.to_map())
}

fn mc_policy(rp: &str, user: u8, policy: ProtectPolicy, tok: Option<&[u8; 32]>) -> CtapRequest {
    let mut p = MakeCredentialParams::from_map(mc(rp, user, true, tok).params().unwrap()).unwrap();
    p.cred_protect = Some(policy);
    CtapRequest::make_credential(p.to_map())
}

fn ga(rp: &str, up: bool, tok: Option<&[u8; 32]>) -> CtapRequest {
    let mut p = GetAssertionParams::new(rp, [5; 32]);
    p.up = up;
    if let Some(t) = tok {
        p.pin_auth = Some(pin_auth(t, &[5; 32]).to_vec());
        p.pin_protocol = Some(1);
    }
    CtapRequest::get_assertion(p.to_map())
}

fn cm(sub: CredMgmtSub, tok: &[u8; 32], f: impl FnOnce(&mut CredMgmtParams)) -> CtapRequest {
    let mut p = CredMgmtParams::new(sub);
    f(&mut p);
    p.protocol = Some(1);
    p.pin_auth = Some(pin_auth(tok, &p.auth_message()).to_vec());
    CtapRequest::cred_mgmt(sub, p.to_map())
}

#[test]
fn get_info_reflects_profile_and_pin() {
    let mut a = auth("yubikey5-like");
    let info = direct(&mut a, &CtapRequest::get_info());
    let opts = info.field(4).unwrap().as_map().unwrap();
    assert_eq!(opts.get_text("clientPin").unwrap().as_bool(), Some(false));
    assert_eq!(info.field(INFO_MAX_DISCOVERABLE_KEY).unwrap().as_u64(), Some(25));
    let versions = info.field(1).unwrap().as_array().unwrap();
    assert!(versions.iter().any(|v| v.as_text() == Some("FIDO_2_1")));
    set_pin(&mut a, PIN);
    let info = direct(&mut a, &CtapRequest::get_info());
    let opts = info.field(4).unwrap().as_map().unwrap();
    assert_eq!(opts.get_text("clientPin").unwrap().as_bool(), Some(true));
}

#[test]
fn get_info_allowed_while_soft_locked() {
    let mut a = auth("solo2-like");
    set_pin(&mut a, PIN);
    for _ in 0..3 {
        let _ = token(&mut a, "0000");
    }
    assert!(a.state().pin.soft_locked);
    assert!(direct(&mut a, &CtapRequest::get_info()).is_ok());
    assert_eq!(direct(&mut a, &ga("x.com", false, None)).status(), StatusCode::PinAuthBlocked);
}

#[test]
fn untrusted_client_rejected_under_c1() {
    let cfg = AuthenticatorConfig::profile("solo2-like")
        .unwrap()
        .with_countermeasures([Countermeasure::C1])
        .with_trusted_client("platform-client");
    let mut a = Authenticator::new(cfg, 1);
    let mut user = AlwaysPresent::default();
    let mut ctx = RequestContext::new(Transport::Usb, "attacker-app", &mut user);
    let r = a.handle_request(&mc("x.com", 1, true, None), &mut ctx);
    assert_eq!(r.status(), StatusCode::ClientNotTrusted);
    assert_eq!(a.last_block(), Some(Countermeasure::C1));
    assert!(direct(&mut a, &mc("x.com", 1, true, None)).is_ok());
}

#[test]
fn pin_retry_mechanics() {
    let mut a = auth("solo2-like");
    set_pin(&mut a, PIN);
    assert_eq!(token(&mut a, "9999"), Err(StatusCode::PinInvalid));
    assert_eq!(a.state().pin.total_retries_remaining, 7);
    assert_eq!(token(&mut a, "9999"), Err(StatusCode::PinInvalid));
    assert_eq!(token(&mut a, "9999"), Err(StatusCode::PinAuthBlocked));
    assert!(a.state().pin.soft_locked);
    // Blocked until a new session.
    let retries = CtapRequest::client_pin(ClientPinSub::GetRetries, CborMap::new());
    assert_eq!(direct(&mut a, &retries).status(), StatusCode::PinAuthBlocked);
    a.power_cycle();
    assert!(token(&mut a, PIN).is_ok());
    for _ in 0..2 {
        let _ = token(&mut a, "9999");
    }
    a.power_cycle();
    for _ in 0..2 {
        let _ = token(&mut a, "9999");
    }
    a.power_cycle();
    assert_eq!(token(&mut a, "9999"), Err(StatusCode::PinBlocked));
    assert!(a.state().pin.hard_locked);
    a.power_cycle();
    assert_eq!(direct(&mut a, &ga("x.com", false, None)).status(), StatusCode::PinBlocked);
    assert!(direct(&mut a, &CtapRequest::reset()).is_ok());
    assert!(!a.state().pin.hard_locked);
    assert_eq!(a.state().pin.total_retries_remaining, 8);
}

#[test]
fn set_pin_policy_and_preconditions() {
    let mut a = auth("solo2-like");
    assert_eq!(token(&mut a, PIN), Err(StatusCode::PinNotSet));
    assert_eq!(set_pin_slot(&mut a, "123", PinSlot::Normal), StatusCode::PinPolicyViolation);
    assert_eq!(set_pin_slot(&mut a, &"é".repeat(31), PinSlot::Normal), StatusCode::Ok);
    assert_eq!(set_pin_slot(&mut a, PIN, PinSlot::Normal), StatusCode::NotAllowed);
    assert_eq!(set_pin_slot(&mut a, PIN, PinSlot::Destructive), StatusCode::InvalidParameter);
}

#[test]
fn token_decrypts_under_independent_ecdh_and_aes() {
    use aes::cipher::{BlockDecrypt, KeyInit};
    use sha2::Digest;

    let mut a = auth("solo2-like");
    set_pin(&mut a, PIN);
    let resp = direct(&mut a, &CtapRequest::client_pin(ClientPinSub::GetKeyAgreement, ClientPinParams::new(ClientPinSub::GetKeyAgreement).to_map()));
    let ka = resp.field(1).unwrap().as_map().unwrap();
    let x = ka.get_int(-2).unwrap().as_bytes().unwrap();
    let y = ka.get_int(-3).unwrap().as_bytes().unwrap();
    let mut sec1 = vec![4u8];
    sec1.extend_from_slice(x);
    sec1.extend_from_slice(y);
    let peer = p256::PublicKey::from_sec1_bytes(&sec1).unwrap();
    let eph = p256::ecdh::EphemeralSecret::random(&mut <ChaCha20Rng as SeedableRng>::seed_from_u64(3));
    let shared: [u8; 32] = sha2::Sha256::digest(eph.diffie_hellman(&peer).raw_secret_bytes()).into();
    let cose = crate::crypto::public_key_to_cose(&eph.public_key(), -25);

    // CBC with a zero IV over one block is a single block encryption.
    let cipher = aes::Aes256::new((&shared).into());
    let mut ph = crate::crypto::pin_hash(PIN);
    aes::cipher::BlockEncrypt::encrypt_block(&cipher, (&mut ph).into());
    let mut p = ClientPinParams::new(ClientPinSub::GetPinToken);
    p.key_agreement = Some(cose);
    p.pin_hash_enc = Some(ph.to_vec());
    let resp = direct(&mut a, &CtapRequest::client_pin(ClientPinSub::GetPinToken, p.to_map()));
    let enc = resp.field(2).unwrap().as_bytes().unwrap().to_vec();
    assert_eq!(enc.len(), 32);
    let mut b0: [u8; 16] = enc[..16].try_into().unwrap();
    let mut b1: [u8; 16] = enc[16..].try_into().unwrap();
    cipher.decrypt_block((&mut b0).into());
    cipher.decrypt_block((&mut b1).into());
    let mut tok = b0.to_vec();
    tok.extend(b1.iter().zip(&enc[..16]).map(|(a, b)| a ^ b));
    assert_eq!(tok, a.state().valid_token().unwrap().token);
}

#[test]
fn make_credential_requirements() {
    let mut a = auth("yubikey5-like");
    set_pin(&mut a, PIN);
    assert_eq!(direct(&mut a, &mc("x.com", 1, true, None)).status(), StatusCode::PinRequired);
    let t = token(&mut a, PIN).unwrap();
    assert_eq!(
        direct(&mut a, &mc("x.com", 1, true, Some(&[0; 32]))).status(),
        StatusCode::PinAuthInvalid
    );
    let r = call(&mut a, Transport::Usb, &mut NobodyPresent, &mc("x.com", 1, true, Some(&t)));
    assert_eq!(r.status(), StatusCode::UpRequired);
    assert_eq!(a.state().discoverable_count(), 0);
    let r = direct(&mut a, &mc("x.com", 1, true, Some(&t)));
    assert!(r.is_ok());
    assert_eq!(a.state().discoverable_count(), 1);
    let att = AttestationObject::from_map(r.payload().unwrap()).unwrap();
    let ad = AuthData::parse(&att.auth_data).unwrap();
    let acred = ad.attested.unwrap();
    assert_eq!(acred.cred_id.len(), CRED_ID_LEN);
    let mut signed = att.auth_data.clone();
    signed.extend_from_slice(&[1; 32]);
    assert!(crate::crypto::verify(&acred.public_key, &signed, &att.signature));
}

#[test]
fn store_fills_at_profile_capacity() {
    let mut a = auth("yubikey5-like");
    for i in 0..25 {
        assert!(direct(&mut a, &mc("x.com", i, true, None)).is_ok());
    }
    assert_eq!(direct(&mut a, &mc("x.com", 200, true, None)).status(), StatusCode::KeyStoreFull);
    // Same account replaces instead of growing.
    assert!(direct(&mut a, &mc("x.com", 3, true, None)).is_ok());
    // Non-discoverable credentials take no slot.
    assert!(direct(&mut a, &mc("y.com", 201, false, None)).is_ok());
    assert_eq!(a.state().discoverable_count(), 25);
}

#[test]
fn get_assertion_policy_filtering() {
    let mut a = auth("solo2-like");
    set_pin(&mut a, PIN);
    let t = token(&mut a, PIN).unwrap();
    assert!(direct(&mut a, &mc("weak.com", 1, true, Some(&t))).is_ok());
    let t = token(&mut a, PIN).unwrap();
    assert!(direct(&mut a, &mc_policy("strong.com", 2, ProtectPolicy::UvRequired, Some(&t))).is_ok());

    let before = a.presence_requests();
    let r = call(&mut a, Transport::Usb, &mut NobodyPresent, &ga("weak.com", false, None));
    assert!(r.is_ok());
    assert_eq!(a.presence_requests(), before);
    let asr = AssertionResponse::from_map(r.payload().unwrap()).unwrap();
    assert_eq!(asr.user_id, Some(vec![1; 32]));
    assert_eq!(asr.user_name, None);

    assert_eq!(direct(&mut a, &ga("strong.com", false, None)).status(), StatusCode::NoCredentials);
    assert_eq!(direct(&mut a, &ga("nobody.com", false, None)).status(), StatusCode::NoCredentials);
    let t = token(&mut a, PIN).unwrap();
    let r = direct(&mut a, &ga("strong.com", true, Some(&t)));
    let asr = AssertionResponse::from_map(r.payload().unwrap()).unwrap();
    assert_eq!(asr.user_name.as_deref(), Some("user2"));
    let flags = AuthData::parse(&asr.auth_data).unwrap().flags;
    assert_eq!(flags & (FLAG_UP | FLAG_UV), FLAG_UP | FLAG_UV);
}

#[test]
fn cred_id_list_policy_and_non_discoverable() {
    let mut a = auth("solo2-like");
    let r = direct(&mut a, &mc_policy("list.com", 1, ProtectPolicy::UvOptionalWithCredIdList, None));
    let att = AttestationObject::from_map(r.payload().unwrap()).unwrap();
    let id = AuthData::parse(&att.auth_data).unwrap().attested.unwrap().cred_id;
    assert_eq!(direct(&mut a, &ga("list.com", false, None)).status(), StatusCode::NoCredentials);
    let mut p = GetAssertionParams::new("list.com", [0; 32]);
    p.allow_list = vec![id];
    p.up = false;
    assert!(direct(&mut a, &CtapRequest::get_assertion(p.to_map())).is_ok());

    let r = direct(&mut a, &mc("nd.com", 2, false, None));
    let att = AttestationObject::from_map(r.payload().unwrap()).unwrap();
    let id = AuthData::parse(&att.auth_data).unwrap().attested.unwrap().cred_id;
    let mut p = GetAssertionParams::new("nd.com", [0; 32]);
    p.allow_list = vec![id.clone()];
    let r = direct(&mut a, &CtapRequest::get_assertion(p.to_map()));
    let asr = AssertionResponse::from_map(r.payload().unwrap()).unwrap();
    assert_eq!(asr.user_id, None);
    // A different relying party cannot use the id.
    let mut p = GetAssertionParams::new("other.com", [0; 32]);
    p.allow_list = vec![id];
    assert_eq!(direct(&mut a, &CtapRequest::get_assertion(p.to_map())).status(), StatusCode::NoCredentials);
}

#[test]
fn multiple_assertions_and_next() {
    let mut a = auth("solo2-like");
    for u in 1..=3 {
        assert!(direct(&mut a, &mc("x.com", u, true, None)).is_ok());
        a.advance(10);
    }
    let r = direct(&mut a, &ga("x.com", false, None));
    let first = AssertionResponse::from_map(r.payload().unwrap()).unwrap();
    assert_eq!(first.number_of_credentials, Some(3));
    assert_eq!(first.user_id, Some(vec![3; 32]));
    let mut seen = vec![first.user_id.unwrap()];
    for _ in 0..2 {
        let r = direct(&mut a, &CtapRequest::get_next_assertion());
        seen.push(AssertionResponse::from_map(r.payload().unwrap()).unwrap().user_id.unwrap());
    }
    assert_eq!(seen, [vec![3; 32], vec![2; 32], vec![1; 32]]);
    assert_eq!(direct(&mut a, &CtapRequest::get_next_assertion()).status(), StatusCode::NotAllowed);
}

#[test]
fn nfc_grants_presence_implicitly() {
    let mut a = auth("solo2-like");
    let r = call(&mut a, Transport::Nfc, &mut NobodyPresent, &mc("x.com", 1, true, None));
    assert!(r.is_ok());
    assert!(call(&mut a, Transport::Nfc, &mut NobodyPresent, &ga("x.com", true, None)).is_ok());
    assert!(call(&mut a, Transport::Nfc, &mut NobodyPresent, &CtapRequest::selection()).is_ok());
    assert_eq!(a.presence_requests(), 0);
}

#[test]
fn c3_requires_button_over_nfc() {
    let mut a = with_cms(&[Countermeasure::C3]);
    assert!(direct(&mut a, &mc("x.com", 1, true, None)).is_ok());
    let r = call(&mut a, Transport::Nfc, &mut NobodyPresent, &ga("x.com", false, None));
    assert_eq!(r.status(), StatusCode::UpRequired);
    assert_eq!(a.last_block(), Some(Countermeasure::C3));
    let r = call(&mut a, Transport::Nfc, &mut NobodyPresent, &CtapRequest::reset());
    assert_eq!(r.status(), StatusCode::UpRequired);
    assert_eq!(a.state().discoverable_count(), 1);
    let mut presser = AlwaysPresent::default();
    assert!(call(&mut a, Transport::Nfc, &mut presser, &CtapRequest::reset()).is_ok());
    assert_eq!(presser.requests.len(), 1);
}

#[test]
fn reset_usb_window() {
    let mut a = auth("solo2-like");
    a.advance(USB_RESET_WINDOW_MS);
    assert!(direct(&mut a, &CtapRequest::reset()).is_ok());
    let mut a = auth("solo2-like");
    a.advance(USB_RESET_WINDOW_MS + 1);
    assert_eq!(direct(&mut a, &CtapRequest::reset()).status(), StatusCode::NotAllowed);
    a.power_cycle();
    assert!(direct(&mut a, &CtapRequest::reset()).is_ok());
}

#[test]
fn reset_rotates_master_key_and_invalidates_everything() {
    let mut a = auth("solo2-like");
    set_pin(&mut a, PIN);
    let t = token(&mut a, PIN).unwrap();
    let r = direct(&mut a, &mc("nd.com", 2, false, Some(&t)));
    let att = AttestationObject::from_map(r.payload().unwrap()).unwrap();
    let nd_id = AuthData::parse(&att.auth_data).unwrap().attested.unwrap().cred_id;
    let t = token(&mut a, PIN).unwrap();
    assert!(direct(&mut a, &mc("x.com", 1, true, Some(&t))).is_ok());
    let master = a.state().master_key;
    let old_pk = a.state().credentials[0].public_key();

    let r = call(&mut a, Transport::Nfc, &mut NobodyPresent, &CtapRequest::reset());
    assert!(r.is_ok());
    assert_eq!(a.state().credentials.len(), 0);
    assert_ne!(a.state().master_key, master);
    assert!(a.state().valid_token().is_none());
    assert!(!a.state().pin.is_set());
    assert_eq!(direct(&mut a, &mc("x.com", 1, true, Some(&t))).status(), StatusCode::PinNotSet);
    let mut p = GetAssertionParams::new("nd.com", [0; 32]);
    p.allow_list = vec![nd_id];
    assert_eq!(direct(&mut a, &CtapRequest::get_assertion(p.to_map())).status(), StatusCode::NoCredentials);
    assert!(direct(&mut a, &mc("x.com", 1, true, None)).is_ok());
    assert_ne!(a.state().credentials[0].public_key(), old_pk);
}

#[test]
fn reset_under_c6_and_c4() {
    let mut a = with_cms(&[Countermeasure::C6]);
    set_pin(&mut a, PIN);
    assert_eq!(direct(&mut a, &CtapRequest::reset()).status(), StatusCode::PinRequired);
    assert_eq!(a.last_block(), Some(Countermeasure::C6));
    token(&mut a, PIN).unwrap();
    direct(&mut a, &CtapRequest::get_info());
    assert_eq!(direct(&mut a, &CtapRequest::reset()).status(), StatusCode::PinRequired);
    token(&mut a, PIN).unwrap();
    assert!(direct(&mut a, &CtapRequest::reset()).is_ok());

    let mut a = with_cms(&[Countermeasure::C4]);
    set_pin(&mut a, PIN);
    assert_eq!(set_pin_slot(&mut a, "87654321", PinSlot::Destructive), StatusCode::Ok);
    token(&mut a, PIN).unwrap();
    assert_eq!(direct(&mut a, &CtapRequest::reset()).status(), StatusCode::PinRequired);
    assert_eq!(a.last_block(), Some(Countermeasure::C4));
    token_slot(&mut a, "87654321", PinSlot::Destructive).unwrap();
    assert!(direct(&mut a, &CtapRequest::reset()).is_ok());
}

#[test]
fn selection_and_rate_limit() {
    let mut a = auth("yubikey5-like");
    assert_eq!(direct(&mut a, &CtapRequest::selection()).status(), StatusCode::NotSupported);

    let mut a = auth("solo2-like");
    let mut user = AlwaysPresent { delay_ms: 500, requests: vec![] };
    let mut ctx = RequestContext::new(Transport::Usb, "c", &mut user);
    let p = a.process(&CtapRequest::selection(), &mut ctx);
    assert!(p.response.is_ok());
    assert_eq!(p.up_wait_ms, 500);
    let mut nobody = NobodyPresent;
    let mut ctx = RequestContext::new(Transport::Usb, "c", &mut nobody);
    let p = a.process(&CtapRequest::selection(), &mut ctx);
    assert_eq!(p.response.status(), StatusCode::UserActionTimeout);
    assert_eq!(p.up_wait_ms, UP_TIMEOUT_MS);

    let mut a = with_cms(&[Countermeasure::C8]);
    for t in [0, 5_000, 10_000] {
        a.advance(t - a.now().min(t));
        assert!(direct(&mut a, &CtapRequest::selection()).is_ok());
    }
    a.advance(60_000 - a.now());
    assert_eq!(direct(&mut a, &CtapRequest::selection()).status(), StatusCode::RateLimited);
    assert_eq!(a.last_block(), Some(Countermeasure::C8));
    a.advance(120_001 - a.now());
    assert!(direct(&mut a, &CtapRequest::selection()).is_ok());
}

#[test]
fn feedback_blinks() {
    let mut a = with_cms(&[Countermeasure::C2]);
    direct(&mut a, &ga("x.com", false, None));
    call(&mut a, Transport::Nfc, &mut NobodyPresent, &CtapRequest::reset());
    let blinks: Vec<u8> = a.feedback_log().iter().map(|e| e.blinks).collect();
    assert_eq!(blinks, [1, 2]);
    assert!(!a.wink());
    a.advance(FEEDBACK_DURATION_MS);
    assert!(a.wink());

    let mut a = auth("solo2-like");
    direct(&mut a, &CtapRequest::reset());
    assert!(a.feedback_log().is_empty());
}

fn populate(a: &mut Authenticator, rps: &[&str]) {
    for (i, rp) in rps.iter().enumerate() {
        assert!(direct(a, &mc(rp, i as u8 + 1, true, None)).is_ok());
    }
}

#[test]
fn credential_management_flow() {
    let mut a = auth("solo2-like");
    populate(&mut a, &["a.com", "b.com", "b.com"]);
    set_pin(&mut a, PIN);
    let t = token(&mut a, PIN).unwrap();
    let r = direct(&mut a, &cm(CredMgmtSub::GetCredsMetadata, &t, |_| {}));
    assert_eq!(r.field(1).unwrap().as_u64(), Some(3));
    assert_eq!(r.field(2).unwrap().as_u64(), Some(47));
    let r = direct(&mut a, &cm(CredMgmtSub::EnumerateRpsBegin, &t, |_| {}));
    let first = EnumeratedRp::from_map(r.payload().unwrap()).unwrap();
    assert_eq!((first.rp_id.as_str(), first.total), ("a.com", Some(2)));
    let next = CtapRequest::cred_mgmt(CredMgmtSub::EnumerateRpsGetNextRp, CborMap::new());
    let r = direct(&mut a, &next);
    assert_eq!(EnumeratedRp::from_map(r.payload().unwrap()).unwrap().rp_id, "b.com");
    assert_eq!(direct(&mut a, &next).status(), StatusCode::NotAllowed);

    let hash = crate::crypto::sha256(b"b.com");
    let r = direct(&mut a, &cm(CredMgmtSub::EnumerateCredentialsBegin, &t, |p| p.rp_id_hash = Some(hash)));
    let c1 = crate::messages::EnumeratedCredential::from_map(r.payload().unwrap()).unwrap();
    assert_eq!(c1.total, Some(2));
    let r = direct(&mut a, &CtapRequest::cred_mgmt(CredMgmtSub::EnumerateCredentialsGetNextCredential, CborMap::new()));
    let c2 = crate::messages::EnumeratedCredential::from_map(r.payload().unwrap()).unwrap();
    for id in [c1.cred_id, c2.cred_id.clone()] {
        let mut none = NobodyPresent;
        let r = call(&mut a, Transport::Usb, &mut none, &cm(CredMgmtSub::DeleteCredential, &t, |p| p.credential_id = Some(id)));
        assert!(r.is_ok());
    }
    assert_eq!(a.state().discoverable_count(), 1);
    let r = direct(&mut a, &cm(CredMgmtSub::DeleteCredential, &t, |p| p.credential_id = Some(c2.cred_id)));
    assert_eq!(r.status(), StatusCode::InvalidParameter);
    assert_eq!(direct(&mut a, &cm(CredMgmtSub::GetCredsMetadata, &[9; 32], |_| {})).status(), StatusCode::PinAuthInvalid);
}

#[test]
fn next_rp_without_begin() {
    let rps = ["a.com", "b.com", "c.com", "d.com", "e.com"];
    let next = CtapRequest::cred_mgmt(CredMgmtSub::EnumerateRpsGetNextRp, CborMap::new());

    let mut a = auth("solo2-like");
    populate(&mut a, &rps);
    assert_eq!(direct(&mut a, &next).status(), StatusCode::NotAllowed);

    let mut cfg = AuthenticatorConfig::profile("solo2-like").unwrap();
    cfg.cve_2024_35311 = true;
    let mut a = Authenticator::new(cfg.clone(), 3);
    populate(&mut a, &rps);
    let mut leaked = Vec::new();
    loop {
        let r = direct(&mut a, &next);
        let Some(p) = r.payload() else { break };
        leaked.push(EnumeratedRp::from_map(p).unwrap().rp_id);
    }
    assert_eq!(leaked, ["b.com", "c.com", "d.com", "e.com"]);

    let mut a = Authenticator::new(cfg, 3);
    populate(&mut a, &["solo.com"]);
    assert_eq!(direct(&mut a, &next).status(), StatusCode::NotAllowed);
}

#[test]
fn c7_needs_presence_per_deletion() {
    let mut a = with_cms(&[Countermeasure::C7]);
    populate(&mut a, &["a.com"]);
    set_pin(&mut a, PIN);
    let t = token(&mut a, PIN).unwrap();
    let id = a.state().credentials[0].cred_id.clone();
    let del = cm(CredMgmtSub::DeleteCredential, &t, |p| p.credential_id = Some(id));
    let r = call(&mut a, Transport::Usb, &mut NobodyPresent, &del);
    assert_eq!(r.status(), StatusCode::UpRequired);
    assert_eq!(a.last_block(), Some(Countermeasure::C7));
    assert!(direct(&mut a, &del).is_ok());
}

#[test]
fn c5_rotates_identifiers() {
    let mut a = with_cms(&[Countermeasure::C5]);
    populate(&mut a, &["x.com"]);
    assert_eq!(a.state().credentials[0].protect_policy, ProtectPolicy::UvRequired);
    set_pin(&mut a, PIN);
    let mut ids = Vec::new();
    for _ in 0..10 {
        let t = token(&mut a, PIN).unwrap();
        let r = direct(&mut a, &ga("x.com", false, Some(&t)));
        let asr = AssertionResponse::from_map(r.payload().unwrap()).unwrap();
        ids.push((asr.cred_id, asr.user_id.unwrap()));
    }
    assert!(ids[..9].iter().all(|x| x == &ids[0]));
    assert_ne!(ids[9].0, ids[0].0);
    assert_ne!(ids[9].1, ids[0].1);

    let mut a = auth("solo2-like");
    populate(&mut a, &["x.com"]);
    let first = direct(&mut a, &ga("x.com", false, None));
    for _ in 0..25 {
        assert_eq!(direct(&mut a, &ga("x.com", false, None)).field(1), first.field(1));
    }
}

#[test]
fn raw_bytes_errors() {
    let mut a = auth("solo2-like");
    let mut user = NobodyPresent;
    let mut ctx = RequestContext::new(Transport::Usb, "c", &mut user);
    assert_eq!(a.process_bytes(&[0x03], &mut ctx).response.status(), StatusCode::InvalidCommand);
    assert_eq!(a.process_bytes(&[0x01, 0xff], &mut ctx).response.status(), StatusCode::InvalidCbor);
    assert_eq!(a.process_bytes(&[0x01, 0xa0], &mut ctx).response.status(), StatusCode::MissingParameter);
    assert!(a.process_bytes(&[0x04], &mut ctx).response.is_ok());
}

#[test]
fn snapshot_round_trip() {
    let mut a = with_cms(&[Countermeasure::C5, Countermeasure::C8]);
    populate(&mut a, &["a.com", "b.com"]);
    set_pin(&mut a, PIN);
    let _ = token(&mut a, "0000");
    direct(&mut a, &CtapRequest::selection());
    let text = a.to_snapshot();
    let mut b = Authenticator::from_snapshot(&text).unwrap();
    assert_eq!(b.to_snapshot(), text);
    assert_eq!(b.state().master_key, a.state().master_key);
    assert_eq!(b.state().pin, a.state().pin);
    assert_eq!(b.state().credentials, a.state().credentials);
    assert_eq!(b.config(), a.config());
    assert_eq!(direct(&mut b, &CtapRequest::get_info()), direct(&mut a, &CtapRequest::get_info()));
    // Continued RNG stream matches too.
    assert_eq!(direct(&mut b, &mc("c.com", 9, false, None)).status(), StatusCode::PinRequired);
    let ta = token(&mut a, PIN).unwrap();
    let tb = token(&mut b, PIN).unwrap();
    assert_eq!(ta, tb);
}

#[test]
fn snapshot_restores_after_reset() {
    let mut a = auth("solo2-like");
    populate(&mut a, &["a.com"]);
    let saved = a.to_snapshot();
    call(&mut a, Transport::Nfc, &mut NobodyPresent, &CtapRequest::reset());
    assert_eq!(a.state().credentials.len(), 0);
    let a = Authenticator::from_snapshot(&saved).unwrap();
    assert_eq!(a.state().credentials.len(), 1);
}

#[test]
fn snapshot_tamper_detected() {
    let a = auth("solo2-like");
    let text = a.to_snapshot().replace("pin.retries=8", "pin.retries=9");
    assert!(matches!(Authenticator::from_snapshot(&text), Err(SnapshotError::ChecksumMismatch)));
    assert!(matches!(Authenticator::from_snapshot("hello\nworld\n"), Err(SnapshotError::BadHeader)));
}
