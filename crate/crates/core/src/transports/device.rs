//! The authenticator behind its USB HID and NFC interfaces.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use super::apdu::{self, Apdu, ApduResponse};
use super::hid::{self, CtapHidFrame, FramingError, HidCommand, HidErrorCode, InitResponse, KeepaliveStatus};
use super::trace::{Direction, TransportFrame};
use crate::authenticator::{Authenticator, PhysicalUser, RequestContext, Transport};

pub const KEEPALIVE_INTERVAL_MS: u64 = 100;
pub const FIRST_CHANNEL_ID: u32 = 0x0100_0001;
pub const DEVICE_VERSION: [u8; 3] = [1, 0, 0];

/// A CBOR request accepted on some channel whose response is not out yet.
#[derive(Debug, Clone)]
struct Pending {
    channel_id: u32,
    started_at: u64,
    up_wait_ms: u64,
    ready_at: u64,
    response: Vec<u8>,
}

#[derive(Debug, Clone, Default)]
struct NfcState {
    selected: bool,
    chain: Vec<u8>,
    outgoing: VecDeque<ApduResponse>,
}

/// Wraps an [`Authenticator`] with CTAPHID channel handling and an NFC
/// applet, logging every frame that crosses either interface.
#[derive(Debug, Clone)]
pub struct VirtualDevice {
    auth: Authenticator,
    trace: Vec<TransportFrame>,
    next_cid: u32,
    channels: BTreeSet<u32>,
    rx: BTreeMap<u32, hid::Reassembler>,
    pending: Option<Pending>,
    nfc: NfcState,
}

impl VirtualDevice {
    pub fn new(auth: Authenticator) -> Self {
        VirtualDevice {
            auth,
            trace: Vec::new(),
            next_cid: FIRST_CHANNEL_ID,
            channels: BTreeSet::new(),
            rx: BTreeMap::new(),
            pending: None,
            nfc: NfcState::default(),
        }
    }

    pub fn authenticator(&self) -> &Authenticator {
        &self.auth
    }

    pub fn authenticator_mut(&mut self) -> &mut Authenticator {
        &mut self.auth
    }

    pub fn into_authenticator(self) -> Authenticator {
        self.auth
    }

    pub fn now(&self) -> u64 {
        self.auth.now()
    }

    pub fn advance(&mut self, ms: u64) {
        self.auth.advance(ms);
    }

    /// End of the current busy window, if a response is still outstanding.
    pub fn busy_until(&self) -> Option<u64> {
        self.pending.as_ref().map(|p| p.ready_at)
    }

    pub fn busy_channel(&self) -> Option<u32> {
        self.pending.as_ref().map(|p| p.channel_id)
    }

    /// Drops power: channels, NFC selection and any outstanding work are lost.
    pub fn power_cycle(&mut self) {
        self.auth.power_cycle();
        self.channels.clear();
        self.rx.clear();
        self.pending = None;
        self.nfc = NfcState::default();
    }

    /// Frames logged so far, ordered by timestamp.
    pub fn trace(&self) -> Vec<TransportFrame> {
        let mut out = self.trace.clone();
        super::trace::sort_by_time(&mut out);
        out
    }

    pub fn take_trace(&mut self) -> Vec<TransportFrame> {
        let mut out = std::mem::take(&mut self.trace);
        super::trace::sort_by_time(&mut out);
        out
    }

    fn log(&mut self, at: u64, transport: Transport, direction: Direction, raw: Vec<u8>) {
        self.trace.push(TransportFrame { timestamp: at, transport, direction, raw });
    }

    fn log_hid(&mut self, at: u64, frames: &[CtapHidFrame]) {
        for f in frames {
            self.log(at, Transport::Usb, Direction::ToClient, f.to_report().to_vec());
        }
    }

    fn hid_error(&mut self, cid: u32, code: HidErrorCode) -> Vec<CtapHidFrame> {
        let frames = vec![hid::error_frame(cid, code)];
        self.log_hid(self.now(), &frames);
        frames
    }

    fn busy_for(&self, cid: u32) -> bool {
        self.pending.as_ref().is_some_and(|p| p.channel_id != cid && self.now() < p.ready_at)
    }

    /// Host writes one HID report. Returns frames the device answers with
    /// immediately; a CBOR response is produced later by [`Self::hid_read`].
    pub fn hid_write(
        &mut self,
        report: &[u8; hid::REPORT_LEN],
        client_id: &str,
        user: &mut dyn PhysicalUser,
    ) -> Vec<CtapHidFrame> {
        let now = self.now();
        self.log(now, Transport::Usb, Direction::ToAuthenticator, report.to_vec());
        let cid = u32::from_be_bytes(report[..4].try_into().unwrap());
        let frame = match CtapHidFrame::from_report(report) {
            Ok(f) => f,
            Err(FramingError::UnknownCommand(_)) => return self.hid_error(cid, HidErrorCode::InvalidCmd),
            Err(_) => return self.hid_error(cid, HidErrorCode::Other),
        };
        let is_init_cmd = frame.command() == Some(HidCommand::Init);
        if cid == 0 || (cid == hid::BROADCAST_CID && !is_init_cmd) {
            return self.hid_error(cid, HidErrorCode::InvalidChannel);
        }
        if cid != hid::BROADCAST_CID && !self.channels.contains(&cid) {
            return self.hid_error(cid, HidErrorCode::InvalidChannel);
        }
        if frame.command().is_some() && !is_init_cmd && frame.command() != Some(HidCommand::Cancel) {
            if self.busy_for(cid) {
                return self.hid_error(cid, HidErrorCode::ChannelBusy);
            }
            if self.pending.as_ref().is_some_and(|p| p.channel_id == cid) {
                return self.hid_error(cid, HidErrorCode::ChannelBusy);
            }
        }
        let rx = self.rx.entry(cid).or_default();
        if is_init_cmd {
            rx.abort();
        }
        let message = match rx.push(&frame) {
            Ok(Some(m)) => m,
            Ok(None) => return Vec::new(),
            Err(FramingError::SeqGap { .. }) => return self.hid_error(cid, HidErrorCode::InvalidSeq),
            Err(FramingError::UnexpectedContinuation) => return Vec::new(),
            Err(FramingError::ChannelBusy(_)) => return self.hid_error(cid, HidErrorCode::ChannelBusy),
            Err(FramingError::TooLong(_)) => return self.hid_error(cid, HidErrorCode::InvalidLen),
            Err(_) => return self.hid_error(cid, HidErrorCode::Other),
        };
        self.hid_message(message, client_id, user)
    }

    fn hid_message(
        &mut self,
        msg: hid::HidMessage,
        client_id: &str,
        user: &mut dyn PhysicalUser,
    ) -> Vec<CtapHidFrame> {
        let cid = msg.channel_id;
        let reply = |command, data: &[u8]| hid::fragment(cid, command, data).expect("reply fits");
        let frames = match msg.command {
            HidCommand::Init => {
                let Ok(nonce) = <[u8; hid::INIT_NONCE_LEN]>::try_from(msg.data.as_slice()) else {
                    return self.hid_error(cid, HidErrorCode::InvalidLen);
                };
                let assigned = if cid == hid::BROADCAST_CID {
                    let new = self.next_cid;
                    self.next_cid += 1;
                    self.channels.insert(new);
                    new
                } else {
                    if self.pending.as_ref().is_some_and(|p| p.channel_id == cid) {
                        self.pending = None;
                    }
                    cid
                };
                let body = InitResponse {
                    nonce,
                    channel_id: assigned,
                    protocol_version: hid::PROTOCOL_VERSION,
                    device_version: DEVICE_VERSION,
                    capabilities: hid::CAPABILITY_WINK | hid::CAPABILITY_CBOR | hid::CAPABILITY_NMSG,
                };
                reply(HidCommand::Init, &body.encode())
            }
            HidCommand::Ping => reply(HidCommand::Ping, &msg.data),
            HidCommand::Wink => {
                self.auth.wink();
                reply(HidCommand::Wink, &[])
            }
            HidCommand::Cancel => return Vec::new(),
            HidCommand::Cbor => {
                if msg.data.is_empty() {
                    return self.hid_error(cid, HidErrorCode::InvalidLen);
                }
                let mut ctx = RequestContext::new(Transport::Usb, client_id, user);
                let out = self.auth.process_bytes(&msg.data, &mut ctx);
                let now = self.now();
                self.pending = Some(Pending {
                    channel_id: cid,
                    started_at: now,
                    up_wait_ms: out.up_wait_ms,
                    ready_at: now + out.busy_ms(),
                    response: out.response.encode(),
                });
                return Vec::new();
            }
            HidCommand::Msg | HidCommand::Keepalive | HidCommand::Error => {
                return self.hid_error(cid, HidErrorCode::InvalidCmd);
            }
        };
        self.log_hid(self.now(), &frames);
        frames
    }

    /// Runs the outstanding CBOR request to completion: keepalives every
    /// 100 ms while busy, then the response. Empty when nothing is pending.
    pub fn hid_read(&mut self) -> Vec<CtapHidFrame> {
        let Some(p) = self.pending.take() else {
            return Vec::new();
        };
        let mut frames = Vec::new();
        let mut t = p.started_at + KEEPALIVE_INTERVAL_MS;
        while t < p.ready_at {
            let status = if t - p.started_at < p.up_wait_ms {
                KeepaliveStatus::Waiting
            } else {
                KeepaliveStatus::Processing
            };
            let ka = hid::keepalive(p.channel_id, status);
            self.log_hid(t, std::slice::from_ref(&ka));
            frames.push(ka);
            t += KEEPALIVE_INTERVAL_MS;
        }
        if self.now() < p.ready_at {
            let gap = p.ready_at - self.now();
            self.auth.advance(gap);
        }
        let response = hid::send(p.channel_id, &p.response).expect("response fits");
        self.log_hid(p.ready_at, &response);
        frames.extend(response);
        frames
    }

    /// One NFC command/response exchange. CTAP work completes before the
    /// response is returned, so the clock moves past any UP wait.
    pub fn nfc_transmit(&mut self, raw: &[u8], client_id: &str, user: &mut dyn PhysicalUser) -> Vec<u8> {
        self.log(self.now(), Transport::Nfc, Direction::ToAuthenticator, raw.to_vec());
        let resp = self.nfc_apdu(raw, client_id, user);
        let bytes = resp.encode();
        self.log(self.now(), Transport::Nfc, Direction::ToClient, bytes.clone());
        bytes
    }

    fn nfc_apdu(&mut self, raw: &[u8], client_id: &str, user: &mut dyn PhysicalUser) -> ApduResponse {
        let Ok(cmd) = Apdu::decode(raw) else {
            return ApduResponse::status(apdu::SW_WRONG_LENGTH);
        };
        match cmd.ins {
            apdu::INS_SELECT => {
                if cmd.data == apdu::FIDO_AID {
                    self.nfc = NfcState { selected: true, ..NfcState::default() };
                    ApduResponse { data: apdu::SELECT_RESPONSE.to_vec(), sw: apdu::SW_OK }
                } else {
                    self.nfc.selected = false;
                    ApduResponse::status(apdu::SW_FILE_NOT_FOUND)
                }
            }
            apdu::INS_GET_RESPONSE => self
                .nfc
                .outgoing
                .pop_front()
                .unwrap_or(ApduResponse::status(apdu::SW_CONDITIONS_NOT_SATISFIED)),
            apdu::INS_CTAP_MSG => {
                if cmd.cla & !apdu::CLA_CHAIN_BIT != apdu::CLA_CTAP {
                    return ApduResponse::status(apdu::SW_CLA_NOT_SUPPORTED);
                }
                if !self.nfc.selected || self.busy_for(u32::MAX) {
                    return ApduResponse::status(apdu::SW_CONDITIONS_NOT_SATISFIED);
                }
                self.nfc.outgoing.clear();
                self.nfc.chain.extend_from_slice(&cmd.data);
                if cmd.chain() {
                    return ApduResponse::status(apdu::SW_OK);
                }
                let request = std::mem::take(&mut self.nfc.chain);
                let mut ctx = RequestContext::new(Transport::Nfc, client_id, user);
                let out = self.auth.process_bytes(&request, &mut ctx);
                self.auth.advance(out.busy_ms());
                let mut parts: VecDeque<_> = apdu::split_response(&out.response.encode()).into();
                let first = parts.pop_front().expect("at least one part");
                self.nfc.outgoing = parts;
                first
            }
            _ => ApduResponse::status(apdu::SW_INS_NOT_SUPPORTED),
        }
    }
}
