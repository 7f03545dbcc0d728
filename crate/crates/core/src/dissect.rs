//! Turns a frame log back into protocol events.
//!
//! Each input line produces exactly one [`DissectedRecord`]. Frames that
//! only carry part of a message (HID continuations, chained APDUs, `61xx`
//! response pieces) get a record of their own; the CTAP-level decode is
//! attached to the frame that completes the message.

use std::collections::HashMap;
use std::fmt;

use crate::authenticator::Transport;
use crate::cbor::{CborMap, CborValue};
use crate::codec::{Command, CtapRequest, CtapResponse};
use crate::transports::apdu::{self, Apdu, ApduResponse};
use crate::transports::hid::{
    CtapHidFrame, FrameKind, HidCommand, HidErrorCode, InitResponse, KeepaliveStatus, Reassembler,
};
use crate::transports::trace::TraceParseError;
use crate::transports::{Direction, TransportFrame};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DissectedRecord {
    /// Input line number, starting at 1.
    pub line: usize,
    pub timestamp: Option<u64>,
    pub transport: Option<Transport>,
    pub direction: Option<Direction>,
    /// HID packet type (`INIT`, `CBOR`, `KEEPALIVE`, `CONT`...) or APDU role
    /// (`SELECT`, `CTAP_MSG`, `GET_RESPONSE`, `RESPONSE`).
    pub frame_kind: String,
    pub channel: Option<u32>,
    /// Command label for requests, status name for responses.
    pub name: Option<String>,
    pub subcommand: Option<String>,
    pub keepalive: Option<KeepaliveStatus>,
    pub capabilities: Vec<&'static str>,
    pub summary: String,
    /// Milliseconds spent waiting for a touch before this response.
    pub up_wait_ms: Option<u64>,
    pub error: Option<String>,
}

impl DissectedRecord {
    fn new(line: usize, f: &TransportFrame, kind: &str) -> Self {
        DissectedRecord {
            line,
            timestamp: Some(f.timestamp),
            transport: Some(f.transport),
            direction: Some(f.direction),
            frame_kind: kind.into(),
            channel: None,
            name: None,
            subcommand: None,
            keepalive: None,
            capabilities: Vec::new(),
            summary: String::new(),
            up_wait_ms: None,
            error: None,
        }
    }

    fn parse_error(line: usize, err: &TraceParseError) -> Self {
        DissectedRecord {
            line,
            timestamp: None,
            transport: None,
            direction: None,
            frame_kind: "PARSE_ERROR".into(),
            channel: None,
            name: None,
            subcommand: None,
            keepalive: None,
            capabilities: Vec::new(),
            summary: String::new(),
            up_wait_ms: None,
            error: Some(err.to_string()),
        }
    }

    fn fail(mut self, msg: impl ToString) -> Self {
        self.error = Some(msg.to_string());
        self
    }

    pub fn is_error(&self) -> bool {
        self.error.is_some()
    }

    /// Tab-separated fixed columns, `-` for empty.
    pub fn to_machine(&self) -> String {
        let opt = |s: Option<String>| s.filter(|s| !s.is_empty()).unwrap_or_else(|| "-".into());
        let cols = [
            self.line.to_string(),
            opt(self.timestamp.map(|t| t.to_string())),
            opt(self.transport.map(|t| t.to_string())),
            opt(self.direction.map(|d| d.as_str().to_owned())),
            self.frame_kind.clone(),
            opt(self.channel.map(|c| format!("{c:08x}"))),
            opt(self.name.clone()),
            opt(self.subcommand.clone()),
            opt(self.keepalive.map(|k| k.name().to_owned())),
            opt(Some(self.capabilities.join(","))),
            opt(self.up_wait_ms.map(|w| w.to_string())),
            opt(Some(self.summary.clone())),
            opt(self.error.clone()),
        ];
        cols.join("\t")
    }
}

pub const MACHINE_HEADER: &str =
    "line\ttimestamp\ttransport\tdirection\tkind\tchannel\tname\tsubcommand\tkeepalive\tcapabilities\tup_wait_ms\tsummary\terror";

impl fmt::Display for DissectedRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(e) = &self.error {
            if self.timestamp.is_none() {
                return write!(f, "line {}: parse error: {e}", self.line);
            }
        }
        write!(
            f,
            "{:>8} {} {} {:<12}",
            self.timestamp.unwrap_or_default(),
            self.transport.map(|t| t.to_string()).unwrap_or_default(),
            self.direction.map(|d| d.as_str()).unwrap_or_default(),
            self.frame_kind
        )?;
        if let Some(c) = self.channel {
            write!(f, " cid={c:08x}")?;
        }
        if let Some(n) = &self.name {
            write!(f, " {n}")?;
        }
        if let Some(k) = self.keepalive {
            write!(f, " {}", k.name())?;
        }
        if !self.capabilities.is_empty() {
            write!(f, " caps={}", self.capabilities.join("|"))?;
        }
        if let Some(w) = self.up_wait_ms {
            write!(f, " up_wait={w}ms")?;
        }
        if !self.summary.is_empty() {
            write!(f, " {}", self.summary)?;
        }
        if let Some(e) = &self.error {
            write!(f, " error: {e}")?;
        }
        Ok(())
    }
}

#[derive(Default)]
struct HidChannel {
    reassembler: Reassembler,
    waiting_since: Option<u64>,
}

#[derive(Default)]
struct NfcState {
    command: Vec<u8>,
    response: Vec<u8>,
    /// Instruction of the request the pending response belongs to.
    answering: Option<u8>,
}

/// Stateful decoder; feed frames in log order.
#[derive(Default)]
pub struct Dissector {
    hid: HashMap<(u32, Direction), HidChannel>,
    nfc: NfcState,
    line: usize,
}

impl Dissector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: &Result<TransportFrame, TraceParseError>) -> DissectedRecord {
        self.line += 1;
        match entry {
            Ok(f) => match f.transport {
                Transport::Usb => self.usb(f),
                Transport::Nfc => self.nfc(f),
                Transport::Direct => direct(self.line, f),
            },
            Err(e) => DissectedRecord::parse_error(self.line, e),
        }
    }

    fn usb(&mut self, f: &TransportFrame) -> DissectedRecord {
        let frame = match CtapHidFrame::from_report(&f.raw) {
            Ok(fr) => fr,
            Err(e) => return DissectedRecord::new(self.line, f, "HID").fail(e),
        };
        let kind = match frame.kind {
            FrameKind::Init { command, .. } => command.name(),
            FrameKind::Continuation { .. } => "CONT",
        };
        let mut rec = DissectedRecord::new(self.line, f, kind);
        rec.channel = Some(frame.channel_id);
        let ch = self.hid.entry((frame.channel_id, f.direction)).or_default();

        if let FrameKind::Init { command: HidCommand::Keepalive, .. } = frame.kind {
            let status = frame.data.first().and_then(|&c| KeepaliveStatus::from_code(c));
            match status {
                Some(s) => {
                    rec.keepalive = Some(s);
                    if s == KeepaliveStatus::Waiting {
                        ch.waiting_since.get_or_insert(f.timestamp);
                    }
                }
                None => return rec.fail("unknown keepalive status"),
            }
            return rec;
        }

        if let FrameKind::Continuation { seq } = frame.kind {
            rec.summary = format!("seq={seq}");
        }
        let msg = match ch.reassembler.push(&frame) {
            Ok(Some(m)) => m,
            Ok(None) => {
                if let FrameKind::Init { bcnt, .. } = frame.kind {
                    rec.summary = format!("fragment {}/{bcnt}", frame.data.len());
                }
                return rec;
            }
            Err(e) => return rec.fail(e),
        };
        if f.direction == Direction::ToClient {
            rec.up_wait_ms = ch.waiting_since.take().map(|t| f.timestamp - t);
        }
        match (msg.command, f.direction) {
            (HidCommand::Cbor, Direction::ToAuthenticator) => describe_request(&mut rec, &msg.data),
            (HidCommand::Cbor, Direction::ToClient) => describe_response(&mut rec, &msg.data),
            (HidCommand::Init, Direction::ToAuthenticator) => {
                rec.summary = format!("nonce={}", hex::encode(&msg.data));
            }
            (HidCommand::Init, Direction::ToClient) => match InitResponse::decode(&msg.data) {
                Some(r) => {
                    rec.capabilities = r.capability_names();
                    rec.summary = format!(
                        "assigned={:08x} version={}.{}.{}",
                        r.channel_id, r.device_version[0], r.device_version[1], r.device_version[2]
                    );
                }
                None => return rec.fail("short INIT response"),
            },
            (HidCommand::Error, _) => match msg.data.first().and_then(|&c| HidErrorCode::from_code(c)) {
                Some(code) => rec.name = Some(code.name().into()),
                None => return rec.fail("unknown HID error code"),
            },
            (_, _) => rec.summary = format!("len={}", msg.data.len()),
        }
        rec
    }

    fn nfc(&mut self, f: &TransportFrame) -> DissectedRecord {
        match f.direction {
            Direction::ToAuthenticator => self.nfc_command(f),
            Direction::ToClient => self.nfc_response(f),
        }
    }

    fn nfc_command(&mut self, f: &TransportFrame) -> DissectedRecord {
        let a = match Apdu::decode(&f.raw) {
            Ok(a) => a,
            Err(e) => return DissectedRecord::new(self.line, f, "APDU").fail(e),
        };
        let st = &mut self.nfc;
        match a.ins {
            apdu::INS_SELECT => {
                let mut rec = DissectedRecord::new(self.line, f, "SELECT");
                st.answering = Some(a.ins);
                st.response.clear();
                rec.summary = format!("aid={}", hex::encode(&a.data));
                if a.data != apdu::FIDO_AID {
                    rec.summary.push_str(" (not FIDO)");
                }
                rec
            }
            apdu::INS_GET_RESPONSE => DissectedRecord::new(self.line, f, "GET_RESPONSE"),
            apdu::INS_CTAP_MSG => {
                let mut rec = DissectedRecord::new(self.line, f, "CTAP_MSG");
                st.command.extend_from_slice(&a.data);
                if a.chain() {
                    rec.summary = format!("chained {} bytes", st.command.len());
                    st.answering = None;
                    return rec;
                }
                let body = std::mem::take(&mut st.command);
                st.answering = Some(a.ins);
                st.response.clear();
                describe_request(&mut rec, &body);
                rec
            }
            other => DissectedRecord::new(self.line, f, "APDU").fail(format!("unknown INS {other:#04x}")),
        }
    }

    fn nfc_response(&mut self, f: &TransportFrame) -> DissectedRecord {
        let mut rec = DissectedRecord::new(self.line, f, "RESPONSE");
        let r = match ApduResponse::decode(&f.raw) {
            Ok(r) => r,
            Err(e) => return rec.fail(e),
        };
        let st = &mut self.nfc;
        st.response.extend_from_slice(&r.data);
        if r.more_data() {
            rec.summary = format!("sw={:04x} more", r.sw);
            return rec;
        }
        let body = std::mem::take(&mut st.response);
        if r.sw != apdu::SW_OK {
            rec.summary = format!("sw={:04x}", r.sw);
            st.answering = None;
            return rec;
        }
        match st.answering.take() {
            Some(apdu::INS_SELECT) => rec.summary = format!("version={}", String::from_utf8_lossy(&body)),
            Some(apdu::INS_CTAP_MSG) => describe_response(&mut rec, &body),
            _ => rec.summary = if body.is_empty() { "ack".into() } else { format!("len={}", body.len()) },
        }
        rec
    }
}

/// In-process frames are bare CTAP messages.
fn direct(line: usize, f: &TransportFrame) -> DissectedRecord {
    let mut rec = DissectedRecord::new(line, f, "CTAP");
    match f.direction {
        Direction::ToAuthenticator => describe_request(&mut rec, &f.raw),
        Direction::ToClient => describe_response(&mut rec, &f.raw),
    }
    rec
}

/// Dissects a whole log.
pub fn dissect(entries: &[Result<TransportFrame, TraceParseError>]) -> Vec<DissectedRecord> {
    let mut d = Dissector::new();
    entries.iter().map(|e| d.push(e)).collect()
}

fn describe_request(rec: &mut DissectedRecord, body: &[u8]) {
    match CtapRequest::decode(body) {
        Ok(req) => {
            rec.name = Some(req.label());
            rec.subcommand = req.subcommand().map(|s| s.name().to_owned());
            rec.summary = request_summary(&req);
        }
        Err(e) => rec.error = Some(e.to_string()),
    }
}

fn describe_response(rec: &mut DissectedRecord, body: &[u8]) {
    match CtapResponse::decode(body) {
        Ok(resp) => {
            rec.name = Some(resp.status().to_string());
            if let Some(p) = resp.payload() {
                rec.summary = format!("fields={}", keys(p));
            }
        }
        Err(e) => rec.error = Some(e.to_string()),
    }
}

fn keys(m: &CborMap) -> String {
    m.iter().map(|(k, _)| k.to_string()).collect::<Vec<_>>().join(",")
}

fn request_summary(req: &CtapRequest) -> String {
    let Some(p) = req.params() else { return String::new() };
    let mut parts = vec![format!("params={}", keys(p))];
    let rp = match req.command() {
        Command::GetAssertion => p.get_int(1).and_then(CborValue::as_text),
        Command::MakeCredential => p.get_int(2).and_then(CborValue::as_map).and_then(|m| m.get_text("id")).and_then(CborValue::as_text),
        _ => None,
    };
    if let Some(rp) = rp {
        parts.push(format!("rp={rp}"));
    }
    if let Some(opts) = p.get_int(match req.command() {
        Command::MakeCredential => 7,
        Command::GetAssertion => 5,
        _ => 0,
    }) {
        parts.push(format!("options={opts}"));
    }
    parts.join(" ")
}


#[cfg(test)]
mod trace_tests {
    use super::*;
    use crate::attacks::{run_attack_on, AttackId, Testbed, TestbedConfig};

    fn attack_trace(id: AttackId, t: Transport) -> Vec<DissectedRecord> {
        let mut tb = Testbed::new(TestbedConfig::new("solo2-like", t)).unwrap();
        tb.dev.take_trace();
        run_attack_on(id, &mut tb);
        let frames: Vec<_> = tb.dev.take_trace().into_iter().map(Ok).collect();
        dissect(&frames)
    }

    #[test]
    fn ac1_trace_shows_the_delete() {
        for t in [Transport::Usb, Transport::Nfc] {
            let out = attack_trace(AttackId::AC1, t);
            assert!(!out.is_empty());
            assert!(out.iter().all(|r| !r.is_error()), "{:?}", out.iter().find(|r| r.is_error()));
            assert!(out.iter().any(|r| r.name.as_deref() == Some("CredentialManagement(DeleteCredential)")));
        }
    }

    #[test]
    fn usb_touch_waits_are_flagged() {
        let out = attack_trace(AttackId::CI1, Transport::Usb);
        assert!(out.iter().any(|r| r.keepalive == Some(KeepaliveStatus::Waiting)));
        assert!(out.iter().any(|r| r.up_wait_ms.is_some()));
    }
}
