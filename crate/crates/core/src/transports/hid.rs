//! CTAPHID packet framing.

use std::fmt;

use thiserror::Error;

pub const REPORT_LEN: usize = 64;
pub const INIT_DATA_LEN: usize = REPORT_LEN - 7;
pub const CONT_DATA_LEN: usize = REPORT_LEN - 5;
/// 57 bytes in the init packet plus 128 continuations of 59.
pub const MAX_MESSAGE_LEN: usize = INIT_DATA_LEN + 128 * CONT_DATA_LEN;
pub const BROADCAST_CID: u32 = 0xffff_ffff;

pub const CAPABILITY_WINK: u8 = 0x01;
pub const CAPABILITY_CBOR: u8 = 0x04;
pub const CAPABILITY_NMSG: u8 = 0x08;

pub const INIT_NONCE_LEN: usize = 8;
pub const PROTOCOL_VERSION: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum HidCommand {
    Ping,
    Msg,
    Init,
    Wink,
    Cbor,
    Cancel,
    Keepalive,
    Error,
}

impl HidCommand {
    pub const ALL: [HidCommand; 8] = [
        HidCommand::Ping,
        HidCommand::Msg,
        HidCommand::Init,
        HidCommand::Wink,
        HidCommand::Cbor,
        HidCommand::Cancel,
        HidCommand::Keepalive,
        HidCommand::Error,
    ];

    pub fn code(self) -> u8 {
        match self {
            HidCommand::Ping => 0x01,
            HidCommand::Msg => 0x03,
            HidCommand::Init => 0x06,
            HidCommand::Wink => 0x08,
            HidCommand::Cbor => 0x10,
            HidCommand::Cancel => 0x11,
            HidCommand::Keepalive => 0x3b,
            HidCommand::Error => 0x3f,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            HidCommand::Ping => "PING",
            HidCommand::Msg => "MSG",
            HidCommand::Init => "INIT",
            HidCommand::Wink => "WINK",
            HidCommand::Cbor => "CBOR",
            HidCommand::Cancel => "CANCEL",
            HidCommand::Keepalive => "KEEPALIVE",
            HidCommand::Error => "ERROR",
        }
    }
}

impl fmt::Display for HidCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeepaliveStatus {
    Processing,
    Waiting,
}

impl KeepaliveStatus {
    pub fn code(self) -> u8 {
        match self {
            KeepaliveStatus::Processing => 0x01,
            KeepaliveStatus::Waiting => 0x02,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0x01 => Some(KeepaliveStatus::Processing),
            0x02 => Some(KeepaliveStatus::Waiting),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KeepaliveStatus::Processing => "PROCESSING",
            KeepaliveStatus::Waiting => "WAITING",
        }
    }
}

/// Error codes carried in a CTAPHID ERROR response.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HidErrorCode {
    InvalidCmd,
    InvalidPar,
    InvalidLen,
    InvalidSeq,
    MsgTimeout,
    ChannelBusy,
    LockRequired,
    InvalidChannel,
    Other,
}

impl HidErrorCode {
    const ALL: [HidErrorCode; 9] = [
        HidErrorCode::InvalidCmd,
        HidErrorCode::InvalidPar,
        HidErrorCode::InvalidLen,
        HidErrorCode::InvalidSeq,
        HidErrorCode::MsgTimeout,
        HidErrorCode::ChannelBusy,
        HidErrorCode::LockRequired,
        HidErrorCode::InvalidChannel,
        HidErrorCode::Other,
    ];

    pub fn code(self) -> u8 {
        match self {
            HidErrorCode::InvalidCmd => 0x01,
            HidErrorCode::InvalidPar => 0x02,
            HidErrorCode::InvalidLen => 0x03,
            HidErrorCode::InvalidSeq => 0x04,
            HidErrorCode::MsgTimeout => 0x05,
            HidErrorCode::ChannelBusy => 0x06,
            HidErrorCode::LockRequired => 0x0a,
            HidErrorCode::InvalidChannel => 0x0b,
            HidErrorCode::Other => 0x7f,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            HidErrorCode::InvalidCmd => "ERR_INVALID_CMD",
            HidErrorCode::InvalidPar => "ERR_INVALID_PAR",
            HidErrorCode::InvalidLen => "ERR_INVALID_LEN",
            HidErrorCode::InvalidSeq => "ERR_INVALID_SEQ",
            HidErrorCode::MsgTimeout => "ERR_MSG_TIMEOUT",
            HidErrorCode::ChannelBusy => "ERR_CHANNEL_BUSY",
            HidErrorCode::LockRequired => "ERR_LOCK_REQUIRED",
            HidErrorCode::InvalidChannel => "ERR_INVALID_CHANNEL",
            HidErrorCode::Other => "ERR_OTHER",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FramingError {
    #[error("report must be {REPORT_LEN} bytes, got {0}")]
    BadReportLength(usize),
    #[error("unknown CTAPHID command 0x{0:02x}")]
    UnknownCommand(u8),
    #[error("message of {0} bytes exceeds the CTAPHID limit")]
    TooLong(usize),
    #[error("continuation sequence gap: expected {expected}, got {got}")]
    SeqGap { expected: u8, got: u8 },
    #[error("channel 0x{0:08x} is busy with another message")]
    ChannelBusy(u32),
    #[error("continuation packet without a preceding init packet")]
    UnexpectedContinuation,
    #[error("message ended before all {expected} bytes arrived")]
    Incomplete { expected: usize },
    #[error("frames belong to more than one channel")]
    MixedChannels,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameKind {
    Init { command: HidCommand, bcnt: u16 },
    Continuation { seq: u8 },
}

/// One 64-byte HID report. `data` holds only the bytes this packet carries
/// for the message; the rest of the report is zero padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CtapHidFrame {
    pub channel_id: u32,
    pub kind: FrameKind,
    pub data: Vec<u8>,
}

impl CtapHidFrame {
    pub fn command(&self) -> Option<HidCommand> {
        match self.kind {
            FrameKind::Init { command, .. } => Some(command),
            FrameKind::Continuation { .. } => None,
        }
    }

    pub fn to_report(&self) -> [u8; REPORT_LEN] {
        let mut r = [0u8; REPORT_LEN];
        r[..4].copy_from_slice(&self.channel_id.to_be_bytes());
        let start = match self.kind {
            FrameKind::Init { command, bcnt } => {
                r[4] = 0x80 | command.code();
                r[5..7].copy_from_slice(&bcnt.to_be_bytes());
                7
            }
            FrameKind::Continuation { seq } => {
                r[4] = seq & 0x7f;
                5
            }
        };
        r[start..start + self.data.len()].copy_from_slice(&self.data);
        r
    }

    /// Parses a report. The init packet keeps `min(bcnt, 57)` data bytes;
    /// a continuation keeps its full 59-byte field since its share of the
    /// message is only known to the reassembler.
    pub fn from_report(report: &[u8]) -> Result<Self, FramingError> {
        if report.len() != REPORT_LEN {
            return Err(FramingError::BadReportLength(report.len()));
        }
        let channel_id = u32::from_be_bytes(report[..4].try_into().unwrap());
        if report[4] & 0x80 != 0 {
            let code = report[4] & 0x7f;
            let command = HidCommand::from_code(code).ok_or(FramingError::UnknownCommand(code))?;
            let bcnt = u16::from_be_bytes([report[5], report[6]]);
            let take = (bcnt as usize).min(INIT_DATA_LEN);
            Ok(CtapHidFrame {
                channel_id,
                kind: FrameKind::Init { command, bcnt },
                data: report[7..7 + take].to_vec(),
            })
        } else {
            Ok(CtapHidFrame {
                channel_id,
                kind: FrameKind::Continuation { seq: report[4] },
                data: report[5..].to_vec(),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HidMessage {
    pub channel_id: u32,
    pub command: HidCommand,
    pub data: Vec<u8>,
}

/// Splits a message into one init packet and as many continuations as needed.
pub fn fragment(channel_id: u32, command: HidCommand, data: &[u8]) -> Result<Vec<CtapHidFrame>, FramingError> {
    if data.len() > MAX_MESSAGE_LEN {
        return Err(FramingError::TooLong(data.len()));
    }
    let first = data.len().min(INIT_DATA_LEN);
    let mut frames = vec![CtapHidFrame {
        channel_id,
        kind: FrameKind::Init { command, bcnt: data.len() as u16 },
        data: data[..first].to_vec(),
    }];
    for (seq, chunk) in data[first..].chunks(CONT_DATA_LEN).enumerate() {
        frames.push(CtapHidFrame {
            channel_id,
            kind: FrameKind::Continuation { seq: seq as u8 },
            data: chunk.to_vec(),
        });
    }
    Ok(frames)
}

/// Frames a CTAP2 message on `channel_id`.
pub fn send(channel_id: u32, ctap_bytes: &[u8]) -> Result<Vec<CtapHidFrame>, FramingError> {
    fragment(channel_id, HidCommand::Cbor, ctap_bytes)
}

/// Reassembles exactly one message from `frames`.
pub fn recv(frames: &[CtapHidFrame]) -> Result<HidMessage, FramingError> {
    let mut r = Reassembler::default();
    let mut done = None;
    for f in frames {
        if done.is_some() {
            return Err(FramingError::UnexpectedContinuation);
        }
        if f.channel_id != frames[0].channel_id {
            return Err(FramingError::MixedChannels);
        }
        done = r.push(f)?;
    }
    match done {
        Some(m) => Ok(m),
        None => Err(FramingError::Incomplete { expected: r.expected }),
    }
}

/// Incremental reassembly for a single channel.
#[derive(Debug, Clone, Default)]
pub struct Reassembler {
    current: Option<(u32, HidCommand)>,
    expected: usize,
    next_seq: u8,
    data: Vec<u8>,
}

impl Reassembler {
    pub fn in_progress(&self) -> bool {
        self.current.is_some()
    }

    pub fn abort(&mut self) {
        *self = Reassembler::default();
    }

    pub fn push(&mut self, frame: &CtapHidFrame) -> Result<Option<HidMessage>, FramingError> {
        match frame.kind {
            FrameKind::Init { command, bcnt } => {
                if self.current.is_some() {
                    return Err(FramingError::ChannelBusy(frame.channel_id));
                }
                if bcnt as usize > MAX_MESSAGE_LEN {
                    return Err(FramingError::TooLong(bcnt as usize));
                }
                self.current = Some((frame.channel_id, command));
                self.expected = bcnt as usize;
                self.next_seq = 0;
                self.data = frame.data.clone();
            }
            FrameKind::Continuation { seq } => {
                if self.current.is_none() {
                    return Err(FramingError::UnexpectedContinuation);
                }
                if seq != self.next_seq {
                    let expected = self.next_seq;
                    self.abort();
                    return Err(FramingError::SeqGap { expected, got: seq });
                }
                self.next_seq += 1;
                let need = self.expected - self.data.len();
                self.data.extend_from_slice(&frame.data[..frame.data.len().min(need)]);
            }
        }
        self.data.truncate(self.expected);
        if self.data.len() < self.expected {
            return Ok(None);
        }
        let (channel_id, command) = self.current.take().unwrap();
        let data = std::mem::take(&mut self.data);
        self.abort();
        Ok(Some(HidMessage { channel_id, command, data }))
    }
}

pub fn keepalive(channel_id: u32, status: KeepaliveStatus) -> CtapHidFrame {
    CtapHidFrame {
        channel_id,
        kind: FrameKind::Init { command: HidCommand::Keepalive, bcnt: 1 },
        data: vec![status.code()],
    }
}

pub fn error_frame(channel_id: u32, code: HidErrorCode) -> CtapHidFrame {
    CtapHidFrame {
        channel_id,
        kind: FrameKind::Init { command: HidCommand::Error, bcnt: 1 },
        data: vec![code.code()],
    }
}

/// Payload of an INIT response.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InitResponse {
    pub nonce: [u8; INIT_NONCE_LEN],
    pub channel_id: u32,
    pub protocol_version: u8,
    pub device_version: [u8; 3],
    pub capabilities: u8,
}

impl InitResponse {
    pub const LEN: usize = 17;

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.nonce.to_vec();
        out.extend_from_slice(&self.channel_id.to_be_bytes());
        out.push(self.protocol_version);
        out.extend_from_slice(&self.device_version);
        out.push(self.capabilities);
        out
    }

    pub fn decode(data: &[u8]) -> Option<Self> {
        if data.len() < Self::LEN {
            return None;
        }
        Some(InitResponse {
            nonce: data[..8].try_into().unwrap(),
            channel_id: u32::from_be_bytes(data[8..12].try_into().unwrap()),
            protocol_version: data[12],
            device_version: data[13..16].try_into().unwrap(),
            capabilities: data[16],
        })
    }

    pub fn capability_names(&self) -> Vec<&'static str> {
        capability_names(self.capabilities)
    }
}

pub fn capability_names(flags: u8) -> Vec<&'static str> {
    let mut out = Vec::new();
    if flags & CAPABILITY_WINK != 0 {
        out.push("WINK");
    }
    if flags & CAPABILITY_CBOR != 0 {
        out.push("CBOR");
    }
    if flags & CAPABILITY_NMSG != 0 {
        out.push("NMSG");
    }
    out
}
