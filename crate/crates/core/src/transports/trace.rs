//! Frame log records and their one-line text form:
//! `<timestamp-ms> <usb|nfc> <c2a|a2c> <hex-bytes>`.

use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use thiserror::Error;

use crate::authenticator::Transport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Direction {
    ToAuthenticator,
    ToClient,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::ToAuthenticator => "c2a",
            Direction::ToClient => "a2c",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "c2a" => Some(Direction::ToAuthenticator),
            "a2c" => Some(Direction::ToClient),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportFrame {
    pub timestamp: u64,
    pub transport: Transport,
    pub direction: Direction,
    pub raw: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceParseError {
    #[error("expected 4 fields, found {0}")]
    FieldCount(usize),
    #[error("bad timestamp {0:?}")]
    Timestamp(String),
    #[error("bad transport {0:?}")]
    Transport(String),
    #[error("bad direction {0:?}")]
    Direction(String),
    #[error("bad hex: {0}")]
    Hex(String),
}

impl fmt::Display for TransportFrame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {}",
            self.timestamp,
            self.transport,
            self.direction.as_str(),
            hex::encode(&self.raw)
        )
    }
}

impl FromStr for TransportFrame {
    type Err = TraceParseError;

    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(TraceParseError::FieldCount(fields.len()));
        }
        let timestamp = fields[0]
            .parse()
            .map_err(|_| TraceParseError::Timestamp(fields[0].to_string()))?;
        let transport = match Transport::parse(fields[1]) {
            Some(t @ (Transport::Usb | Transport::Nfc)) => t,
            _ => return Err(TraceParseError::Transport(fields[1].to_string())),
        };
        let direction =
            Direction::parse(fields[2]).ok_or_else(|| TraceParseError::Direction(fields[2].to_string()))?;
        let raw = hex::decode(fields[3]).map_err(|e| TraceParseError::Hex(e.to_string()))?;
        Ok(TransportFrame { timestamp, transport, direction, raw })
    }
}

/// Orders records by timestamp, keeping emission order for ties.
pub fn sort_by_time(frames: &mut [TransportFrame]) {
    frames.sort_by_key(|f| f.timestamp);
}

pub fn write_trace<W: Write>(mut out: W, frames: &[TransportFrame]) -> io::Result<()> {
    for f in frames {
        writeln!(out, "{f}")?;
    }
    Ok(())
}

/// Parses every non-blank line, keeping per-line failures in place.
pub fn read_trace<R: BufRead>(input: R) -> io::Result<Vec<Result<TransportFrame, TraceParseError>>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(line.parse());
    }
    Ok(out)
}
