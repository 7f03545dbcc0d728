//! Strict canonical CBOR for CTAP2 payloads.
//!
//! Only the subset CTAP uses is supported: integers, byte and text strings,
//! arrays, maps, booleans and null. Encoding always produces the CTAP2
//! canonical form (minimal-length heads, map keys ordered shortest encoding
//! first and then bytewise). Decoding rejects anything the encoder would not
//! have produced, so `decode(b)` succeeds only when `encode(decode(b)) == b`.

use std::cmp::Ordering;
use std::fmt;

use thiserror::Error;

/// Deepest nesting the decoder accepts before giving up.
pub const MAX_DEPTH: usize = 16;

const MAJOR_UNSIGNED: u8 = 0;
const MAJOR_NEGATIVE: u8 = 1;
const MAJOR_BYTES: u8 = 2;
const MAJOR_TEXT: u8 = 3;
const MAJOR_ARRAY: u8 = 4;
const MAJOR_MAP: u8 = 5;
const MAJOR_SIMPLE: u8 = 7;

const SIMPLE_FALSE: u8 = 20;
const SIMPLE_TRUE: u8 = 21;
const SIMPLE_NULL: u8 = 22;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CborError {
    #[error("input ends before the item is complete")]
    Truncated,
    #[error("unsupported initial byte {0:#04x}")]
    Unsupported(u8),
    #[error("text string is not valid UTF-8")]
    InvalidUtf8,
    #[error("{0} trailing byte(s) after the top-level item")]
    TrailingBytes(usize),
    #[error("nesting deeper than {MAX_DEPTH} levels")]
    TooDeep,
    #[error("integer or length not encoded in its shortest form")]
    NonMinimalHead,
    #[error("map keys out of canonical order")]
    UnsortedKeys,
    #[error("duplicate map key")]
    DuplicateKey,
}

impl CborError {
    /// True for errors that mean "well-formed but not canonical", as opposed
    /// to bytes that are not valid CBOR (for our subset) at all.
    pub fn is_non_canonical(&self) -> bool {
        matches!(
            self,
            CborError::NonMinimalHead | CborError::UnsortedKeys | CborError::DuplicateKey
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum CborValue {
    Unsigned(u64),
    /// Negative integer `-1 - n`.
    Negative(u64),
    Bytes(Vec<u8>),
    Text(String),
    Array(Vec<CborValue>),
    Map(CborMap),
    Bool(bool),
    Null,
}

impl CborValue {
    pub fn int(v: i64) -> Self {
        if v >= 0 {
            CborValue::Unsigned(v as u64)
        } else {
            CborValue::Negative((-1 - v) as u64)
        }
    }

    pub fn text(s: impl Into<String>) -> Self {
        CborValue::Text(s.into())
    }

    pub fn bytes(b: impl Into<Vec<u8>>) -> Self {
        CborValue::Bytes(b.into())
    }

    pub fn as_i64(&self) -> Option<i64> {
        match *self {
            CborValue::Unsigned(n) => i64::try_from(n).ok(),
            CborValue::Negative(n) => i64::try_from(n).ok().map(|n| -1 - n),
            _ => None,
        }
    }

    pub fn as_u64(&self) -> Option<u64> {
        match *self {
            CborValue::Unsigned(n) => Some(n),
            _ => None,
        }
    }

    pub fn as_bytes(&self) -> Option<&[u8]> {
        match self {
            CborValue::Bytes(b) => Some(b),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            CborValue::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_array(&self) -> Option<&[CborValue]> {
        match self {
            CborValue::Array(a) => Some(a),
            _ => None,
        }
    }

    pub fn as_map(&self) -> Option<&CborMap> {
        match self {
            CborValue::Map(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match *self {
            CborValue::Bool(b) => Some(b),
            _ => None,
        }
    }
}

impl From<CborMap> for CborValue {
    fn from(m: CborMap) -> Self {
        CborValue::Map(m)
    }
}

impl From<bool> for CborValue {
    fn from(b: bool) -> Self {
        CborValue::Bool(b)
    }
}

impl From<&str> for CborValue {
    fn from(s: &str) -> Self {
        CborValue::Text(s.to_owned())
    }
}

impl From<String> for CborValue {
    fn from(s: String) -> Self {
        CborValue::Text(s)
    }
}

impl From<i32> for CborValue {
    fn from(v: i32) -> Self {
        CborValue::int(v as i64)
    }
}

impl From<i64> for CborValue {
    fn from(v: i64) -> Self {
        CborValue::int(v)
    }
}

impl From<u64> for CborValue {
    fn from(v: u64) -> Self {
        CborValue::Unsigned(v)
    }
}

impl From<usize> for CborValue {
    fn from(v: usize) -> Self {
        CborValue::Unsigned(v as u64)
    }
}

impl From<Vec<u8>> for CborValue {
    fn from(b: Vec<u8>) -> Self {
        CborValue::Bytes(b)
    }
}

impl From<&[u8]> for CborValue {
    fn from(b: &[u8]) -> Self {
        CborValue::Bytes(b.to_vec())
    }
}

impl From<Vec<CborValue>> for CborValue {
    fn from(items: Vec<CborValue>) -> Self {
        CborValue::Array(items)
    }
}

/// Compares two keys by their canonical encodings: shorter first, then bytewise.
fn canonical_cmp(a: &[u8], b: &[u8]) -> Ordering {
    a.len().cmp(&b.len()).then_with(|| a.cmp(b))
}

/// A CBOR map whose entries are always held in canonical key order with
/// unique keys.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct CborMap {
    entries: Vec<(CborValue, CborValue)>,
}

impl CborMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces `key`.
    pub fn insert(&mut self, key: impl Into<CborValue>, value: impl Into<CborValue>) {
        let key = key.into();
        let value = value.into();
        let encoded = encode_canonical(&key);
        let pos = self
            .entries
            .binary_search_by(|(k, _)| canonical_cmp(&encode_canonical(k), &encoded));
        match pos {
            Ok(i) => self.entries[i].1 = value,
            Err(i) => self.entries.insert(i, (key, value)),
        }
    }

    /// Builder-style [`insert`](Self::insert).
    pub fn with(mut self, key: impl Into<CborValue>, value: impl Into<CborValue>) -> Self {
        self.insert(key, value);
        self
    }

    pub fn get(&self, key: &CborValue) -> Option<&CborValue> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    /// Lookup by integer key, the common case for CTAP parameter maps.
    pub fn get_int(&self, key: i64) -> Option<&CborValue> {
        self.get(&CborValue::int(key))
    }

    pub fn get_text(&self, key: &str) -> Option<&CborValue> {
        self.entries
            .iter()
            .find(|(k, _)| k.as_text() == Some(key))
            .map(|(_, v)| v)
    }

    pub fn remove(&mut self, key: &CborValue) -> Option<CborValue> {
        let i = self.entries.iter().position(|(k, _)| k == key)?;
        Some(self.entries.remove(i).1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&CborValue, &CborValue)> {
        self.entries.iter().map(|(k, v)| (k, v))
    }
}

fn write_head(out: &mut Vec<u8>, major: u8, arg: u64) {
    let mt = major << 5;
    if arg < 24 {
        out.push(mt | arg as u8);
    } else if arg <= u8::MAX as u64 {
        out.push(mt | 24);
        out.push(arg as u8);
    } else if arg <= u16::MAX as u64 {
        out.push(mt | 25);
        out.extend_from_slice(&(arg as u16).to_be_bytes());
    } else if arg <= u32::MAX as u64 {
        out.push(mt | 26);
        out.extend_from_slice(&(arg as u32).to_be_bytes());
    } else {
        out.push(mt | 27);
        out.extend_from_slice(&arg.to_be_bytes());
    }
}

fn encode_into(v: &CborValue, out: &mut Vec<u8>) {
    match v {
        CborValue::Unsigned(n) => write_head(out, MAJOR_UNSIGNED, *n),
        CborValue::Negative(n) => write_head(out, MAJOR_NEGATIVE, *n),
        CborValue::Bytes(b) => {
            write_head(out, MAJOR_BYTES, b.len() as u64);
            out.extend_from_slice(b);
        }
        CborValue::Text(s) => {
            write_head(out, MAJOR_TEXT, s.len() as u64);
            out.extend_from_slice(s.as_bytes());
        }
        CborValue::Array(items) => {
            write_head(out, MAJOR_ARRAY, items.len() as u64);
            for item in items {
                encode_into(item, out);
            }
        }
        CborValue::Map(map) => {
            write_head(out, MAJOR_MAP, map.len() as u64);
            for (k, v) in map.iter() {
                encode_into(k, out);
                encode_into(v, out);
            }
        }
        CborValue::Bool(false) => out.push(MAJOR_SIMPLE << 5 | SIMPLE_FALSE),
        CborValue::Bool(true) => out.push(MAJOR_SIMPLE << 5 | SIMPLE_TRUE),
        CborValue::Null => out.push(MAJOR_SIMPLE << 5 | SIMPLE_NULL),
    }
}

pub fn encode_canonical(v: &CborValue) -> Vec<u8> {
    let mut out = Vec::new();
    encode_into(v, &mut out);
    out
}

struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CborError> {
        let end = self.pos.checked_add(n).ok_or(CborError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CborError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn head(&mut self) -> Result<(u8, u8, u64), CborError> {
        let initial = self.take(1)?[0];
        let major = initial >> 5;
        let info = initial & 0x1f;
        if major == MAJOR_SIMPLE {
            return Ok((major, info, info as u64));
        }
        let (arg, min) = match info {
            0..=23 => return Ok((major, info, info as u64)),
            24 => (self.take(1)?[0] as u64, 24),
            25 => (u16::from_be_bytes(self.take(2)?.try_into().unwrap()) as u64, 0x100),
            26 => (u32::from_be_bytes(self.take(4)?.try_into().unwrap()) as u64, 0x1_0000),
            27 => (u64::from_be_bytes(self.take(8)?.try_into().unwrap()), 0x1_0000_0000),
            _ => return Err(CborError::Unsupported(initial)),
        };
        if arg < min {
            return Err(CborError::NonMinimalHead);
        }
        Ok((major, info, arg))
    }

    fn length(&self, arg: u64) -> Result<usize, CborError> {
        let len = usize::try_from(arg).map_err(|_| CborError::Truncated)?;
        if len > self.buf.len() - self.pos {
            return Err(CborError::Truncated);
        }
        Ok(len)
    }

    fn value(&mut self, depth: usize) -> Result<CborValue, CborError> {
        if depth > MAX_DEPTH {
            return Err(CborError::TooDeep);
        }
        let start = self.pos;
        let (major, info, arg) = self.head()?;
        match major {
            MAJOR_UNSIGNED => Ok(CborValue::Unsigned(arg)),
            MAJOR_NEGATIVE => Ok(CborValue::Negative(arg)),
            MAJOR_BYTES => {
                let len = self.length(arg)?;
                Ok(CborValue::Bytes(self.take(len)?.to_vec()))
            }
            MAJOR_TEXT => {
                let len = self.length(arg)?;
                let raw = self.take(len)?;
                let s = std::str::from_utf8(raw).map_err(|_| CborError::InvalidUtf8)?;
                Ok(CborValue::Text(s.to_owned()))
            }
            MAJOR_ARRAY => {
                // Every item takes at least one byte.
                let len = self.length(arg)?;
                let mut items = Vec::with_capacity(len);
                for _ in 0..len {
                    items.push(self.value(depth + 1)?);
                }
                Ok(CborValue::Array(items))
            }
            MAJOR_MAP => {
                let len = self.length(arg)?;
                let mut entries: Vec<(CborValue, CborValue)> = Vec::with_capacity(len);
                let mut prev_key: Option<&[u8]> = None;
                for _ in 0..len {
                    let key_start = self.pos;
                    let key = self.value(depth + 1)?;
                    let key_bytes = &self.buf[key_start..self.pos];
                    if let Some(prev) = prev_key {
                        match canonical_cmp(prev, key_bytes) {
                            Ordering::Less => {}
                            Ordering::Equal => return Err(CborError::DuplicateKey),
                            Ordering::Greater => return Err(CborError::UnsortedKeys),
                        }
                    }
                    prev_key = Some(key_bytes);
                    let value = self.value(depth + 1)?;
                    entries.push((key, value));
                }
                Ok(CborValue::Map(CborMap { entries }))
            }
            MAJOR_SIMPLE => match info {
                SIMPLE_FALSE => Ok(CborValue::Bool(false)),
                SIMPLE_TRUE => Ok(CborValue::Bool(true)),
                SIMPLE_NULL => Ok(CborValue::Null),
                _ => Err(CborError::Unsupported(self.buf[start])),
            },
            // Tags are outside the CTAP subset.
            _ => Err(CborError::Unsupported(self.buf[start])),
        }
    }
}

/// Decodes exactly one canonical item spanning all of `bytes`.
pub fn decode_canonical(bytes: &[u8]) -> Result<CborValue, CborError> {
    let mut dec = Decoder { buf: bytes, pos: 0 };
    let v = dec.value(0)?;
    match bytes.len() - dec.pos {
        0 => Ok(v),
        n => Err(CborError::TrailingBytes(n)),
    }
}

/// Compact diagnostic notation, used by the dissector.
impl fmt::Display for CborValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CborValue::Unsigned(n) => write!(f, "{n}"),
            CborValue::Negative(n) => write!(f, "-{}", *n as u128 + 1),
            CborValue::Bytes(b) => write!(f, "h'{}'", hex::encode(b)),
            CborValue::Text(s) => write!(f, "{s:?}"),
            CborValue::Array(items) => {
                f.write_str("[")?;
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{item}")?;
                }
                f.write_str("]")
            }
            CborValue::Map(m) => {
                f.write_str("{")?;
                for (i, (k, v)) in m.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{k}: {v}")?;
                }
                f.write_str("}")
            }
            CborValue::Bool(b) => write!(f, "{b}"),
            CborValue::Null => f.write_str("null"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_map_and_zero() {
        assert_eq!(encode_canonical(&CborMap::new().into()), [0xa0]);
        assert_eq!(encode_canonical(&CborValue::Unsigned(0)), [0x00]);
        assert_eq!(decode_canonical(&[0xa0]).unwrap(), CborValue::Map(CborMap::new()));
    }

    #[test]
    fn bool_map_bytes() {
        // Inserted out of order on purpose; the map sorts itself.
        let m = CborMap::new().with(2, true).with(1, false);
        assert_eq!(encode_canonical(&m.into()), [0xa2, 0x01, 0xf4, 0x02, 0xf5]);
    }

    #[test]
    fn canonical_key_order_is_length_first() {
        // 0x18 0x18 (24) sorts after 0x17 (23) and "a" (0x61 0x61) sorts
        // after all single-byte ints but before the two-byte 24.
        let m = CborMap::new().with(24, 0).with("a", 0).with(23, 0).with(-1, 0);
        let keys: Vec<String> = m.iter().map(|(k, _)| k.to_string()).collect();
        assert_eq!(keys, ["23", "-1", "24", "\"a\""]);
    }

    #[test]
    fn rejects_unsorted_keys() {
        let err = decode_canonical(&[0xa2, 0x02, 0xf5, 0x01, 0xf4]).unwrap_err();
        assert_eq!(err, CborError::UnsortedKeys);
        assert!(err.is_non_canonical());
    }

    #[test]
    fn rejects_duplicate_keys() {
        let err = decode_canonical(&[0xa2, 0x01, 0xf5, 0x01, 0xf4]).unwrap_err();
        assert_eq!(err, CborError::DuplicateKey);
    }

    #[test]
    fn rejects_oversized_int() {
        assert_eq!(decode_canonical(&[0x18, 0x05]), Err(CborError::NonMinimalHead));
        assert_eq!(decode_canonical(&[0x19, 0x00, 0xff]), Err(CborError::NonMinimalHead));
    }

    #[test]
    fn rejects_malformed() {
        assert_eq!(decode_canonical(&[]), Err(CborError::Truncated));
        assert_eq!(decode_canonical(&[0x62, 0x61]), Err(CborError::Truncated));
        assert_eq!(decode_canonical(&[0x00, 0x00]), Err(CborError::TrailingBytes(1)));
        // indefinite-length byte string
        assert_eq!(decode_canonical(&[0x5f]), Err(CborError::Unsupported(0x5f)));
        // half-precision float
        assert_eq!(decode_canonical(&[0xf9, 0, 0]), Err(CborError::Unsupported(0xf9)));
        // tag 1
        assert_eq!(decode_canonical(&[0xc1, 0x00]), Err(CborError::Unsupported(0xc1)));
        assert_eq!(decode_canonical(&[0x61, 0xff]), Err(CborError::InvalidUtf8));
    }

    #[test]
    fn huge_length_claim_does_not_allocate() {
        let bytes = [0x9b, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff];
        assert_eq!(decode_canonical(&bytes), Err(CborError::Truncated));
    }

    #[test]
    fn depth_limit() {
        let mut bytes = vec![0x81; MAX_DEPTH + 2];
        bytes.push(0x00);
        assert_eq!(decode_canonical(&bytes), Err(CborError::TooDeep));
    }

    #[test]
    fn negative_ints() {
        assert_eq!(encode_canonical(&CborValue::int(-7)), [0x26]);
        assert_eq!(encode_canonical(&CborValue::int(-25)), [0x38, 0x18]);
        assert_eq!(CborValue::int(-25).as_i64(), Some(-25));
        assert_eq!(CborValue::Negative(u64::MAX).to_string(), "-18446744073709551616");
    }
}
