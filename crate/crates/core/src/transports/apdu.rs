//! ISO 7816-4 short APDUs as used for CTAP over NFC.

use thiserror::Error;

pub const CLA_CTAP: u8 = 0x80;
pub const CLA_CHAIN_BIT: u8 = 0x10;
pub const INS_SELECT: u8 = 0xa4;
pub const INS_CTAP_MSG: u8 = 0x10;
pub const INS_GET_RESPONSE: u8 = 0xc0;
pub const MAX_COMMAND_DATA: usize = 255;
pub const MAX_RESPONSE_DATA: usize = 256;

pub const FIDO_AID: [u8; 8] = [0xa0, 0x00, 0x00, 0x06, 0x47, 0x2f, 0x00, 0x01];
pub const SELECT_RESPONSE: &[u8] = b"FIDO_2_0";

pub const SW_OK: u16 = 0x9000;
pub const SW_WRONG_LENGTH: u16 = 0x6700;
pub const SW_CONDITIONS_NOT_SATISFIED: u16 = 0x6985;
pub const SW_FILE_NOT_FOUND: u16 = 0x6a82;
pub const SW_INS_NOT_SUPPORTED: u16 = 0x6d00;
pub const SW_CLA_NOT_SUPPORTED: u16 = 0x6e00;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ApduError {
    #[error("APDU too short ({0} bytes)")]
    Truncated(usize),
    #[error("APDU length field does not match its body")]
    BadLength,
    #[error("unexpected status word {0:04x}")]
    BadStatusWord(u16),
    #[error("command chain is broken")]
    BrokenChain,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Apdu {
    pub cla: u8,
    pub ins: u8,
    pub p1: u8,
    pub p2: u8,
    pub data: Vec<u8>,
    /// Expected response length; 256 is encoded as 0x00.
    pub le: Option<u16>,
}

impl Apdu {
    pub fn select_fido() -> Self {
        Apdu { cla: 0x00, ins: INS_SELECT, p1: 0x04, p2: 0x00, data: FIDO_AID.to_vec(), le: Some(256) }
    }

    pub fn get_response() -> Self {
        Apdu { cla: 0x00, ins: INS_GET_RESPONSE, p1: 0, p2: 0, data: vec![], le: Some(256) }
    }

    pub fn chain(&self) -> bool {
        self.cla & CLA_CHAIN_BIT != 0
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![self.cla, self.ins, self.p1, self.p2];
        if !self.data.is_empty() {
            out.push(self.data.len() as u8);
            out.extend_from_slice(&self.data);
        }
        if let Some(le) = self.le {
            out.push((le & 0xff) as u8);
        }
        out
    }

    pub fn decode(raw: &[u8]) -> Result<Self, ApduError> {
        if raw.len() < 4 {
            return Err(ApduError::Truncated(raw.len()));
        }
        let (cla, ins, p1, p2) = (raw[0], raw[1], raw[2], raw[3]);
        let body = &raw[4..];
        let le_of = |b: u8| if b == 0 { 256 } else { b as u16 };
        let (data, le) = match body.len() {
            0 => (vec![], None),
            1 => (vec![], Some(le_of(body[0]))),
            n => {
                let lc = body[0] as usize;
                if lc == 0 {
                    return Err(ApduError::BadLength);
                }
                if n == 1 + lc {
                    (body[1..].to_vec(), None)
                } else if n == 2 + lc {
                    (body[1..1 + lc].to_vec(), Some(le_of(body[1 + lc])))
                } else {
                    return Err(ApduError::BadLength);
                }
            }
        };
        Ok(Apdu { cla, ins, p1, p2, data, le })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApduResponse {
    pub data: Vec<u8>,
    pub sw: u16,
}

impl ApduResponse {
    pub fn status(sw: u16) -> Self {
        ApduResponse { data: vec![], sw }
    }

    pub fn more_data(&self) -> bool {
        self.sw >> 8 == 0x61
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.data.clone();
        out.extend_from_slice(&self.sw.to_be_bytes());
        out
    }

    pub fn decode(raw: &[u8]) -> Result<Self, ApduError> {
        if raw.len() < 2 {
            return Err(ApduError::Truncated(raw.len()));
        }
        let (data, sw) = raw.split_at(raw.len() - 2);
        Ok(ApduResponse { data: data.to_vec(), sw: u16::from_be_bytes([sw[0], sw[1]]) })
    }
}

/// Wraps a CTAP message into NFCCTAP_MSG APDUs, chaining when it exceeds 255 bytes.
pub fn wrap(ctap_bytes: &[u8]) -> Vec<Apdu> {
    let chunks: Vec<&[u8]> = if ctap_bytes.is_empty() {
        vec![&[]]
    } else {
        ctap_bytes.chunks(MAX_COMMAND_DATA).collect()
    };
    let last = chunks.len() - 1;
    chunks
        .into_iter()
        .enumerate()
        .map(|(i, chunk)| Apdu {
            cla: if i < last { CLA_CTAP | CLA_CHAIN_BIT } else { CLA_CTAP },
            ins: INS_CTAP_MSG,
            p1: 0,
            p2: 0,
            data: chunk.to_vec(),
            le: Some(256),
        })
        .collect()
}

pub fn unwrap(apdus: &[Apdu]) -> Result<Vec<u8>, ApduError> {
    let Some((last, rest)) = apdus.split_last() else {
        return Err(ApduError::BrokenChain);
    };
    if last.chain() || rest.iter().any(|a| !a.chain()) {
        return Err(ApduError::BrokenChain);
    }
    if apdus.iter().any(|a| a.ins != INS_CTAP_MSG) {
        return Err(ApduError::BrokenChain);
    }
    Ok(apdus.iter().flat_map(|a| a.data.iter().copied()).collect())
}

/// Splits response bytes into 256-byte pieces; all but the last carry
/// `61xx` where `xx` is the remaining length (00 meaning 256 or more).
pub fn split_response(bytes: &[u8]) -> Vec<ApduResponse> {
    let chunks: Vec<&[u8]> = if bytes.is_empty() {
        vec![&[]]
    } else {
        bytes.chunks(MAX_RESPONSE_DATA).collect()
    };
    let mut remaining = bytes.len();
    let last = chunks.len() - 1;
    chunks
        .into_iter()
        .enumerate()
        .map(|(i, chunk)| {
            remaining -= chunk.len();
            let sw = if i < last { 0x6100 | (remaining.min(MAX_RESPONSE_DATA) & 0xff) as u16 } else { SW_OK };
            ApduResponse { data: chunk.to_vec(), sw }
        })
        .collect()
}

/// Concatenates a response sequence obtained through GET RESPONSE.
pub fn join_response(parts: &[ApduResponse]) -> Result<Vec<u8>, ApduError> {
    let Some((last, rest)) = parts.split_last() else {
        return Err(ApduError::BrokenChain);
    };
    if let Some(bad) = rest.iter().find(|p| !p.more_data()) {
        return Err(ApduError::BadStatusWord(bad.sw));
    }
    if last.sw != SW_OK {
        return Err(ApduError::BadStatusWord(last.sw));
    }
    Ok(parts.iter().flat_map(|p| p.data.iter().copied()).collect())
}

/// Client side of an exchange: sends `apdus`, then follows every `61xx`
/// with GET RESPONSE until the final status word.
pub fn exchange<F>(apdus: &[Apdu], mut transmit: F) -> Result<Vec<u8>, ApduError>
where
    F: FnMut(&Apdu) -> ApduResponse,
{
    let mut first = None;
    for (i, a) in apdus.iter().enumerate() {
        let r = transmit(a);
        if i + 1 < apdus.len() {
            if r.sw != SW_OK {
                return Err(ApduError::BadStatusWord(r.sw));
            }
        } else {
            first = Some(r);
        }
    }
    let mut parts = vec![first.ok_or(ApduError::BrokenChain)?];
    while parts.last().unwrap().more_data() {
        parts.push(transmit(&Apdu::get_response()));
    }
    join_response(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_hundred_bytes_chain_into_two() {
        let apdus = wrap(&[7u8; 300]);
        assert_eq!(apdus.len(), 2);
        assert!(apdus[0].chain());
        assert!(!apdus[1].chain());
        assert_eq!(apdus[0].data.len(), 255);
        assert_eq!(apdus[1].data.len(), 45);
        assert_eq!(unwrap(&apdus).unwrap(), vec![7u8; 300]);
    }

    #[test]
    fn broken_chain_rejected() {
        let mut apdus = wrap(&[1u8; 600]);
        apdus[1].cla = CLA_CTAP;
        assert_eq!(unwrap(&apdus), Err(ApduError::BrokenChain));
        assert_eq!(unwrap(&[]), Err(ApduError::BrokenChain));
    }

    #[test]
    fn encode_decode_forms() {
        let sel = Apdu::select_fido();
        assert_eq!(sel.encode(), [0x00, 0xa4, 0x04, 0x00, 0x08, 0xa0, 0, 0, 6, 0x47, 0x2f, 0, 1, 0]);
        assert_eq!(Apdu::decode(&sel.encode()).unwrap(), sel);
        let gr = Apdu::get_response();
        assert_eq!(gr.encode(), [0x00, 0xc0, 0, 0, 0]);
        assert_eq!(Apdu::decode(&gr.encode()).unwrap(), gr);
        let bare = Apdu { cla: 0x80, ins: 0x10, p1: 0, p2: 0, data: vec![4], le: None };
        assert_eq!(Apdu::decode(&bare.encode()).unwrap(), bare);
        assert_eq!(Apdu::decode(&[0x80, 0x10, 0, 0, 5, 1]), Err(ApduError::BadLength));
    }

    #[test]
    fn long_response_uses_get_response() {
        let payload: Vec<u8> = (0..600u32).map(|i| i as u8).collect();
        let parts = split_response(&payload);
        assert_eq!(parts.iter().map(|p| p.sw).collect::<Vec<_>>(), [0x6100, 0x6158, 0x9000]);

        let mut queue = parts.clone().into_iter();
        let mut sent = Vec::new();
        let out = exchange(&wrap(&[0x04]), |a| {
            sent.push(a.clone());
            queue.next().unwrap()
        })
        .unwrap();
        assert_eq!(out, payload);
        assert_eq!(sent.len(), 3);
        assert_eq!(sent[1], Apdu::get_response());
    }

    #[test]
    fn error_status_surfaces() {
        assert_eq!(
            join_response(&[ApduResponse::status(SW_INS_NOT_SUPPORTED)]),
            Err(ApduError::BadStatusWord(0x6d00))
        );
    }
}
