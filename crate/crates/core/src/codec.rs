//! CTAP2 command and response framing: one command (or status) byte followed
//! by an optional canonical CBOR map.
//!
//! The byte values below are the CTAP 2.1 assignments. The dissector reads
//! the same tables, so names shown in traces always agree with the codec.

use std::fmt;

use thiserror::Error;

use crate::cbor::{decode_canonical, encode_canonical, CborError, CborMap, CborValue};

macro_rules! byte_enum {
    (
        $(#[$meta:meta])*
        pub enum $name:ident { $($variant:ident = $value:literal),+ $(,)? }
    ) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn to_byte(self) -> u8 {
                match self { $($name::$variant => $value),+ }
            }

            pub fn from_byte(b: u8) -> Option<Self> {
                match b { $($value => Some($name::$variant),)+ _ => None }
            }

            pub fn name(self) -> &'static str {
                match self { $($name::$variant => stringify!($variant)),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

byte_enum! {
    /// Command bytes on the wire. `GetNextAssertion` is folded into
    /// [`Command::GetAssertion`] as a subcommand at the typed layer.
    pub enum CommandByte {
        MakeCredential = 0x01,
        GetAssertion = 0x02,
        GetInfo = 0x04,
        ClientPin = 0x06,
        Reset = 0x07,
        GetNextAssertion = 0x08,
        CredentialManagement = 0x0a,
        Selection = 0x0b,
    }
}

byte_enum! {
    /// CTAP2 status codes. 0xF1..=0xF3 sit in the vendor range and are only
    /// produced by countermeasures or capability gaps of the lab authenticator.
    pub enum StatusCode {
        Ok = 0x00,
        InvalidCommand = 0x01,
        InvalidParameter = 0x02,
        InvalidLength = 0x03,
        InvalidSeq = 0x04,
        Timeout = 0x05,
        ChannelBusy = 0x06,
        InvalidCbor = 0x12,
        MissingParameter = 0x14,
        UnsupportedAlgorithm = 0x26,
        OperationDenied = 0x27,
        KeyStoreFull = 0x28,
        UnsupportedOption = 0x2b,
        InvalidOption = 0x2c,
        KeepaliveCancel = 0x2d,
        NoCredentials = 0x2e,
        UserActionTimeout = 0x2f,
        NotAllowed = 0x30,
        PinInvalid = 0x31,
        PinBlocked = 0x32,
        PinAuthInvalid = 0x33,
        PinAuthBlocked = 0x34,
        PinNotSet = 0x35,
        PinRequired = 0x36,
        PinPolicyViolation = 0x37,
        RequestTooLarge = 0x39,
        ActionTimeout = 0x3a,
        UpRequired = 0x3b,
        UvBlocked = 0x3c,
        InvalidSubcommand = 0x3e,
        Other = 0x7f,
        ClientNotTrusted = 0xf1,
        RateLimited = 0xf2,
        NotSupported = 0xf3,
    }
}

byte_enum! {
    pub enum ClientPinSub {
        GetRetries = 0x01,
        GetKeyAgreement = 0x02,
        SetPin = 0x03,
        ChangePin = 0x04,
        GetPinToken = 0x05,
    }
}

byte_enum! {
    pub enum CredMgmtSub {
        GetCredsMetadata = 0x01,
        EnumerateRpsBegin = 0x02,
        EnumerateRpsGetNextRp = 0x03,
        EnumerateCredentialsBegin = 0x04,
        EnumerateCredentialsGetNextCredential = 0x05,
        DeleteCredential = 0x06,
    }
}

/// Parameter key carrying the subcommand in a ClientPin request.
pub const CLIENT_PIN_SUBCOMMAND_KEY: i64 = 0x02;
/// Parameter key carrying the subcommand in a CredentialManagement request.
pub const CRED_MGMT_SUBCOMMAND_KEY: i64 = 0x01;

/// The seven authenticator APIs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Command {
    MakeCredential,
    GetAssertion,
    CredentialManagement,
    ClientPin,
    Reset,
    Selection,
    GetInfo,
}

impl Command {
    /// Order used by the feasibility tables.
    pub const ALL: [Command; 7] = [
        Command::MakeCredential,
        Command::GetAssertion,
        Command::CredentialManagement,
        Command::ClientPin,
        Command::Reset,
        Command::Selection,
        Command::GetInfo,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            Command::MakeCredential => "MC",
            Command::GetAssertion => "GA",
            Command::CredentialManagement => "CM",
            Command::ClientPin => "CP",
            Command::Reset => "Re",
            Command::Selection => "Se",
            Command::GetInfo => "GI",
        }
    }

    pub fn from_short_name(s: &str) -> Option<Self> {
        Command::ALL.into_iter().find(|c| c.short_name().eq_ignore_ascii_case(s))
    }

    pub fn has_subcommands(self) -> bool {
        matches!(
            self,
            Command::GetAssertion | Command::CredentialManagement | Command::ClientPin
        )
    }

    pub fn takes_params(self) -> bool {
        !matches!(self, Command::Reset | Command::Selection | Command::GetInfo)
    }

    pub fn name(self) -> &'static str {
        match self {
            Command::MakeCredential => "MakeCredential",
            Command::GetAssertion => "GetAssertion",
            Command::CredentialManagement => "CredentialManagement",
            Command::ClientPin => "ClientPin",
            Command::Reset => "Reset",
            Command::Selection => "Selection",
            Command::GetInfo => "GetInfo",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Subcommand {
    GetNextAssertion,
    ClientPin(ClientPinSub),
    CredMgmt(CredMgmtSub),
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Subcommand::GetNextAssertion => "GetNextAssertion",
            Subcommand::ClientPin(s) => s.name(),
            Subcommand::CredMgmt(s) => s.name(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("empty message")]
    Empty,
    #[error("unknown command byte {0:#04x}")]
    UnknownCommand(u8),
    #[error("unknown status byte {0:#04x}")]
    UnknownStatus(u8),
    #[error("malformed CBOR: {0}")]
    MalformedCbor(CborError),
    #[error("non-canonical CBOR: {0}")]
    NonCanonical(CborError),
    #[error("parameters are not a CBOR map")]
    ParamsNotMap,
    #[error("{0} carries no parameters")]
    UnexpectedParams(&'static str),
    #[error("{0} requires a parameter map")]
    MissingParams(&'static str),
    #[error("missing or unknown subcommand")]
    BadSubcommand,
    #[error("error status {0} carries a payload")]
    UnexpectedPayload(StatusCode),
}

impl From<CborError> for CodecError {
    fn from(e: CborError) -> Self {
        if e.is_non_canonical() {
            CodecError::NonCanonical(e)
        } else {
            CodecError::MalformedCbor(e)
        }
    }
}

fn decode_map(bytes: &[u8]) -> Result<CborMap, CodecError> {
    match decode_canonical(bytes)? {
        CborValue::Map(m) => Ok(m),
        _ => Err(CodecError::ParamsNotMap),
    }
}

/// A typed CTAP request. Fields are private so the subcommand can never
/// disagree with the parameter map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CtapRequest {
    command: Command,
    subcommand: Option<Subcommand>,
    params: Option<CborMap>,
}

impl CtapRequest {
    pub fn get_info() -> Self {
        Self::bare(Command::GetInfo)
    }

    pub fn reset() -> Self {
        Self::bare(Command::Reset)
    }

    pub fn selection() -> Self {
        Self::bare(Command::Selection)
    }

    pub fn get_next_assertion() -> Self {
        CtapRequest {
            command: Command::GetAssertion,
            subcommand: Some(Subcommand::GetNextAssertion),
            params: None,
        }
    }

    pub fn make_credential(params: CborMap) -> Self {
        CtapRequest { command: Command::MakeCredential, subcommand: None, params: Some(params) }
    }

    pub fn get_assertion(params: CborMap) -> Self {
        CtapRequest { command: Command::GetAssertion, subcommand: None, params: Some(params) }
    }

    /// `params` must not contain the subcommand key; it is inserted here.
    pub fn client_pin(sub: ClientPinSub, mut params: CborMap) -> Self {
        params.insert(CLIENT_PIN_SUBCOMMAND_KEY, sub.to_byte() as i64);
        CtapRequest {
            command: Command::ClientPin,
            subcommand: Some(Subcommand::ClientPin(sub)),
            params: Some(params),
        }
    }

    pub fn cred_mgmt(sub: CredMgmtSub, mut params: CborMap) -> Self {
        params.insert(CRED_MGMT_SUBCOMMAND_KEY, sub.to_byte() as i64);
        CtapRequest {
            command: Command::CredentialManagement,
            subcommand: Some(Subcommand::CredMgmt(sub)),
            params: Some(params),
        }
    }

    fn bare(command: Command) -> Self {
        CtapRequest { command, subcommand: None, params: None }
    }

    pub fn command(&self) -> Command {
        self.command
    }

    pub fn subcommand(&self) -> Option<Subcommand> {
        self.subcommand
    }

    pub fn params(&self) -> Option<&CborMap> {
        self.params.as_ref()
    }

    pub fn command_byte(&self) -> CommandByte {
        match (self.command, self.subcommand) {
            (Command::GetAssertion, Some(Subcommand::GetNextAssertion)) => {
                CommandByte::GetNextAssertion
            }
            (Command::MakeCredential, _) => CommandByte::MakeCredential,
            (Command::GetAssertion, _) => CommandByte::GetAssertion,
            (Command::CredentialManagement, _) => CommandByte::CredentialManagement,
            (Command::ClientPin, _) => CommandByte::ClientPin,
            (Command::Reset, _) => CommandByte::Reset,
            (Command::Selection, _) => CommandByte::Selection,
            (Command::GetInfo, _) => CommandByte::GetInfo,
        }
    }

    /// Display name including the subcommand, e.g. `CredentialManagement(DeleteCredential)`.
    pub fn label(&self) -> String {
        match self.subcommand {
            Some(sub) => format!("{}({})", self.command, sub.name()),
            None => self.command.to_string(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![self.command_byte().to_byte()];
        if let Some(p) = &self.params {
            out.extend(encode_canonical(&CborValue::Map(p.clone())));
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let (&first, rest) = bytes.split_first().ok_or(CodecError::Empty)?;
        let byte = CommandByte::from_byte(first).ok_or(CodecError::UnknownCommand(first))?;
        let params = if rest.is_empty() { None } else { Some(decode_map(rest)?) };
        let parameterless = |name: &'static str, req: CtapRequest| match params {
            Some(_) => Err(CodecError::UnexpectedParams(name)),
            None => Ok(req),
        };
        let need = |name: &'static str| params.clone().ok_or(CodecError::MissingParams(name));
        match byte {
            CommandByte::GetInfo => parameterless("GetInfo", Self::get_info()),
            CommandByte::Reset => parameterless("Reset", Self::reset()),
            CommandByte::Selection => parameterless("Selection", Self::selection()),
            CommandByte::GetNextAssertion => {
                parameterless("GetNextAssertion", Self::get_next_assertion())
            }
            CommandByte::MakeCredential => Ok(Self::make_credential(need("MakeCredential")?)),
            CommandByte::GetAssertion => Ok(Self::get_assertion(need("GetAssertion")?)),
            CommandByte::ClientPin => {
                let p = need("ClientPin")?;
                let sub = p
                    .get_int(CLIENT_PIN_SUBCOMMAND_KEY)
                    .and_then(CborValue::as_u64)
                    .and_then(|b| u8::try_from(b).ok())
                    .and_then(ClientPinSub::from_byte)
                    .ok_or(CodecError::BadSubcommand)?;
                Ok(CtapRequest {
                    command: Command::ClientPin,
                    subcommand: Some(Subcommand::ClientPin(sub)),
                    params: Some(p),
                })
            }
            CommandByte::CredentialManagement => {
                let p = need("CredentialManagement")?;
                let sub = p
                    .get_int(CRED_MGMT_SUBCOMMAND_KEY)
                    .and_then(CborValue::as_u64)
                    .and_then(|b| u8::try_from(b).ok())
                    .and_then(CredMgmtSub::from_byte)
                    .ok_or(CodecError::BadSubcommand)?;
                Ok(CtapRequest {
                    command: Command::CredentialManagement,
                    subcommand: Some(Subcommand::CredMgmt(sub)),
                    params: Some(p),
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CtapResponse {
    status: StatusCode,
    payload: Option<CborMap>,
}

impl CtapResponse {
    pub fn ok() -> Self {
        CtapResponse { status: StatusCode::Ok, payload: None }
    }

    pub fn ok_with(payload: CborMap) -> Self {
        CtapResponse { status: StatusCode::Ok, payload: Some(payload) }
    }

    pub fn error(status: StatusCode) -> Self {
        CtapResponse { status, payload: None }
    }

    pub fn status(&self) -> StatusCode {
        self.status
    }

    pub fn is_ok(&self) -> bool {
        self.status == StatusCode::Ok
    }

    pub fn payload(&self) -> Option<&CborMap> {
        self.payload.as_ref()
    }

    /// Integer-keyed payload field, or `None` for errors and missing keys.
    pub fn field(&self, key: i64) -> Option<&CborValue> {
        self.payload.as_ref()?.get_int(key)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![self.status.to_byte()];
        if let Some(p) = &self.payload {
            out.extend(encode_canonical(&CborValue::Map(p.clone())));
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let (&first, rest) = bytes.split_first().ok_or(CodecError::Empty)?;
        let status = StatusCode::from_byte(first).ok_or(CodecError::UnknownStatus(first))?;
        if rest.is_empty() {
            return Ok(CtapResponse { status, payload: None });
        }
        if status != StatusCode::Ok {
            return Err(CodecError::UnexpectedPayload(status));
        }
        Ok(CtapResponse { status, payload: Some(decode_map(rest)?) })
    }
}

impl From<StatusCode> for CtapResponse {
    fn from(s: StatusCode) -> Self {
        CtapResponse::error(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameterless_commands_are_one_byte() {
        assert_eq!(CtapRequest::get_info().encode(), [0x04]);
        assert_eq!(CtapRequest::reset().encode(), [0x07]);
        assert_eq!(CtapRequest::selection().encode(), [0x0b]);
        assert_eq!(CtapRequest::get_next_assertion().encode(), [0x08]);
    }

    #[test]
    fn ok_responses() {
        assert_eq!(CtapResponse::ok().encode(), [0x00]);
        let r = CtapResponse::ok_with(CborMap::new().with(3, "fido"));
        assert_eq!(r.encode(), [0x00, 0xa1, 0x03, 0x64, 0x66, 0x69, 0x64, 0x6f]);
        assert_eq!(CtapResponse::decode(&r.encode()).unwrap(), r);
    }

    #[test]
    fn subcommand_is_recovered() {
        let req = CtapRequest::cred_mgmt(CredMgmtSub::DeleteCredential, CborMap::new());
        let back = CtapRequest::decode(&req.encode()).unwrap();
        assert_eq!(back.subcommand(), Some(Subcommand::CredMgmt(CredMgmtSub::DeleteCredential)));
        assert_eq!(back.label(), "CredentialManagement(DeleteCredential)");
        assert_eq!(back, req);
    }

    #[test]
    fn decode_errors() {
        assert_eq!(CtapRequest::decode(&[]), Err(CodecError::Empty));
        assert_eq!(CtapRequest::decode(&[0x03]), Err(CodecError::UnknownCommand(0x03)));
        assert_eq!(CtapRequest::decode(&[0x04, 0xa0]), Err(CodecError::UnexpectedParams("GetInfo")));
        assert_eq!(CtapRequest::decode(&[0x01]), Err(CodecError::MissingParams("MakeCredential")));
        assert_eq!(CtapRequest::decode(&[0x06, 0xa0]), Err(CodecError::BadSubcommand));
        assert_eq!(CtapRequest::decode(&[0x02, 0x01]), Err(CodecError::ParamsNotMap));
        assert!(matches!(
            CtapRequest::decode(&[0x02, 0xa2, 0x02, 0x00, 0x01, 0x00]),
            Err(CodecError::NonCanonical(_))
        ));
        assert_eq!(CtapResponse::decode(&[0x99]), Err(CodecError::UnknownStatus(0x99)));
        assert_eq!(
            CtapResponse::decode(&[0x2e, 0xa0]),
            Err(CodecError::UnexpectedPayload(StatusCode::NoCredentials))
        );
    }

    #[test]
    fn status_table_is_consistent() {
        for s in StatusCode::ALL {
            assert_eq!(StatusCode::from_byte(s.to_byte()), Some(*s));
        }
        assert_eq!(StatusCode::from_byte(0x2e), Some(StatusCode::NoCredentials));
    }
}
