pub mod actors;
pub mod attacks;
pub mod authenticator;
pub mod cbor;
pub mod codec;
pub mod crypto;
pub mod dissect;
pub mod messages;
pub mod scenario;
pub mod transports;
