//! Honest-side simulation: the user, the client acting for them, and the
//! relying parties they hold accounts with.

pub mod client;
pub mod rp;
pub mod templates;
pub mod user;

pub use client::{ClientSession, FlowError, PinChannel, HONEST_CLIENT_ID};
pub use rp::{AssertionRecord, CredentialRecord, RelyingParty, VerifyError};
pub use templates::{builtin_template, builtin_templates, load_templates, CredentialKind, RelyingPartyTemplate};
pub use user::{Alarm, AlarmReason, Expectation, UserModel};

#[cfg(test)]
mod tests;
