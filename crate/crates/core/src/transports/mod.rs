//! Simulated wire layers: CTAPHID over a virtual USB channel, ISO 7816
//! APDUs over a virtual NFC channel, and the relay pipeline a
//! man-in-the-middle sits in.

pub mod apdu;
pub mod device;
pub mod hid;
pub mod pipeline;
pub mod trace;

pub use device::VirtualDevice;
pub use pipeline::{run_pipeline, Action, Link, MitmHook, PassThrough, Pipeline, SessionError, Upstream};
pub use trace::{Direction, TransportFrame};
