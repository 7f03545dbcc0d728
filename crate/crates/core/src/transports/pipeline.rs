//! Client-side links and the man-in-the-middle interposition pipeline.

use thiserror::Error;

use super::apdu::{self, Apdu, ApduError, ApduResponse};
use super::device::VirtualDevice;
use super::hid::{self, CtapHidFrame, FramingError, HidCommand, HidErrorCode, InitResponse};
use super::trace::{Direction, TransportFrame};
use crate::authenticator::{Countermeasure, PhysicalUser, RequestContext, Transport};
use crate::codec::{CodecError, CtapRequest, CtapResponse};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SessionError {
    #[error("framing: {0}")]
    Framing(#[from] FramingError),
    #[error("apdu: {0}")]
    Apdu(#[from] ApduError),
    #[error("device answered with {}", .0.name())]
    Hid(HidErrorCode),
    #[error("codec: {0}")]
    Codec(#[from] CodecError),
    #[error("INIT response malformed or nonce mismatch")]
    BadInit,
    #[error("no response outstanding on this channel")]
    NoResponse,
    #[error("message dropped in transit")]
    Dropped,
}

/// One client's attachment to the device: a CTAPHID channel over USB, a
/// selected applet over NFC, or direct calls with no wire at all.
#[derive(Debug, Clone)]
pub struct Link {
    transport: Transport,
    client_id: String,
    channel_id: Option<u32>,
    nfc_selected: bool,
    init_nonce: u64,
}

impl Link {
    pub fn new(transport: Transport, client_id: impl Into<String>) -> Self {
        Link { transport, client_id: client_id.into(), channel_id: None, nfc_selected: false, init_nonce: 0 }
    }

    pub fn transport(&self) -> Transport {
        self.transport
    }

    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    pub fn channel_id(&self) -> Option<u32> {
        self.channel_id
    }

    /// Forget the channel or applet selection, as after the device lost power.
    pub fn reset(&mut self) {
        self.channel_id = None;
        self.nfc_selected = false;
    }

    /// CTAPHID INIT on the broadcast channel. Returns the device's answer.
    pub fn hid_init(&mut self, dev: &mut VirtualDevice, user: &mut dyn PhysicalUser) -> Result<InitResponse, SessionError> {
        self.init_nonce += 1;
        let nonce = self.init_nonce.to_be_bytes();
        let frames = hid::fragment(hid::BROADCAST_CID, HidCommand::Init, &nonce)?;
        let mut reply = Vec::new();
        for f in &frames {
            reply.extend(dev.hid_write(&f.to_report(), &self.client_id, user));
        }
        let msg = hid::recv(&reply)?;
        let resp = InitResponse::decode(&msg.data).ok_or(SessionError::BadInit)?;
        if resp.nonce != nonce || msg.command != HidCommand::Init {
            return Err(SessionError::BadInit);
        }
        self.channel_id = Some(resp.channel_id);
        Ok(resp)
    }

    fn nfc_select(&mut self, dev: &mut VirtualDevice, user: &mut dyn PhysicalUser) -> Result<(), SessionError> {
        let raw = dev.nfc_transmit(&Apdu::select_fido().encode(), &self.client_id, user);
        let resp = ApduResponse::decode(&raw)?;
        if resp.sw != apdu::SW_OK {
            return Err(ApduError::BadStatusWord(resp.sw).into());
        }
        self.nfc_selected = true;
        Ok(())
    }

    /// Writes a CBOR request without waiting for the answer. Fails when the
    /// device immediately rejects it, e.g. because another channel is busy.
    pub fn submit(&mut self, dev: &mut VirtualDevice, user: &mut dyn PhysicalUser, bytes: &[u8]) -> Result<(), SessionError> {
        let cid = match self.channel_id {
            Some(c) => c,
            None => self.hid_init(dev, user)?.channel_id,
        };
        for f in hid::send(cid, bytes)? {
            let immediate = dev.hid_write(&f.to_report(), &self.client_id, user);
            if let Some(err) = immediate.iter().find(|f| f.command() == Some(HidCommand::Error)) {
                let code = err.data.first().and_then(|&c| HidErrorCode::from_code(c)).unwrap_or(HidErrorCode::Other);
                return Err(SessionError::Hid(code));
            }
        }
        Ok(())
    }

    /// Waits for the answer to [`Self::submit`], skipping keepalives.
    pub fn collect(&mut self, dev: &mut VirtualDevice) -> Result<Vec<u8>, SessionError> {
        let cid = self.channel_id.ok_or(SessionError::NoResponse)?;
        if dev.busy_channel() != Some(cid) {
            return Err(SessionError::NoResponse);
        }
        let frames: Vec<CtapHidFrame> = dev
            .hid_read()
            .into_iter()
            .filter(|f| f.channel_id == cid && f.command() != Some(HidCommand::Keepalive))
            .collect();
        let msg = hid::recv(&frames)?;
        match msg.command {
            HidCommand::Cbor => Ok(msg.data),
            HidCommand::Error => Err(SessionError::Hid(
                msg.data.first().and_then(|&c| HidErrorCode::from_code(c)).unwrap_or(HidErrorCode::Other),
            )),
            _ => Err(SessionError::NoResponse),
        }
    }

    /// Sends raw CTAP bytes and returns the raw response bytes.
    pub fn send_bytes(&mut self, dev: &mut VirtualDevice, user: &mut dyn PhysicalUser, bytes: &[u8]) -> Result<Vec<u8>, SessionError> {
        match self.transport {
            Transport::Usb => {
                self.submit(dev, user, bytes)?;
                self.collect(dev)
            }
            Transport::Nfc => {
                if !self.nfc_selected {
                    self.nfc_select(dev, user)?;
                }
                let client_id = self.client_id.clone();
                let out = apdu::exchange(&apdu::wrap(bytes), |a| {
                    let raw = dev.nfc_transmit(&a.encode(), &client_id, user);
                    ApduResponse::decode(&raw).unwrap_or(ApduResponse::status(apdu::SW_WRONG_LENGTH))
                });
                if let Err(ApduError::BadStatusWord(apdu::SW_CONDITIONS_NOT_SATISFIED)) = out {
                    self.nfc_selected = false;
                }
                Ok(out?)
            }
            Transport::Direct => {
                let mut ctx = RequestContext::new(Transport::Direct, &self.client_id, user);
                let auth = dev.authenticator_mut();
                let out = auth.process_bytes(bytes, &mut ctx);
                auth.advance(out.busy_ms());
                Ok(out.response.encode())
            }
        }
    }

    pub fn transact(&mut self, dev: &mut VirtualDevice, user: &mut dyn PhysicalUser, req: &CtapRequest) -> Result<CtapResponse, SessionError> {
        let raw = self.send_bytes(dev, user, &req.encode())?;
        Ok(CtapResponse::decode(&raw)?)
    }
}

/// What a man-in-the-middle does with an intercepted client request.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Pass,
    Replace(CtapRequest),
    /// Send each request in turn; the client sees the last response.
    InjectSequence(Vec<CtapRequest>),
    /// Answer the client without touching the device.
    Respond(CtapResponse),
    Drop,
}

/// The MitM's own connection to the device, usable from inside a hook.
pub struct Upstream<'a> {
    link: &'a mut Link,
    dev: &'a mut VirtualDevice,
    user: &'a mut dyn PhysicalUser,
}

impl Upstream<'_> {
    pub fn send(&mut self, req: &CtapRequest) -> Result<CtapResponse, SessionError> {
        self.link.transact(self.dev, self.user, req)
    }

    pub fn now(&self) -> u64 {
        self.dev.now()
    }

    pub fn transport(&self) -> Transport {
        self.link.transport()
    }

    /// Countermeasure that denied the last request. Lab bookkeeping, not
    /// something a real relay could observe.
    pub fn last_block(&self) -> Option<Countermeasure> {
        self.dev.authenticator().last_block()
    }
}

/// Hooks see decoded requests and responses; framing is the pipeline's job.
pub trait MitmHook {
    fn intercept(&mut self, req: &CtapRequest, upstream: &mut Upstream<'_>) -> Action;

    fn response_filter(&mut self, _req: &CtapRequest, resp: CtapResponse) -> CtapResponse {
        resp
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PassThrough;

impl MitmHook for PassThrough {
    fn intercept(&mut self, _req: &CtapRequest, _upstream: &mut Upstream<'_>) -> Action {
        Action::Pass
    }
}

/// Channel id the client-to-relay leg is logged under.
pub const RELAY_CHANNEL_ID: u32 = 0x0000_0001;

/// A client's route to the device, optionally through a relay running a
/// [`MitmHook`]. With a relay, the client-to-relay leg is framed, logged in
/// [`Pipeline::client_trace`] and decoded again before the hook sees it.
#[derive(Debug, Clone)]
pub struct Pipeline {
    client_id: String,
    upstream: Link,
    relayed: bool,
    client_trace: Vec<TransportFrame>,
}

impl Pipeline {
    pub fn direct(transport: Transport, client_id: impl Into<String>) -> Self {
        let client_id = client_id.into();
        Pipeline { upstream: Link::new(transport, client_id.clone()), client_id, relayed: false, client_trace: Vec::new() }
    }

    pub fn relayed(transport: Transport, client_id: impl Into<String>, relay_id: impl Into<String>) -> Self {
        Pipeline {
            client_id: client_id.into(),
            upstream: Link::new(transport, relay_id),
            relayed: true,
            client_trace: Vec::new(),
        }
    }

    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    pub fn transport(&self) -> Transport {
        self.upstream.transport()
    }

    pub fn link_mut(&mut self) -> &mut Link {
        &mut self.upstream
    }

    pub fn client_trace(&self) -> &[TransportFrame] {
        &self.client_trace
    }

    pub fn transact(
        &mut self,
        dev: &mut VirtualDevice,
        user: &mut dyn PhysicalUser,
        hook: Option<&mut (dyn MitmHook + '_)>,
        req: &CtapRequest,
    ) -> Result<CtapResponse, SessionError> {
        let hook = match hook {
            Some(h) if self.relayed => h,
            _ => return self.upstream.transact(dev, user, req),
        };
        let at = dev.now();
        let seen = CtapRequest::decode(&self.relay_leg(at, Direction::ToAuthenticator, &req.encode())?)?;
        let mut up = Upstream { link: &mut self.upstream, dev, user };
        let resp = match hook.intercept(&seen, &mut up) {
            Action::Pass => up.send(&seen)?,
            Action::Replace(other) => up.send(&other)?,
            Action::InjectSequence(list) => {
                let mut last = None;
                for r in &list {
                    last = Some(up.send(r)?);
                }
                last.ok_or(SessionError::Dropped)?
            }
            Action::Respond(r) => r,
            Action::Drop => return Err(SessionError::Dropped),
        };
        let resp = hook.response_filter(&seen, resp);
        let at = dev.now();
        let back = self.relay_leg(at, Direction::ToClient, &resp.encode())?;
        Ok(CtapResponse::decode(&back)?)
    }

    /// Frames `bytes` on the client-to-relay leg, logs the frames and
    /// returns what the far end reassembles.
    fn relay_leg(&mut self, at: u64, direction: Direction, bytes: &[u8]) -> Result<Vec<u8>, SessionError> {
        let transport = self.transport();
        let mut log = |raw: Vec<u8>, direction| self.client_trace.push(TransportFrame { timestamp: at, transport, direction, raw });
        match transport {
            Transport::Usb => {
                let frames = hid::send(RELAY_CHANNEL_ID, bytes)?;
                let parsed = frames
                    .iter()
                    .map(|f| {
                        let report = f.to_report();
                        log(report.to_vec(), direction);
                        CtapHidFrame::from_report(&report)
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(hid::recv(&parsed)?.data)
            }
            Transport::Nfc if direction == Direction::ToAuthenticator => {
                let apdus = apdu::wrap(bytes)
                    .into_iter()
                    .map(|a| {
                        let raw = a.encode();
                        log(raw.clone(), direction);
                        Apdu::decode(&raw)
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(apdu::unwrap(&apdus)?)
            }
            Transport::Nfc => {
                let parts = apdu::split_response(bytes)
                    .into_iter()
                    .map(|p| {
                        let raw = p.encode();
                        log(raw.clone(), direction);
                        ApduResponse::decode(&raw)
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(apdu::join_response(&parts)?)
            }
            Transport::Direct => Ok(bytes.to_vec()),
        }
    }
}

/// Runs `requests` from one client through an optional hook and returns the
/// client's responses plus the device-side frame log.
pub fn run_pipeline(
    requests: &[CtapRequest],
    dev: &mut VirtualDevice,
    user: &mut dyn PhysicalUser,
    mut hook: Option<&mut (dyn MitmHook + '_)>,
    transport: Transport,
    client_id: &str,
) -> (Vec<Result<CtapResponse, SessionError>>, Vec<TransportFrame>) {
    let mut pipe = match hook {
        Some(_) => Pipeline::relayed(transport, client_id, "mitm-relay"),
        None => Pipeline::direct(transport, client_id),
    };
    let mut responses = Vec::with_capacity(requests.len());
    for r in requests {
        responses.push(pipe.transact(dev, user, hook.as_deref_mut(), r));
    }
    (responses, dev.take_trace())
}
