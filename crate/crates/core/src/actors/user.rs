//! The person holding the authenticator.
//!
//! The model is deterministic: it touches the device only while a flow it
//! started still expects a touch, and types its PIN only for flows that
//! expect user verification. Anything else is declined. A touch request
//! after the flow's touches are used up, an unexpected PIN prompt and
//! unexplained LED feedback go to the alarm log. A flow that expects no
//! touch at all has the user looking at the screen, not the device, so its
//! touch requests are declined without notice.

use crate::authenticator::{ApiClass, FeedbackEvent, PhysicalUser, PresenceDecision, PresenceRequest};

pub const DEFAULT_TOUCH_DELAY_MS: u64 = 800;

/// What a flow the user started leads them to expect from the device.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Expectation {
    pub uv: bool,
    pub max_up_grants: u32,
    pub destructive: bool,
}

impl Expectation {
    pub const fn new(uv: bool, max_up_grants: u32) -> Self {
        Expectation { uv, max_up_grants, destructive: false }
    }

    pub const fn destructive(mut self) -> Self {
        self.destructive = true;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AlarmReason {
    /// A touch was requested after the flow's touches were used up.
    ExtraPresence { request: String },
    /// The client asked for the PIN in a flow that never needs it.
    UnexpectedPinPrompt,
    /// The device signalled an API class the flow does not explain.
    UnexpectedFeedback { blinks: u8, command: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alarm {
    pub at_ms: u64,
    pub flow: Option<String>,
    pub reason: AlarmReason,
}

#[derive(Debug, Clone)]
struct ActiveFlow {
    name: String,
    expectation: Expectation,
    up_used: u32,
}

#[derive(Debug, Clone)]
pub struct UserModel {
    pin: String,
    touch_delay_ms: u64,
    active: Option<ActiveFlow>,
    alarm_log: Vec<Alarm>,
    observed_feedback: Vec<FeedbackEvent>,
    up_grants: u32,
    presence_requests: u32,
    pin_entries: u32,
    mistype_next: bool,
}

impl UserModel {
    pub fn new(pin: impl Into<String>) -> Self {
        UserModel {
            pin: pin.into(),
            touch_delay_ms: DEFAULT_TOUCH_DELAY_MS,
            active: None,
            alarm_log: Vec::new(),
            observed_feedback: Vec::new(),
            up_grants: 0,
            presence_requests: 0,
            pin_entries: 0,
            mistype_next: false,
        }
    }

    pub fn with_touch_delay(mut self, ms: u64) -> Self {
        self.touch_delay_ms = ms;
        self
    }

    pub fn pin(&self) -> &str {
        &self.pin
    }

    pub fn begin_flow(&mut self, name: impl Into<String>, expectation: Expectation) {
        self.active = Some(ActiveFlow { name: name.into(), expectation, up_used: 0 });
    }

    pub fn end_flow(&mut self) {
        self.active = None;
    }

    pub fn active_flow(&self) -> Option<&str> {
        self.active.as_ref().map(|f| f.name.as_str())
    }

    /// The next PIN typed will be wrong.
    pub fn mistype_next_pin(&mut self) {
        self.mistype_next = true;
    }

    /// The client asks for the PIN. Returns what the user types, if anything.
    pub fn enter_pin(&mut self, at_ms: u64) -> Option<String> {
        match &self.active {
            Some(f) if f.expectation.uv => {
                self.pin_entries += 1;
                if std::mem::take(&mut self.mistype_next) {
                    Some(format!("{}0", self.pin))
                } else {
                    Some(self.pin.clone())
                }
            }
            Some(f) => {
                let flow = Some(f.name.clone());
                self.alarm_log.push(Alarm { at_ms, flow, reason: AlarmReason::UnexpectedPinPrompt });
                None
            }
            None => None,
        }
    }

    pub fn alarms(&self) -> &[Alarm] {
        &self.alarm_log
    }

    pub fn alarmed(&self) -> bool {
        !self.alarm_log.is_empty()
    }

    pub fn observed_feedback(&self) -> &[FeedbackEvent] {
        &self.observed_feedback
    }

    /// Touches granted over the whole session.
    pub fn up_grants(&self) -> u32 {
        self.up_grants
    }

    pub fn presence_requests(&self) -> u32 {
        self.presence_requests
    }

    pub fn pin_entries(&self) -> u32 {
        self.pin_entries
    }
}

impl PhysicalUser for UserModel {
    fn request_presence(&mut self, request: &PresenceRequest) -> PresenceDecision {
        self.presence_requests += 1;
        let Some(flow) = self.active.as_mut() else {
            // Nobody is looking at the device.
            return PresenceDecision::Declined;
        };
        if flow.expectation.max_up_grants == 0 {
            return PresenceDecision::Declined;
        }
        if flow.up_used < flow.expectation.max_up_grants {
            flow.up_used += 1;
            self.up_grants += 1;
            return PresenceDecision::Granted { after_ms: self.touch_delay_ms };
        }
        let label = match request.subcommand {
            Some(sub) => format!("{}({})", request.command, sub.name()),
            None => request.command.to_string(),
        };
        self.alarm_log.push(Alarm {
            at_ms: request.at_ms,
            flow: Some(flow.name.clone()),
            reason: AlarmReason::ExtraPresence { request: label },
        });
        PresenceDecision::Declined
    }

    fn notice_feedback(&mut self, event: &FeedbackEvent) {
        self.observed_feedback.push(event.clone());
        let unexplained = match &self.active {
            None => true,
            Some(f) => event.class() == ApiClass::Destructive && !f.expectation.destructive,
        };
        if unexplained {
            self.alarm_log.push(Alarm {
                at_ms: event.at_ms,
                flow: self.active.as_ref().map(|f| f.name.clone()),
                reason: AlarmReason::UnexpectedFeedback { blinks: event.blinks, command: event.command.to_string() },
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::authenticator::Transport;
    use crate::codec::Command;

    fn req(command: Command) -> PresenceRequest {
        PresenceRequest { command, subcommand: None, at_ms: 5, transport: Transport::Usb }
    }

    #[test]
    fn one_touch_per_flow() {
        let mut u = UserModel::new("1234");
        u.begin_flow("authenticate", Expectation::new(false, 1));
        assert!(matches!(u.request_presence(&req(Command::GetAssertion)), PresenceDecision::Granted { .. }));
        assert_eq!(u.request_presence(&req(Command::Reset)), PresenceDecision::Declined);
        assert_eq!(u.alarms().len(), 1);
        assert_eq!(u.alarms()[0].reason, AlarmReason::ExtraPresence { request: "Reset".into() });
        assert_eq!(u.up_grants(), 1);
    }

    #[test]
    fn idle_user_declines_quietly() {
        let mut u = UserModel::new("1234");
        assert_eq!(u.request_presence(&req(Command::Reset)), PresenceDecision::Declined);
        assert!(!u.alarmed());
        assert_eq!(u.enter_pin(0), None);
        assert!(!u.alarmed());
    }

    #[test]
    fn touchless_flow_declines_quietly() {
        let mut u = UserModel::new("1234");
        u.begin_flow("get-info", Expectation::new(false, 0));
        assert_eq!(u.request_presence(&req(Command::Selection)), PresenceDecision::Declined);
        assert!(!u.alarmed());
        assert_eq!(u.presence_requests(), 1);
    }

    #[test]
    fn pin_only_for_uv_flows() {
        let mut u = UserModel::new("1234");
        u.begin_flow("get-info", Expectation::new(false, 0));
        assert_eq!(u.enter_pin(1), None);
        assert_eq!(u.alarms()[0].reason, AlarmReason::UnexpectedPinPrompt);

        let mut u = UserModel::new("1234");
        u.begin_flow("register", Expectation::new(true, 1));
        u.mistype_next_pin();
        assert_eq!(u.enter_pin(1).as_deref(), Some("12340"));
        assert_eq!(u.enter_pin(1).as_deref(), Some("1234"));
        assert!(!u.alarmed());
    }

    #[test]
    fn destructive_feedback_alarms_outside_destructive_flows() {
        let mut u = UserModel::new("1234");
        u.begin_flow("authenticate", Expectation::new(false, 1));
        u.notice_feedback(&FeedbackEvent { at_ms: 0, blinks: 1, command: Command::GetAssertion });
        assert!(!u.alarmed());
        u.notice_feedback(&FeedbackEvent { at_ms: 0, blinks: 2, command: Command::Reset });
        assert!(u.alarmed());

        let mut u = UserModel::new("1234");
        u.notice_feedback(&FeedbackEvent { at_ms: 0, blinks: 1, command: Command::GetInfo });
        assert!(u.alarmed());
    }
}
