//! Execution-state machine deciding which events hold the agent.
//!
//! A live run is `running`, `stepping` or `paused`. Stepping holds every
//! holdable event; running holds nothing unless a pause was armed, in which
//! case the next holdable event holds. While paused, exactly one [`HoldSlot`]
//! exists and the agent blocks until a control command releases it.

use thiserror::Error;

use crate::model::{Body, ControlState, EventKind, ExecutionState, Phase};
use crate::protocol::{ControlCommand, ResumeAction, ResumeDecision};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Hold,
    AutoResume,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error("invalid-state: {0}")]
    InvalidState(String),
    #[error("stale-edit: {0}")]
    StaleEdit(String),
    #[error("invalid-edit: {0}")]
    InvalidEdit(String),
}

impl EngineError {
    pub fn reason(&self) -> &'static str {
        match self {
            EngineError::InvalidState(_) => "invalid-state",
            EngineError::StaleEdit(_) => "stale-edit",
            EngineError::InvalidEdit(_) => "invalid-edit",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HoldSlot {
    pub event_id: u64,
    pub event_kind: EventKind,
    pub phase: Phase,
    pub original_body: Body,
    pub original_tool_name: Option<String>,
    pub submitted_edit: Option<(Body, Option<String>)>,
}

impl HoldSlot {
    fn resolve(self, action: ResumeAction) -> (HoldSlot, ResumeDecision) {
        let decision = match &self.submitted_edit {
            Some((body, tool_name)) => {
                let tool_changed = tool_name.is_some() && *tool_name != self.original_tool_name;
                if *body == self.original_body && !tool_changed {
                    ResumeDecision::unedited(action)
                } else {
                    ResumeDecision {
                        action,
                        edited: true,
                        body: Some(body.clone()),
                        tool_name: if tool_changed { tool_name.clone() } else { None },
                    }
                }
            }
            None => ResumeDecision::unedited(action),
        };
        (self, decision)
    }
}

/// A hold released by a control command, together with the decision the
/// agent receives.
#[derive(Clone, Debug, PartialEq)]
pub struct Release {
    pub slot: HoldSlot,
    pub decision: ResumeDecision,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Mode {
    Running,
    Stepping,
}

#[derive(Clone, Debug)]
pub struct BreakpointEngine {
    mode: Mode,
    pause_armed: bool,
    hold: Option<HoldSlot>,
    closed: bool,
}

impl Default for BreakpointEngine {
    fn default() -> Self {
        Self::new(ControlState::Running)
    }
}

impl BreakpointEngine {
    /// `initial` may be running or stepping; paused starts as running with a
    /// pause armed, so the first event holds.
    pub fn new(initial: ControlState) -> Self {
        let (mode, pause_armed) = match initial {
            ControlState::Running => (Mode::Running, false),
            ControlState::Stepping => (Mode::Stepping, false),
            ControlState::Paused => (Mode::Running, true),
        };
        BreakpointEngine { mode, pause_armed, hold: None, closed: false }
    }

    pub fn state(&self) -> ExecutionState {
        match (&self.hold, self.mode) {
            (Some(slot), _) => ExecutionState { state: ControlState::Paused, held_event_id: Some(slot.event_id) },
            (None, Mode::Running) => ExecutionState { state: ControlState::Running, held_event_id: None },
            (None, Mode::Stepping) => ExecutionState { state: ControlState::Stepping, held_event_id: None },
        }
    }

    pub fn pause_armed(&self) -> bool {
        self.pause_armed
    }

    pub fn hold(&self) -> Option<&HoldSlot> {
        self.hold.as_ref()
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Decides whether a freshly appended event holds.
    pub fn on_event(
        &mut self,
        event_id: u64,
        event_kind: EventKind,
        body: &Body,
        tool_name: Option<&str>,
        holdable: bool,
    ) -> Verdict {
        if self.closed || !holdable || self.hold.is_some() {
            return Verdict::AutoResume;
        }
        if self.mode == Mode::Stepping || self.pause_armed {
            self.pause_armed = false;
            self.hold = Some(HoldSlot {
                event_id,
                event_kind,
                phase: event_kind.phase(),
                original_body: body.clone(),
                original_tool_name: tool_name.map(str::to_string),
                submitted_edit: None,
            });
            Verdict::Hold
        } else {
            Verdict::AutoResume
        }
    }

    pub fn on_control(&mut self, command: ControlCommand) -> Result<Option<Release>, EngineError> {
        if self.closed {
            return Err(EngineError::InvalidState("run is not live".into()));
        }
        let release = match command {
            ControlCommand::Pause => {
                if self.hold.is_none() {
                    self.pause_armed = true;
                }
                return Ok(None);
            }
            ControlCommand::Step => {
                self.mode = Mode::Stepping;
                ResumeAction::Step
            }
            ControlCommand::Continue => {
                self.mode = Mode::Running;
                ResumeAction::Continue
            }
        };
        self.pause_armed = false;
        Ok(self.hold.take().map(|slot| {
            let (slot, decision) = slot.resolve(release);
            Release { slot, decision }
        }))
    }

    pub fn submit_edit(
        &mut self,
        event_id: u64,
        body: Body,
        tool_name: Option<String>,
    ) -> Result<&HoldSlot, EngineError> {
        if self.closed {
            return Err(EngineError::InvalidState("run is not live".into()));
        }
        let Some(slot) = self.hold.as_mut() else {
            return Err(EngineError::StaleEdit(format!("event {event_id} is not held")));
        };
        if slot.event_id != event_id {
            return Err(EngineError::StaleEdit(format!(
                "event {event_id} is not held (held event is {})",
                slot.event_id
            )));
        }
        if tool_name.is_some() && slot.event_kind != EventKind::ToolInvocation {
            return Err(EngineError::InvalidEdit("tool_name can only change on a tool invocation".into()));
        }
        slot.submitted_edit = Some((body, tool_name));
        Ok(slot)
    }

    /// Releases an outstanding hold after a timeout; execution continues.
    pub fn release_on_timeout(&mut self) -> Option<Release> {
        let slot = self.hold.take()?;
        self.mode = Mode::Running;
        let (slot, decision) = slot.resolve(ResumeAction::Continue);
        Some(Release { slot, decision })
    }

    /// Ends the run. Any hold is released with continue and no edit, so a
    /// blocked agent terminates cleanly.
    pub fn close(&mut self) -> Option<Release> {
        self.closed = true;
        self.pause_armed = false;
        self.hold.take().map(|slot| Release { slot, decision: ResumeDecision::unedited(ResumeAction::Continue) })
    }
}
