//! UI-side driver for tests: lists runs, subscribes, steers holds.

use std::collections::HashSet;
use std::time::{Duration, Instant};

use agentstepper_core::model::{Body, RunRecord, RunStatus};
use agentstepper_core::protocol::{
    Control, ControlCommand, Edit, Envelope, ImportRun, Message, StateChanged, Subscribe,
};

use crate::wire::{ClientError, RawConnection};

pub struct UiClient {
    wire: RawConnection,
    /// Every envelope received so far, in arrival order.
    pub received: Vec<Envelope>,
    cursor: usize,
}

impl UiClient {
    pub fn connect(server: &str) -> Result<UiClient, ClientError> {
        Ok(UiClient { wire: RawConnection::connect(server)?, received: Vec::new(), cursor: 0 })
    }

    pub fn send(&mut self, run_id: &str, message: Message) -> Result<(), ClientError> {
        self.wire.send(run_id, message)
    }

    /// Sends a raw text frame.
    pub fn send_text(&mut self, text: &str) -> Result<(), ClientError> {
        self.wire.send_text(text)
    }

    pub fn list_runs(&mut self, timeout: Duration) -> Result<Vec<RunRecord>, ClientError> {
        self.send("", Message::ListRuns)?;
        match self.wait_for(timeout, |e| matches!(e.message, Message::RunList(_)))? {
            Some(Envelope { message: Message::RunList(list), .. }) => Ok(list.runs),
            _ => Err(ClientError::Unexpected("timeout waiting for run_list")),
        }
    }

    pub fn subscribe(&mut self, run_id: &str) -> Result<(), ClientError> {
        self.send("", Message::Subscribe(Subscribe { run_id: Some(run_id.to_string()) }))
    }

    pub fn control(&mut self, run_id: &str, command: ControlCommand) -> Result<(), ClientError> {
        self.send(run_id, Message::Control(Control { command }))
    }

    pub fn edit(
        &mut self,
        run_id: &str,
        event_id: u64,
        body: Body,
        tool_name: Option<String>,
    ) -> Result<(), ClientError> {
        self.send(run_id, Message::Edit(Edit { run_id: run_id.to_string(), event_id, body, tool_name }))
    }

    pub fn import(&mut self, document: &str) -> Result<(), ClientError> {
        self.send("", Message::ImportRun(ImportRun { document: document.to_string() }))
    }

    /// Returns the next not yet consumed envelope matching `pred`, reading
    /// from the socket as needed. Envelopes skipped on the way stay in
    /// `received` but are marked consumed.
    pub fn wait_for(
        &mut self,
        timeout: Duration,
        mut pred: impl FnMut(&Envelope) -> bool,
    ) -> Result<Option<Envelope>, ClientError> {
        let deadline = Instant::now() + timeout;
        loop {
            while self.cursor < self.received.len() {
                let envelope = &self.received[self.cursor];
                self.cursor += 1;
                if pred(envelope) {
                    return Ok(Some(envelope.clone()));
                }
            }
            let now = Instant::now();
            if now >= deadline {
                return Ok(None);
            }
            if let Some(envelope) = self.wire.recv(Some(deadline - now))? {
                self.received.push(envelope);
            }
        }
    }

    /// Waits for the next state_changed of `run_id` matching `pred`.
    pub fn wait_state(
        &mut self,
        run_id: &str,
        timeout: Duration,
        mut pred: impl FnMut(&StateChanged) -> bool,
    ) -> Result<Option<StateChanged>, ClientError> {
        let found = self.wait_for(timeout, |e| {
            e.run_id == run_id && matches!(&e.message, Message::StateChanged(state) if pred(state))
        })?;
        Ok(found.and_then(|e| match e.message {
            Message::StateChanged(state) => Some(state),
            _ => None,
        }))
    }

    /// Collects everything that arrives within `quiet` of the previous
    /// envelope.
    pub fn drain(&mut self, quiet: Duration) -> Result<Vec<Envelope>, ClientError> {
        let mut out = Vec::new();
        while let Some(envelope) = self.wait_for(quiet, |_| true)? {
            out.push(envelope);
        }
        Ok(out)
    }

    /// Steps through every hold of a subscribed run until it is no longer
    /// live, calling `on_hold` with each held event id before stepping.
    /// Returns the number of step commands sent.
    pub fn steer(
        &mut self,
        run_id: &str,
        timeout: Duration,
        mut on_hold: impl FnMut(&mut UiClient, u64) -> Result<(), ClientError>,
    ) -> Result<usize, ClientError> {
        let deadline = Instant::now() + timeout;
        let mut seen = HashSet::new();
        let mut steps = 0;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            let Some(state) = self.wait_state(run_id, left, |_| true)? else {
                return Err(ClientError::Unexpected("timeout while steering"));
            };
            if state.status != RunStatus::Live {
                return Ok(steps);
            }
            if let Some(held) = state.held_event_id {
                if seen.insert(held) {
                    on_hold(self, held)?;
                    self.control(run_id, ControlCommand::Step)?;
                    steps += 1;
                }
            }
        }
    }

    pub fn close(mut self) {
        self.wire.close();
    }
}
