//! Agent-side client of the debug protocol: the seven instrumentation calls.

use std::path::Path;

use agentstepper_core::model::Body;
use agentstepper_core::protocol::{
    BreakpointKind, CommitRequest, DebugMessage, EventBegin, EventEnd, HelloAgent, Message, ResumeDecision,
};

use crate::wire::{ClientError, RawConnection};

/// A connected agent. Every breakpoint call blocks until the server
/// resumes the agent and returns the value to continue with: the original
/// one, or the operator's edit.
pub struct Debugger {
    wire: RawConnection,
    run_id: String,
    outstanding: Option<BreakpointKind>,
    closed: bool,
}

impl Debugger {
    /// Connects and registers the agent; `workspace` is the directory the
    /// server snapshots into git.
    pub fn connect(
        agent_name: &str,
        address: &str,
        port: u16,
        workspace: Option<&Path>,
    ) -> Result<Debugger, ClientError> {
        Self::connect_to(&format!("{address}:{port}"), agent_name, workspace)
    }

    /// Like [`connect`](Self::connect) with a `host:port` server string.
    pub fn connect_to(server: &str, agent_name: &str, workspace: Option<&Path>) -> Result<Debugger, ClientError> {
        let mut wire = RawConnection::connect(server)?;
        let hello = HelloAgent {
            agent_name: agent_name.to_string(),
            workspace_path: workspace.map(|p| p.to_string_lossy().into_owned()),
        };
        wire.send("", Message::HelloAgent(hello))?;
        let mut debugger = Debugger { wire, run_id: String::new(), outstanding: None, closed: false };
        match debugger.reply()? {
            Message::HelloAck(ack) => debugger.run_id = ack.run_id,
            other => return Err(ClientError::Unexpected(other.type_name())),
        }
        Ok(debugger)
    }

    /// Runs `f` with a connected debugger. The run completes if `f`
    /// returns `Ok` and is recorded as aborted otherwise.
    pub fn with_session<T, E: From<ClientError>>(
        server: &str,
        agent_name: &str,
        workspace: Option<&Path>,
        f: impl FnOnce(&mut Debugger) -> Result<T, E>,
    ) -> Result<T, E> {
        let mut debugger = Self::connect_to(server, agent_name, workspace)?;
        let value = f(&mut debugger)?;
        debugger.close()?;
        Ok(value)
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn begin_llm_query_breakpoint(&mut self, prompt: Body) -> Result<Body, ClientError> {
        let decision = self.begin(BreakpointKind::LlmQuery, prompt.clone(), None, true)?;
        Ok(decision.body.filter(|_| decision.edited).unwrap_or(prompt))
    }

    pub fn end_llm_query_breakpoint(&mut self, response: Body) -> Result<Body, ClientError> {
        let decision = self.end(BreakpointKind::LlmQuery, response.clone(), true)?;
        Ok(decision.body.filter(|_| decision.edited).unwrap_or(response))
    }

    pub fn begin_tool_invocation_breakpoint(&mut self, tool: &str, args: Body) -> Result<(String, Body), ClientError> {
        let decision = self.begin(BreakpointKind::ToolInvocation, args.clone(), Some(tool.to_string()), true)?;
        if !decision.edited {
            return Ok((tool.to_string(), args));
        }
        Ok((decision.tool_name.unwrap_or_else(|| tool.to_string()), decision.body.unwrap_or(args)))
    }

    pub fn end_tool_invocation_breakpoint(&mut self, result: Body) -> Result<Body, ClientError> {
        let decision = self.end(BreakpointKind::ToolInvocation, result.clone(), true)?;
        Ok(decision.body.filter(|_| decision.edited).unwrap_or(result))
    }

    /// Returns true if changes were committed.
    pub fn commit_agent_changes(
        &mut self,
        summary: Option<&str>,
        description: Option<&str>,
    ) -> Result<bool, ClientError> {
        self.ensure_open()?;
        let request =
            CommitRequest { summary: summary.map(str::to_string), description: description.map(str::to_string) };
        self.wire.send(&self.run_id, Message::CommitRequest(request))?;
        match self.reply()? {
            Message::CommitAck(ack) => Ok(ack.committed),
            other => Err(ClientError::Unexpected(other.type_name())),
        }
    }

    pub fn post_debug_message(&mut self, message: &str) -> Result<(), ClientError> {
        self.ensure_open()?;
        self.wire.send(&self.run_id, Message::DebugMessage(DebugMessage { text: message.to_string() }))
    }

    /// Sends the begin half of a breakpoint pair and returns the raw resume.
    pub fn begin(
        &mut self,
        kind: BreakpointKind,
        body: Body,
        tool_name: Option<String>,
        holdable: bool,
    ) -> Result<ResumeDecision, ClientError> {
        self.ensure_open()?;
        if let Some(open) = self.outstanding {
            return Err(ClientError::Usage(format!("begin {} while {} is still open", kind.as_str(), open.as_str())));
        }
        self.wire
            .send(&self.run_id, Message::EventBegin(EventBegin { event_kind: kind, body, tool_name, holdable }))?;
        self.outstanding = Some(kind);
        self.resume()
    }

    /// Sends the end half of a breakpoint pair and returns the raw resume.
    pub fn end(&mut self, kind: BreakpointKind, body: Body, holdable: bool) -> Result<ResumeDecision, ClientError> {
        self.ensure_open()?;
        if self.outstanding != Some(kind) {
            return Err(ClientError::Usage(format!("end {} without a matching begin", kind.as_str())));
        }
        self.wire.send(&self.run_id, Message::EventEnd(EventEnd { event_kind: kind, body, holdable }))?;
        self.outstanding = None;
        self.resume()
    }

    /// Ends the run normally.
    pub fn close(mut self) -> Result<(), ClientError> {
        self.goodbye()
    }

    fn goodbye(&mut self) -> Result<(), ClientError> {
        if self.closed {
            return Ok(());
        }
        self.closed = true;
        let sent = self.wire.send(&self.run_id, Message::Goodbye);
        self.wire.close();
        sent
    }

    fn ensure_open(&self) -> Result<(), ClientError> {
        if self.closed {
            Err(ClientError::Usage("debugger is closed".into()))
        } else {
            Ok(())
        }
    }

    fn resume(&mut self) -> Result<ResumeDecision, ClientError> {
        match self.reply()? {
            Message::Resume(decision) => Ok(decision),
            other => Err(ClientError::Unexpected(other.type_name())),
        }
    }

    fn reply(&mut self) -> Result<Message, ClientError> {
        loop {
            let Some(envelope) = self.wire.recv(None)? else { continue };
            match envelope.message {
                Message::Fatal(fatal) => {
                    self.closed = true;
                    return Err(ClientError::Fatal(fatal.reason));
                }
                message => return Ok(message),
            }
        }
    }
}

/// Dropping without [`close`](Debugger::close) disconnects without a
/// goodbye, and the server records the run as aborted.
impl Drop for Debugger {
    fn drop(&mut self) {
        if !self.closed {
            self.closed = true;
            self.wire.close();
        }
    }
}
