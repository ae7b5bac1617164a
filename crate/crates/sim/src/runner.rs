//! Executes an [`AgentScript`] against a debug server.

use std::io::{Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::time::{Duration, Instant};

use agentstepper_core::model::{Body, RunStatus, Trajectory};
use agentstepper_core::protocol::{BreakpointKind, ResumeDecision};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::client::Debugger;
use crate::script::{build_prompt, execute_call, AgentScript};
use crate::wire::ClientError;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("invalid script: {0}")]
    Script(String),
    #[error("sandbox {0} does not exist")]
    Sandbox(String),
    #[error("report has no recorded trajectory")]
    NoTrajectory,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Call {
    BeginLlmQuery,
    EndLlmQuery,
    BeginToolInvocation,
    EndToolInvocation,
    CommitAgentChanges,
    PostDebugMessage,
}

impl Call {
    pub fn is_breakpoint(&self) -> bool {
        matches!(self, Call::BeginLlmQuery | Call::EndLlmQuery | Call::BeginToolInvocation | Call::EndToolInvocation)
    }
}

/// One API call: what the agent sent and what it continued with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub cycle: usize,
    pub call: Call,
    pub sent: Body,
    pub received: Body,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_sent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_received: Option<String>,
    pub edited: bool,
}

impl CallRecord {
    /// Sent and received payloads serialize to the same bytes.
    pub fn round_trip_identical(&self) -> bool {
        serde_json::to_string(&self.sent).ok() == serde_json::to_string(&self.received).ok()
            && self.tool_sent == self.tool_received
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptReport {
    pub script: AgentScript,
    pub run_id: String,
    pub calls: Vec<CallRecord>,
    /// Reason given by the server if it ended the session.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fatal: Option<String>,
    /// The run's trajectory document as persisted by the server.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<String>,
}

impl ScriptReport {
    pub fn breakpoint_calls(&self) -> impl Iterator<Item = &CallRecord> {
        self.calls.iter().filter(|c| c.call.is_breakpoint())
    }

    pub fn identical_round_trips(&self) -> usize {
        self.breakpoint_calls().filter(|c| !c.edited && c.round_trip_identical()).count()
    }

    pub fn trajectory(&self) -> Option<Trajectory> {
        self.trajectory.as_deref().and_then(|doc| Trajectory::parse_document(doc.as_bytes()).ok())
    }
}

/// Runs `script` as an agent whose workspace is `sandbox`. A fatal error
/// from the server ends the script early and is recorded in the report.
pub fn run_script(script: &AgentScript, server: &str, sandbox: &Path) -> Result<ScriptReport, SimError> {
    script.validate().map_err(SimError::Script)?;
    if !sandbox.is_dir() {
        return Err(SimError::Sandbox(sandbox.display().to_string()));
    }
    let sandbox = sandbox.canonicalize().map_err(|_| SimError::Sandbox(sandbox.display().to_string()))?;
    let mut debugger = Debugger::connect_to(server, &script.agent_name, Some(&sandbox))?;
    let mut report = ScriptReport {
        script: script.clone(),
        run_id: debugger.run_id().to_string(),
        calls: Vec::new(),
        fatal: None,
        trajectory: None,
    };
    match drive(script, &mut debugger, &sandbox, &mut report.calls) {
        Ok(()) => debugger.close()?,
        Err(ClientError::Fatal(reason)) => report.fatal = Some(reason),
        Err(e) => return Err(e.into()),
    }
    report.trajectory = fetch_trajectory(server, &report.run_id, Duration::from_secs(10));
    Ok(report)
}

fn drive(
    script: &AgentScript,
    debugger: &mut Debugger,
    sandbox: &Path,
    calls: &mut Vec<CallRecord>,
) -> Result<(), ClientError> {
    let mut observation: Option<Body> = None;
    for (index, cycle) in script.cycles.iter().enumerate() {
        let record = |call, sent: &Body, received: &Body, decision: &ResumeDecision| CallRecord {
            cycle: index,
            call,
            sent: sent.clone(),
            received: received.clone(),
            tool_sent: None,
            tool_received: None,
            edited: decision.edited,
        };

        let prompt = build_prompt(&cycle.prompt, observation.as_ref());
        let decision = debugger.begin(BreakpointKind::LlmQuery, prompt.clone(), None, cycle.holdable.query_begin)?;
        let received = continue_with(&decision, &prompt);
        calls.push(record(Call::BeginLlmQuery, &prompt, &received, &decision));

        let decision = debugger.end(BreakpointKind::LlmQuery, cycle.response.clone(), cycle.holdable.query_end)?;
        let received = continue_with(&decision, &cycle.response);
        calls.push(record(Call::EndLlmQuery, &cycle.response, &received, &decision));

        let tool = &cycle.tool;
        let decision = debugger.begin(
            BreakpointKind::ToolInvocation,
            tool.args.clone(),
            Some(tool.name.clone()),
            cycle.holdable.tool_begin,
        )?;
        let args = continue_with(&decision, &tool.args);
        let name = decision.tool_name.clone().filter(|_| decision.edited).unwrap_or_else(|| tool.name.clone());
        calls.push(CallRecord {
            tool_sent: Some(tool.name.clone()),
            tool_received: Some(name.clone()),
            ..record(Call::BeginToolInvocation, &tool.args, &args, &decision)
        });

        let output = Value::String(execute_call(sandbox, &name, &args));
        let decision = debugger.end(BreakpointKind::ToolInvocation, output.clone(), cycle.holdable.tool_end)?;
        let result = continue_with(&decision, &output);
        calls.push(record(Call::EndToolInvocation, &output, &result, &decision));
        observation = Some(result);

        if let Some(commit) = &cycle.commit {
            let committed = debugger.commit_agent_changes(commit.summary.as_deref(), commit.description.as_deref())?;
            calls.push(CallRecord {
                cycle: index,
                call: Call::CommitAgentChanges,
                sent: json!({ "summary": commit.summary, "description": commit.description }),
                received: Value::Bool(committed),
                tool_sent: None,
                tool_received: None,
                edited: false,
            });
        }
        if let Some(message) = &cycle.debug_message {
            debugger.post_debug_message(message)?;
            calls.push(CallRecord {
                cycle: index,
                call: Call::PostDebugMessage,
                sent: Value::String(message.clone()),
                received: Value::Null,
                tool_sent: None,
                tool_received: None,
                edited: false,
            });
        }
    }
    Ok(())
}

fn continue_with(decision: &ResumeDecision, sent: &Body) -> Body {
    match (&decision.body, decision.edited) {
        (Some(body), true) => body.clone(),
        _ => sent.clone(),
    }
}

/// Fetches a finished run's document once every event has its summary.
/// Returns the last document seen if that does not happen in time.
pub fn fetch_trajectory(server: &str, run_id: &str, timeout: Duration) -> Option<String> {
    let deadline = Instant::now() + timeout;
    let mut last = None;
    loop {
        if let Some(document) = http_get(server, &format!("/api/runs/{run_id}/trajectory")) {
            if let Ok(trajectory) = Trajectory::parse_document(document.as_bytes()) {
                let settled =
                    trajectory.run.status != RunStatus::Live && trajectory.events.iter().all(|e| e.summary.is_some());
                if settled {
                    return Some(document);
                }
            }
            last = Some(document);
        }
        if Instant::now() >= deadline {
            return last;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
}

/// Minimal HTTP/1.1 GET returning the body of a 200 response.
pub fn http_get(server: &str, path: &str) -> Option<String> {
    let mut stream = TcpStream::connect(server).ok()?;
    stream.set_read_timeout(Some(Duration::from_secs(5))).ok()?;
    write!(stream, "GET {path} HTTP/1.1\r\nHost: {server}\r\nConnection: close\r\n\r\n").ok()?;
    let mut response = Vec::new();
    stream.read_to_end(&mut response).ok()?;
    let text = String::from_utf8(response).ok()?;
    let (head, body) = text.split_once("\r\n\r\n")?;
    head.starts_with("HTTP/1.1 200").then(|| body.to_string())
}
