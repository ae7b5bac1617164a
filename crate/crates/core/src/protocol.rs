//! Message catalog and framing for the debug protocol.
//!
//! Every transport message carries exactly one [`Envelope`], encoded as a JSON
//! object with the fields `v`, `type`, `session`, `run_id`, `seq` and `payload`.

use std::fmt;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::model::{Body, CommitRecord, ControlState, Event, RunRecord, RunStatus, Summary};

pub const PROTOCOL_VERSION: u64 = 1;

/// Which breakpoint pair an `event_begin`/`event_end` message belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BreakpointKind {
    LlmQuery,
    ToolInvocation,
}

impl BreakpointKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BreakpointKind::LlmQuery => "llm_query",
            BreakpointKind::ToolInvocation => "tool_invocation",
        }
    }
}

fn yes() -> bool {
    true
}

fn present_value<'de, D: Deserializer<'de>>(deserializer: D) -> Result<Option<Body>, D::Error> {
    Body::deserialize(deserializer).map(Some)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HelloAgent {
    pub agent_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workspace_path: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventBegin {
    pub event_kind: BreakpointKind,
    pub body: Body,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_name: Option<String>,
    #[serde(default = "yes")]
    pub holdable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventEnd {
    pub event_kind: BreakpointKind,
    pub body: Body,
    #[serde(default = "yes")]
    pub holdable: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CommitRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DebugMessage {
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HelloAck {
    pub run_id: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResumeAction {
    Continue,
    Step,
}

/// How a held agent proceeds. `body` is present iff `edited`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResumeDecision {
    pub action: ResumeAction,
    pub edited: bool,
    #[serde(default, deserialize_with = "present_value", skip_serializing_if = "Option::is_none")]
    pub body: Option<Body>,
    /// Replacement tool name, only for edited tool invocations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_name: Option<String>,
}

impl ResumeDecision {
    pub fn unedited(action: ResumeAction) -> Self {
        ResumeDecision { action, edited: false, body: None, tool_name: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommitAck {
    pub committed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub commit_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fatal {
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Subscribe {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlCommand {
    Pause,
    Step,
    Continue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Control {
    pub command: ControlCommand,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edit {
    pub run_id: String,
    pub event_id: u64,
    pub body: Body,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_name: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportRun {
    pub document: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunList {
    pub runs: Vec<RunRecord>,
}

/// Run status plus, for live runs, the execution state of the breakpoint engine.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateChanged {
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<ControlState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub held_event_id: Option<u64>,
    /// A pause command is waiting for the next event boundary.
    #[serde(default)]
    pub pause_armed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReply {
    pub reason: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Empty {}

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    // agent -> server
    HelloAgent(HelloAgent),
    EventBegin(EventBegin),
    EventEnd(EventEnd),
    CommitRequest(CommitRequest),
    DebugMessage(DebugMessage),
    Goodbye,
    // server -> agent
    HelloAck(HelloAck),
    Resume(ResumeDecision),
    CommitAck(CommitAck),
    Fatal(Fatal),
    // ui -> server
    Subscribe(Subscribe),
    Control(Control),
    Edit(Edit),
    ImportRun(ImportRun),
    ListRuns,
    // server -> ui
    RunList(RunList),
    EventAppended(Box<Event>),
    SummaryReady(Summary),
    CommitAppended(CommitRecord),
    StateChanged(StateChanged),
    Error(ErrorReply),
}

pub const MESSAGE_TYPES: &[&str] = &[
    "hello_agent",
    "event_begin",
    "event_end",
    "commit_request",
    "debug_message",
    "goodbye",
    "hello_ack",
    "resume",
    "commit_ack",
    "fatal",
    "subscribe",
    "control",
    "edit",
    "import_run",
    "list_runs",
    "run_list",
    "event_appended",
    "summary_ready",
    "commit_appended",
    "state_changed",
    "error",
];

impl Message {
    pub fn type_name(&self) -> &'static str {
        match self {
            Message::HelloAgent(_) => "hello_agent",
            Message::EventBegin(_) => "event_begin",
            Message::EventEnd(_) => "event_end",
            Message::CommitRequest(_) => "commit_request",
            Message::DebugMessage(_) => "debug_message",
            Message::Goodbye => "goodbye",
            Message::HelloAck(_) => "hello_ack",
            Message::Resume(_) => "resume",
            Message::CommitAck(_) => "commit_ack",
            Message::Fatal(_) => "fatal",
            Message::Subscribe(_) => "subscribe",
            Message::Control(_) => "control",
            Message::Edit(_) => "edit",
            Message::ImportRun(_) => "import_run",
            Message::ListRuns => "list_runs",
            Message::RunList(_) => "run_list",
            Message::EventAppended(_) => "event_appended",
            Message::SummaryReady(_) => "summary_ready",
            Message::CommitAppended(_) => "commit_appended",
            Message::StateChanged(_) => "state_changed",
            Message::Error(_) => "error",
        }
    }

    pub fn direction(&self) -> Direction {
        match self {
            Message::HelloAgent(_)
            | Message::EventBegin(_)
            | Message::EventEnd(_)
            | Message::CommitRequest(_)
            | Message::DebugMessage(_)
            | Message::Goodbye => Direction::AgentToServer,
            Message::HelloAck(_) | Message::Resume(_) | Message::CommitAck(_) | Message::Fatal(_) => {
                Direction::ServerToAgent
            }
            Message::Subscribe(_)
            | Message::Control(_)
            | Message::Edit(_)
            | Message::ImportRun(_)
            | Message::ListRuns => Direction::UiToServer,
            _ => Direction::ServerToUi,
        }
    }

    pub fn error(reason: impl Into<String>, message: impl Into<Option<String>>) -> Self {
        Message::Error(ErrorReply { reason: reason.into(), message: message.into() })
    }

    fn payload(&self) -> Value {
        fn to<T: Serialize>(value: &T) -> Value {
            serde_json::to_value(value).expect("catalog payloads always serialize")
        }
        match self {
            Message::HelloAgent(p) => to(p),
            Message::EventBegin(p) => to(p),
            Message::EventEnd(p) => to(p),
            Message::CommitRequest(p) => to(p),
            Message::DebugMessage(p) => to(p),
            Message::Goodbye | Message::ListRuns => Value::Object(Map::new()),
            Message::HelloAck(p) => to(p),
            Message::Resume(p) => to(p),
            Message::CommitAck(p) => to(p),
            Message::Fatal(p) => to(p),
            Message::Subscribe(p) => to(p),
            Message::Control(p) => to(p),
            Message::Edit(p) => to(p),
            Message::ImportRun(p) => to(p),
            Message::RunList(p) => to(p),
            Message::EventAppended(p) => to(p),
            Message::SummaryReady(p) => to(p),
            Message::CommitAppended(p) => to(p),
            Message::StateChanged(p) => to(p),
            Message::Error(p) => to(p),
        }
    }

    fn from_payload(kind: &str, payload: Value) -> Result<Message, ProtocolError> {
        fn from<T: DeserializeOwned>(kind: &str, payload: Value) -> Result<T, ProtocolError> {
            serde_json::from_value(payload)
                .map_err(|e| ProtocolError::Payload { message_type: kind.to_string(), detail: e.to_string() })
        }
        Ok(match kind {
            "hello_agent" => Message::HelloAgent(from(kind, payload)?),
            "event_begin" => Message::EventBegin(from(kind, payload)?),
            "event_end" => Message::EventEnd(from(kind, payload)?),
            "commit_request" => Message::CommitRequest(from(kind, payload)?),
            "debug_message" => Message::DebugMessage(from(kind, payload)?),
            "goodbye" => {
                from::<Empty>(kind, payload)?;
                Message::Goodbye
            }
            "hello_ack" => Message::HelloAck(from(kind, payload)?),
            "resume" => Message::Resume(from(kind, payload)?),
            "commit_ack" => Message::CommitAck(from(kind, payload)?),
            "fatal" => Message::Fatal(from(kind, payload)?),
            "subscribe" => Message::Subscribe(from(kind, payload)?),
            "control" => Message::Control(from(kind, payload)?),
            "edit" => Message::Edit(from(kind, payload)?),
            "import_run" => Message::ImportRun(from(kind, payload)?),
            "list_runs" => {
                from::<Empty>(kind, payload)?;
                Message::ListRuns
            }
            "run_list" => Message::RunList(from(kind, payload)?),
            "event_appended" => Message::EventAppended(Box::new(from(kind, payload)?)),
            "summary_ready" => Message::SummaryReady(from(kind, payload)?),
            "commit_appended" => Message::CommitAppended(from(kind, payload)?),
            "state_changed" => Message::StateChanged(from(kind, payload)?),
            "error" => Message::Error(from(kind, payload)?),
            other => return Err(ProtocolError::UnknownType(other.to_string())),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Envelope {
    pub v: u64,
    pub session: String,
    pub run_id: String,
    pub seq: u64,
    pub message: Message,
}

impl Envelope {
    pub fn new(session: impl Into<String>, run_id: impl Into<String>, seq: u64, message: Message) -> Self {
        Envelope { v: PROTOCOL_VERSION, session: session.into(), run_id: run_id.into(), seq, message }
    }

    pub fn type_name(&self) -> &'static str {
        self.message.type_name()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("unknown type {0:?}")]
    UnknownType(String),
    #[error("missing required field `{0}`")]
    MissingField(&'static str),
    #[error("unsupported protocol version {0}")]
    Version(u64),
    #[error("invalid field `{field}`: {detail}")]
    InvalidField { field: &'static str, detail: String },
    #[error("invalid {message_type} payload: {detail}")]
    Payload { message_type: String, detail: String },
    #[error("malformed frame: {0}")]
    Malformed(String),
}

pub fn encode(envelope: &Envelope) -> String {
    let mut object = Map::new();
    object.insert("v".into(), Value::from(envelope.v));
    object.insert("type".into(), Value::from(envelope.type_name()));
    object.insert("session".into(), Value::from(envelope.session.clone()));
    object.insert("run_id".into(), Value::from(envelope.run_id.clone()));
    object.insert("seq".into(), Value::from(envelope.seq));
    object.insert("payload".into(), envelope.message.payload());
    Value::Object(object).to_string()
}

pub fn decode(frame: &[u8]) -> Result<Envelope, ProtocolError> {
    let value: Value = serde_json::from_slice(frame).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    let Value::Object(mut object) = value else {
        return Err(ProtocolError::Malformed("envelope is not an object".into()));
    };
    let mut take = |field: &'static str| object.remove(field).ok_or(ProtocolError::MissingField(field));
    let v = take("v")?;
    let v = v
        .as_u64()
        .ok_or_else(|| ProtocolError::InvalidField { field: "v", detail: format!("expected an integer, found {v}") })?;
    if v != PROTOCOL_VERSION {
        return Err(ProtocolError::Version(v));
    }
    let kind = take("type")?;
    let Value::String(kind) = kind else {
        return Err(ProtocolError::InvalidField { field: "type", detail: "expected a string".into() });
    };
    if !MESSAGE_TYPES.contains(&kind.as_str()) {
        return Err(ProtocolError::UnknownType(kind));
    }
    let session = string_field("session", take("session")?)?;
    let run_id = string_field("run_id", take("run_id")?)?;
    let seq = take("seq")?;
    let seq = seq.as_u64().ok_or_else(|| ProtocolError::InvalidField {
        field: "seq",
        detail: format!("expected an integer, found {seq}"),
    })?;
    let payload = take("payload")?;
    let message = Message::from_payload(&kind, payload)?;
    Ok(Envelope { v, session, run_id, seq, message })
}

fn string_field(field: &'static str, value: Value) -> Result<String, ProtocolError> {
    match value {
        Value::String(s) => Ok(s),
        other => Err(ProtocolError::InvalidField { field, detail: format!("expected a string, found {other}") }),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    AgentToServer,
    ServerToAgent,
    UiToServer,
    ServerToUi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RejectReason {
    NotHandshaken,
    UnmatchedEnd,
    NestedBegin,
    DuplicateHello,
    WrongDirection,
}

impl RejectReason {
    pub fn code(&self) -> &'static str {
        match self {
            RejectReason::NotHandshaken => "not_handshaken",
            RejectReason::UnmatchedEnd => "unmatched_end",
            RejectReason::NestedBegin => "nested_begin",
            RejectReason::DuplicateHello => "duplicate_hello",
            RejectReason::WrongDirection => "wrong_direction",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// Per-connection protocol state for the agent side: handshake and the
/// outstanding `event_begin`, if any.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SequenceState {
    handshaken: bool,
    outstanding: Option<BreakpointKind>,
}

impl SequenceState {
    pub fn handshaken(&self) -> bool {
        self.handshaken
    }

    pub fn outstanding(&self) -> Option<BreakpointKind> {
        self.outstanding
    }

    /// Checks `message` arriving in `direction` against the state; on accept
    /// the state advances, on reject it is left untouched.
    pub fn validate(&mut self, direction: Direction, message: &Message) -> Result<(), RejectReason> {
        if message.direction() != direction {
            return Err(RejectReason::WrongDirection);
        }
        if direction != Direction::AgentToServer {
            return Ok(());
        }
        match message {
            Message::HelloAgent(_) => {
                if self.handshaken {
                    return Err(RejectReason::DuplicateHello);
                }
                self.handshaken = true;
            }
            _ if !self.handshaken => return Err(RejectReason::NotHandshaken),
            Message::EventBegin(begin) => {
                if self.outstanding.is_some() {
                    return Err(RejectReason::NestedBegin);
                }
                self.outstanding = Some(begin.event_kind);
            }
            Message::EventEnd(end) => {
                if self.outstanding != Some(end.event_kind) {
                    return Err(RejectReason::UnmatchedEnd);
                }
                self.outstanding = None;
            }
            _ => {}
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn hello() -> Message {
        Message::HelloAgent(HelloAgent { agent_name: "MyAgent".into(), workspace_path: Some("/tmp/ws".into()) })
    }

    fn begin(kind: BreakpointKind) -> Message {
        Message::EventBegin(EventBegin { event_kind: kind, body: json!("p"), tool_name: None, holdable: true })
    }

    fn end(kind: BreakpointKind) -> Message {
        Message::EventEnd(EventEnd { event_kind: kind, body: json!("r"), holdable: true })
    }

    #[test]
    fn hello_round_trip() {
        let envelope = Envelope::new("s1", "", 0, hello());
        let decoded = decode(encode(&envelope).as_bytes()).unwrap();
        assert_eq!(decoded, envelope);
    }

    #[test]
    fn misspelled_type_is_unknown() {
        let frame = r#"{"v":1,"type":"hello_agnt","session":"s","run_id":"","seq":0,"payload":{}}"#;
        let err = decode(frame.as_bytes()).unwrap_err();
        assert_eq!(err, ProtocolError::UnknownType("hello_agnt".into()));
        assert!(err.to_string().contains("unknown type"));
    }

    #[test]
    fn version_two_is_rejected() {
        let frame = r#"{"v":2,"type":"goodbye","session":"s","run_id":"","seq":0,"payload":{}}"#;
        assert_eq!(decode(frame.as_bytes()).unwrap_err(), ProtocolError::Version(2));
    }

    #[test]
    fn missing_fields_are_named() {
        let frame = r#"{"v":1,"type":"goodbye","run_id":"","seq":0,"payload":{}}"#;
        assert_eq!(decode(frame.as_bytes()).unwrap_err(), ProtocolError::MissingField("session"));
        let frame = r#"{"v":1,"type":"hello_agent","session":"s","run_id":"","seq":0,"payload":{}}"#;
        let err = decode(frame.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("agent_name"), "{err}");
    }

    #[test]
    fn holdable_defaults_to_true() {
        let frame = r#"{"v":1,"type":"event_begin","session":"s","run_id":"r","seq":3,"payload":{"event_kind":"llm_query","body":"hi"}}"#;
        match decode(frame.as_bytes()).unwrap().message {
            Message::EventBegin(b) => assert!(b.holdable),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn resume_with_null_edit_keeps_body() {
        let decision =
            ResumeDecision { action: ResumeAction::Step, edited: true, body: Some(Value::Null), tool_name: None };
        let envelope = Envelope::new("s", "r", 1, Message::Resume(decision));
        assert_eq!(decode(encode(&envelope).as_bytes()).unwrap(), envelope);
    }

    #[test]
    fn sequence_accepts_matched_pair() {
        let mut state = SequenceState::default();
        for m in [hello(), begin(BreakpointKind::LlmQuery), end(BreakpointKind::LlmQuery)] {
            state.validate(Direction::AgentToServer, &m).unwrap();
        }
    }

    #[test]
    fn sequence_rejects_unmatched_end() {
        let mut state = SequenceState::default();
        state.validate(Direction::AgentToServer, &hello()).unwrap();
        assert_eq!(
            state.validate(Direction::AgentToServer, &end(BreakpointKind::LlmQuery)),
            Err(RejectReason::UnmatchedEnd)
        );
    }

    #[test]
    fn sequence_rejects_nested_begin() {
        let mut state = SequenceState::default();
        state.validate(Direction::AgentToServer, &hello()).unwrap();
        state.validate(Direction::AgentToServer, &begin(BreakpointKind::LlmQuery)).unwrap();
        assert_eq!(
            state.validate(Direction::AgentToServer, &begin(BreakpointKind::ToolInvocation)),
            Err(RejectReason::NestedBegin)
        );
        // a rejected message leaves the state as it was
        state.validate(Direction::AgentToServer, &end(BreakpointKind::LlmQuery)).unwrap();
    }

    /// Every (state, message) pair of the agent-side transition table.
    #[test]
    fn sequence_transition_table() {
        use BreakpointKind::*;
        let states: Vec<(&str, SequenceState)> = vec![
            ("fresh", SequenceState::default()),
            ("idle", SequenceState { handshaken: true, outstanding: None }),
            ("in_query", SequenceState { handshaken: true, outstanding: Some(LlmQuery) }),
            ("in_tool", SequenceState { handshaken: true, outstanding: Some(ToolInvocation) }),
        ];
        let messages: Vec<(&str, Message)> = vec![
            ("hello", hello()),
            ("begin_q", begin(LlmQuery)),
            ("begin_t", begin(ToolInvocation)),
            ("end_q", end(LlmQuery)),
            ("end_t", end(ToolInvocation)),
            ("debug", Message::DebugMessage(DebugMessage { text: "x".into() })),
            ("goodbye", Message::Goodbye),
        ];
        let expected: &[(&str, &[Option<RejectReason>])] = {
            use RejectReason::*;
            &[
                (
                    "fresh",
                    &[
                        None,
                        Some(NotHandshaken),
                        Some(NotHandshaken),
                        Some(NotHandshaken),
                        Some(NotHandshaken),
                        Some(NotHandshaken),
                        Some(NotHandshaken),
                    ],
                ),
                ("idle", &[Some(DuplicateHello), None, None, Some(UnmatchedEnd), Some(UnmatchedEnd), None, None]),
                (
                    "in_query",
                    &[Some(DuplicateHello), Some(NestedBegin), Some(NestedBegin), None, Some(UnmatchedEnd), None, None],
                ),
                (
                    "in_tool",
                    &[Some(DuplicateHello), Some(NestedBegin), Some(NestedBegin), Some(UnmatchedEnd), None, None, None],
                ),
            ]
        };
        for ((state_name, state), (row_name, row)) in states.iter().zip(expected) {
            assert_eq!(state_name, row_name);
            for ((message_name, message), want) in messages.iter().zip(row.iter()) {
                let mut s = state.clone();
                let got = s.validate(Direction::AgentToServer, message).err();
                assert_eq!(got, *want, "state {state_name}, message {message_name}");
            }
        }
    }

    #[test]
    fn ui_messages_on_agent_direction_are_rejected() {
        let mut state = SequenceState::default();
        assert_eq!(state.validate(Direction::AgentToServer, &Message::ListRuns), Err(RejectReason::WrongDirection));
    }
}
