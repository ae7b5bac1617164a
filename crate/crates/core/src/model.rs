//! Canonical data model for agent runs and the line-delimited trajectory document.
//!
//! A trajectory document is UTF-8 text. Line 1 is a header record carrying the
//! [`RunRecord`]; every following line is one [`Event`] in `event_id` order, with
//! the commits it triggered embedded inline. Serialization is canonical: object
//! keys inside bodies are emitted in sorted order, optional fields are omitted
//! when absent, and timestamps are RFC-3339 UTC with microsecond precision, so
//! identical runs always produce identical bytes.

use std::fmt;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Structured payload of an event: a JSON-like tree or a plain string.
pub type Body = serde_json::Value;

pub const SCHEMA: &str = "agentstepper-trajectory/1";

/// Summaries never exceed this many characters.
pub const SUMMARY_MAX_CHARS: usize = 240;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(DateTime<Utc>);

impl Timestamp {
    /// Current time, truncated to the serialized precision so that values
    /// survive a write/read cycle unchanged.
    pub fn now() -> Self {
        Self::from_micros(Utc::now().timestamp_micros())
    }

    pub fn from_micros(micros: i64) -> Self {
        Timestamp(DateTime::from_timestamp_micros(micros).unwrap_or_default())
    }

    pub fn parse(text: &str) -> Result<Self, chrono::ParseError> {
        let parsed = DateTime::parse_from_rfc3339(text)?;
        Ok(Timestamp(parsed.with_timezone(&Utc)))
    }

    pub fn as_datetime(&self) -> DateTime<Utc> {
        self.0
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.to_rfc3339_opts(SecondsFormat::Micros, true))
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        Timestamp::parse(&text).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Interactive,
    PostHoc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Live,
    Completed,
    Aborted,
    Imported,
}

impl RunStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            RunStatus::Live => "live",
            RunStatus::Completed => "completed",
            RunStatus::Aborted => "aborted",
            RunStatus::Imported => "imported",
        }
    }
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    LlmQuery,
    LlmResponse,
    ToolInvocation,
    ToolResult,
    DebugMessage,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::LlmQuery => "llm_query",
            EventKind::LlmResponse => "llm_response",
            EventKind::ToolInvocation => "tool_invocation",
            EventKind::ToolResult => "tool_result",
            EventKind::DebugMessage => "debug_message",
        }
    }

    /// Breakpoint phase implied by the kind.
    pub fn phase(&self) -> Phase {
        match self {
            EventKind::LlmQuery | EventKind::ToolInvocation => Phase::Begin,
            _ => Phase::End,
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Begin,
    End,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryOrigin {
    Llm,
    Fallback,
}

/// Summary text attached to an event.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventSummary {
    pub text: String,
    pub origin: SummaryOrigin,
}

/// A summary as delivered to UI clients, addressed by event id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub event_id: u64,
    pub text: String,
    pub origin: SummaryOrigin,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub run_id: String,
    pub agent_name: String,
    pub mode: RunMode,
    pub status: RunStatus,
    pub started_at: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ended_at: Option<Timestamp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workspace_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_branch: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_branch: Option<String>,
    pub event_count: u64,
}

impl RunRecord {
    pub fn new_live(run_id: impl Into<String>, agent_name: impl Into<String>) -> Self {
        RunRecord {
            run_id: run_id.into(),
            agent_name: agent_name.into(),
            mode: RunMode::Interactive,
            status: RunStatus::Live,
            started_at: Timestamp::now(),
            ended_at: None,
            workspace_path: None,
            original_branch: None,
            run_branch: None,
            event_count: 0,
        }
    }

    pub fn check(&self) -> Result<(), String> {
        if self.run_id.is_empty() {
            return Err("run_id is empty".into());
        }
        if self.status == RunStatus::Live && self.ended_at.is_some() {
            return Err("live run has ended_at".into());
        }
        if self.workspace_path.is_none() && (self.original_branch.is_some() || self.run_branch.is_some()) {
            return Err("branches recorded without a workspace_path".into());
        }
        if self.mode == RunMode::PostHoc && self.status != RunStatus::Imported {
            return Err("post_hoc run must have status imported".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommitRecord {
    pub commit_id: String,
    pub message_summary: String,
    pub message_description: String,
    pub triggering_event_id: u64,
    pub files_changed: u64,
    pub insertions: u64,
    pub deletions: u64,
    pub timestamp: Timestamp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Event {
    pub event_id: u64,
    pub kind: EventKind,
    pub cycle_index: u64,
    pub timestamp: Timestamp,
    pub body: Body,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_name: Option<String>,
    pub phase: Phase,
    pub held: bool,
    pub edited: bool,
    #[serde(default, deserialize_with = "present_value", skip_serializing_if = "Option::is_none")]
    pub original_body: Option<Body>,
    /// Tool name before a live edit replaced it; only set on tool invocations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_tool_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<EventSummary>,
    /// Most recent commit triggered by this event.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub commit_id: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub commits: Vec<CommitRecord>,
}

// A present `null` is a real body, not an absent one.
fn present_value<'de, D: Deserializer<'de>>(deserializer: D) -> Result<Option<Body>, D::Error> {
    Body::deserialize(deserializer).map(Some)
}

impl Event {
    pub fn summary_text(&self) -> Option<&str> {
        self.summary.as_ref().map(|s| s.text.as_str())
    }

    /// Records a live edit. Returns false when the new values equal the
    /// current ones, in which case nothing changes.
    pub fn apply_edit(&mut self, body: Body, tool_name: Option<String>) -> bool {
        let tool_changed = match (&tool_name, &self.tool_name) {
            (Some(new), Some(old)) => new != old,
            _ => false,
        };
        if body == self.body && !tool_changed {
            return false;
        }
        if !self.edited {
            self.original_body = Some(self.body.clone());
            self.edited = true;
        }
        if tool_changed && self.original_tool_name.is_none() {
            self.original_tool_name = self.tool_name.clone();
        }
        self.body = body;
        if tool_changed {
            self.tool_name = tool_name;
        }
        // Editing back to the original restores the unedited state.
        if self.original_body.as_ref() == Some(&self.body)
            && self.original_tool_name.as_ref().is_none_or(|t| Some(t) == self.tool_name.as_ref())
        {
            self.edited = false;
            self.original_body = None;
            self.original_tool_name = None;
        }
        true
    }

    pub fn attach_commit(&mut self, commit: CommitRecord) {
        self.commit_id = Some(commit.commit_id.clone());
        self.commits.push(commit);
    }

    fn check(&self) -> Result<(), String> {
        if self.phase != self.kind.phase() {
            return Err(format!("phase {:?} does not match kind {}", self.phase, self.kind));
        }
        if (self.kind == EventKind::ToolInvocation) != self.tool_name.is_some() {
            return Err("tool_name must be present exactly on tool_invocation events".into());
        }
        if self.original_tool_name.is_some() && !self.edited {
            return Err("original_tool_name on an unedited event".into());
        }
        if self.edited {
            if !self.held {
                return Err("edited event was never held".into());
            }
            let Some(original) = &self.original_body else {
                return Err("edited event lacks original_body".into());
            };
            if original == &self.body && self.original_tool_name.is_none() {
                return Err("edited event body equals original_body".into());
            }
        } else if self.original_body.is_some() {
            return Err("original_body on an unedited event".into());
        }
        if let Some(summary) = &self.summary {
            check_summary_text(&summary.text)?;
        }
        for commit in &self.commits {
            if commit.triggering_event_id != self.event_id {
                return Err(format!(
                    "commit {} names triggering event {}",
                    commit.commit_id, commit.triggering_event_id
                ));
            }
            if commit.files_changed == 0 {
                return Err(format!("commit {} changes no files", commit.commit_id));
            }
        }
        if self.commit_id.as_ref() != self.commits.last().map(|c| &c.commit_id) {
            return Err("commit_id does not name the last embedded commit".into());
        }
        Ok(())
    }
}

pub fn check_summary_text(text: &str) -> Result<(), String> {
    if text.is_empty() {
        return Err("summary is empty".into());
    }
    if text.chars().count() > SUMMARY_MAX_CHARS {
        return Err("summary exceeds 240 characters".into());
    }
    if text.contains(['\n', '\r']) {
        return Err("summary spans multiple lines".into());
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cycle {
    pub cycle_index: u64,
    pub event_ids: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlState {
    Running,
    Stepping,
    Paused,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionState {
    pub state: ControlState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub held_event_id: Option<u64>,
}

/// Tracks the cycle boundary rule: an `llm_query` opens a new cycle unless the
/// current cycle is still empty; every other kind joins the current cycle.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CycleCounter {
    current: u64,
    occupied: bool,
}

impl CycleCounter {
    pub fn next(&mut self, kind: EventKind) -> u64 {
        if kind == EventKind::LlmQuery && self.occupied {
            self.current += 1;
        }
        self.occupied = true;
        self.current
    }
}

pub fn assign_cycle(previous: &[EventKind], new_kind: EventKind) -> u64 {
    let mut counter = CycleCounter::default();
    for kind in previous {
        counter.next(*kind);
    }
    counter.next(new_kind)
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TrajectoryError {
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: integrity error: {message}")]
    Integrity { line: usize, message: String },
}

impl TrajectoryError {
    pub fn line(&self) -> usize {
        match self {
            TrajectoryError::Parse { line, .. } | TrajectoryError::Integrity { line, .. } => *line,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema: String,
    run: RunRecord,
}

/// One run with its events; commits live inline on their triggering events.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub run: RunRecord,
    pub events: Vec<Event>,
    /// Status and mode recorded in the document this run was imported from.
    /// Serialization writes these back so that re-exports are byte-identical.
    pub recorded_as: Option<(RunStatus, RunMode)>,
    cycles: CycleCounter,
}

impl Trajectory {
    pub fn new(run: RunRecord) -> Self {
        Trajectory { run, events: Vec::new(), recorded_as: None, cycles: CycleCounter::default() }
    }

    pub fn run_id(&self) -> &str {
        &self.run.run_id
    }

    /// Appends a new event with the next id and the cycle from the boundary rule.
    pub fn push_event(
        &mut self,
        kind: EventKind,
        body: Body,
        tool_name: Option<String>,
        timestamp: Timestamp,
    ) -> &mut Event {
        let event_id = self.events.len() as u64;
        let cycle_index = self.cycles.next(kind);
        self.events.push(Event {
            event_id,
            kind,
            cycle_index,
            timestamp,
            body,
            tool_name: if kind == EventKind::ToolInvocation { Some(tool_name.unwrap_or_default()) } else { None },
            phase: kind.phase(),
            held: false,
            edited: false,
            original_body: None,
            original_tool_name: None,
            summary: None,
            commit_id: None,
            commits: Vec::new(),
        });
        self.run.event_count = self.events.len() as u64;
        self.events.last_mut().expect("just pushed")
    }

    pub fn event(&self, event_id: u64) -> Option<&Event> {
        self.events.get(event_id as usize)
    }

    pub fn event_mut(&mut self, event_id: u64) -> Option<&mut Event> {
        self.events.get_mut(event_id as usize)
    }

    pub fn cycles(&self) -> Vec<Cycle> {
        let mut cycles: Vec<Cycle> = Vec::new();
        for event in &self.events {
            match cycles.last_mut() {
                Some(cycle) if cycle.cycle_index == event.cycle_index => cycle.event_ids.push(event.event_id),
                _ => cycles.push(Cycle { cycle_index: event.cycle_index, event_ids: vec![event.event_id] }),
            }
        }
        cycles
    }

    pub fn commits(&self) -> impl Iterator<Item = &CommitRecord> {
        self.events.iter().flat_map(|e| e.commits.iter())
    }

    /// Marks this run as imported for post-hoc inspection, remembering the
    /// recorded outcome for serialization.
    pub fn mark_imported(&mut self) {
        if self.recorded_as.is_none() {
            self.recorded_as = Some((self.run.status, self.run.mode));
        }
        self.run.status = RunStatus::Imported;
        self.run.mode = RunMode::PostHoc;
    }

    /// Checks every data-model invariant; errors carry document line numbers.
    pub fn validate(&self) -> Result<(), TrajectoryError> {
        self.run.check().map_err(|message| TrajectoryError::Integrity { line: 1, message })?;
        let mut counter = CycleCounter::default();
        for (index, event) in self.events.iter().enumerate() {
            let line = index + 2;
            let fail = |message: String| TrajectoryError::Integrity { line, message };
            if event.event_id != index as u64 {
                return Err(fail(format!("event {} out of sequence, expected event_id {}", event.event_id, index)));
            }
            let expected_cycle = counter.next(event.kind);
            if event.cycle_index != expected_cycle {
                return Err(fail(format!(
                    "event {} has cycle_index {}, expected {}",
                    event.event_id, event.cycle_index, expected_cycle
                )));
            }
            event.check().map_err(|m| fail(format!("event {}: {m}", event.event_id)))?;
        }
        if self.run.event_count != self.events.len() as u64 {
            return Err(TrajectoryError::Integrity {
                line: self.events.len() + 2,
                message: format!("header declares {} events, document has {}", self.run.event_count, self.events.len()),
            });
        }
        Ok(())
    }

    pub fn header_line(&self) -> String {
        let mut run = self.run.clone();
        if let Some((status, mode)) = self.recorded_as {
            run.status = status;
            run.mode = mode;
        }
        serde_json::to_string(&Header { schema: SCHEMA.to_string(), run }).expect("run records always serialize")
    }

    pub fn event_line(event: &Event) -> String {
        serde_json::to_string(event).expect("events always serialize")
    }

    /// Canonical trajectory document.
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = self.header_line();
        out.push('\n');
        for event in &self.events {
            out.push_str(&Self::event_line(event));
            out.push('\n');
        }
        out.into_bytes()
    }

    /// Parses a document exactly as recorded, without marking it imported.
    pub fn parse_document(doc: &[u8]) -> Result<Trajectory, TrajectoryError> {
        let text = std::str::from_utf8(doc).map_err(|e| TrajectoryError::Parse {
            line: line_of_offset(doc, e.valid_up_to()),
            message: format!("invalid UTF-8: {e}"),
        })?;
        if text.is_empty() {
            return Err(TrajectoryError::Parse { line: 1, message: "missing header record".into() });
        }
        let mut lines: Vec<&str> = text.split('\n').collect();
        match lines.pop() {
            Some("") => {}
            Some(_) => {
                return Err(TrajectoryError::Parse {
                    line: lines.len() + 1,
                    message: "record is not terminated by a newline (truncated document?)".into(),
                })
            }
            None => unreachable!("split yields at least one piece"),
        }
        let run = parse_header_line(lines[0]).map_err(|message| TrajectoryError::Parse { line: 1, message })?;
        let mut trajectory = Trajectory::new(run);
        for (index, line) in lines.iter().enumerate().skip(1) {
            let event =
                parse_event_line(line).map_err(|message| TrajectoryError::Parse { line: index + 1, message })?;
            trajectory.events.push(event);
        }
        trajectory.validate()?;
        trajectory.rebuild_counter();
        Ok(trajectory)
    }

    /// Reconstructs a run for post-hoc inspection: status imported, mode post_hoc.
    pub fn deserialize(doc: &[u8]) -> Result<Trajectory, TrajectoryError> {
        let mut trajectory = Self::parse_document(doc)?;
        trajectory.mark_imported();
        Ok(trajectory)
    }

    /// Recomputes the cycle counter after events were loaded from outside.
    pub fn rebuild_counter(&mut self) {
        let mut counter = CycleCounter::default();
        for event in &self.events {
            counter.next(event.kind);
        }
        self.cycles = counter;
    }
}

pub fn parse_header_line(line: &str) -> Result<RunRecord, String> {
    let header: Header = serde_json::from_str(line).map_err(|e| format!("malformed header: {e}"))?;
    if header.schema != SCHEMA {
        return Err(format!("unsupported schema {:?}", header.schema));
    }
    Ok(header.run)
}

pub fn parse_event_line(line: &str) -> Result<Event, String> {
    serde_json::from_str(line).map_err(|e| format!("malformed event record: {e}"))
}

fn line_of_offset(doc: &[u8], offset: usize) -> usize {
    doc[..offset].iter().filter(|b| **b == b'\n').count() + 1
}
