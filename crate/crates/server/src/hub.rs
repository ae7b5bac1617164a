//! Run registry and message handling shared by all connections.
//!
//! Every run lives behind its own mutex; all work on a run (appends,
//! control commands, summaries, persistence and fanout) happens while
//! holding it, which gives per-run ordering and identical event order for
//! every subscriber. Code holding a run lock never takes the `runs` map
//! lock or another run's lock; the run index exists so `run_list` can be
//! answered without visiting run locks.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock, Weak};
use std::time::{Duration, Instant};

use agentstepper_core::engine::{BreakpointEngine, Release, Verdict};
use agentstepper_core::model::{
    Body, EventKind, EventSummary, RunRecord, RunStatus, Summary, Timestamp, Trajectory, TrajectoryError,
};
use agentstepper_core::protocol::{
    decode, BreakpointKind, CommitAck, CommitRequest, ControlCommand, Direction, Edit, Envelope, Fatal, HelloAck,
    HelloAgent, Message, ResumeAction, ResumeDecision, RunList, SequenceState, StateChanged,
};
use agentstepper_core::summarizer::render::render_event_for_summary;
use agentstepper_core::summarizer::{
    Summarizer, SummarizerError, SummarizerRegistry, SummaryKind, SummaryOutput, SummaryRequest,
};
use agentstepper_core::workspace::{self, CommitDiff, WorkspaceError, WorkspaceSession};
use crossbeam_channel::{unbounded, Receiver, Sender};
use log::{debug, info, warn};
use thiserror::Error;

use crate::config::ServerConfig;
use crate::pool::{Deliver, SummaryJob, SummaryPool};
use crate::store::{RunStore, StoreError};

pub type ConnId = u64;

/// What a connection's writer should do next.
#[derive(Clone, Debug)]
pub enum Outgoing {
    Send { run_id: String, message: Message },
    Close,
}

pub type Outbox = Sender<Outgoing>;

#[derive(Debug, Error)]
pub enum HubError {
    #[error("data directory: {0}")]
    Store(#[from] StoreError),
    #[error(transparent)]
    Summarizer(#[from] SummarizerError),
}

#[derive(Debug, Error)]
pub enum ImportError {
    #[error(transparent)]
    Parse(#[from] TrajectoryError),
    #[error("run {0} already exists")]
    Conflict(String),
    #[error(transparent)]
    Store(StoreError),
}

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("run {0} not found")]
    RunNotFound(String),
    #[error("run {0} has no workspace")]
    NoWorkspace(String),
    #[error("commit {0} does not belong to this run")]
    NotInRun(String),
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
}

#[derive(Debug, Default)]
pub struct AgentSession {
    sequence: SequenceState,
    run_id: Option<String>,
    finished: bool,
}

impl AgentSession {
    pub fn run_id(&self) -> Option<&str> {
        self.run_id.as_deref()
    }
}

#[derive(Debug, Default)]
pub struct UiSession {
    subscribed: Option<String>,
}

#[derive(Debug)]
pub enum Role {
    Unknown,
    Agent(AgentSession),
    Ui(UiSession),
}

/// Server side of one WebSocket connection.
#[derive(Debug)]
pub struct Connection {
    pub id: ConnId,
    pub outbox: Outbox,
    pub role: Role,
}

impl Connection {
    fn send(&self, run_id: &str, message: Message) {
        let _ = self.outbox.send(Outgoing::Send { run_id: run_id.to_string(), message });
    }

    fn close(&self) {
        let _ = self.outbox.send(Outgoing::Close);
    }
}

struct RunSlot {
    trajectory: Trajectory,
    /// Present while the run is live.
    engine: Option<BreakpointEngine>,
    agent: Option<Outbox>,
    workspace: Option<WorkspaceSession>,
    workspace_claim: Option<PathBuf>,
    subscribers: Vec<(ConnId, Outbox)>,
    held_since: Option<Instant>,
    /// The agent's last breakpoint message has not been answered yet.
    awaiting_resume: bool,
}

impl RunSlot {
    fn finished(trajectory: Trajectory) -> Self {
        RunSlot {
            trajectory,
            engine: None,
            agent: None,
            workspace: None,
            workspace_claim: None,
            subscribers: Vec::new(),
            held_since: None,
            awaiting_resume: false,
        }
    }

    fn run_id(&self) -> &str {
        self.trajectory.run_id()
    }

    fn is_live(&self) -> bool {
        self.trajectory.run.status == RunStatus::Live
    }

    fn broadcast(&mut self, message: Message) {
        let run_id = self.trajectory.run_id().to_string();
        self.subscribers.retain(|(_, outbox)| {
            outbox.send(Outgoing::Send { run_id: run_id.clone(), message: message.clone() }).is_ok()
        });
    }

    fn to_agent(&self, message: Message) {
        if let Some(agent) = &self.agent {
            let _ = agent.send(Outgoing::Send { run_id: self.run_id().to_string(), message });
        }
    }

    fn state_message(&self) -> Message {
        let state = self.engine.as_ref().map(|e| e.state());
        Message::StateChanged(StateChanged {
            status: self.trajectory.run.status,
            state: state.map(|s| s.state),
            held_event_id: state.and_then(|s| s.held_event_id),
            pause_armed: self.engine.as_ref().is_some_and(|e| e.pause_armed()),
        })
    }
}

pub struct Hub {
    config: ServerConfig,
    store: RunStore,
    summarizer: Summarizer,
    runs: RwLock<HashMap<String, Arc<Mutex<RunSlot>>>>,
    index: Mutex<BTreeMap<String, RunRecord>>,
    ui_clients: Mutex<HashMap<ConnId, Outbox>>,
    workspaces: Mutex<HashSet<PathBuf>>,
    pool: SummaryPool,
    next_conn: AtomicU64,
    shutting_down: AtomicBool,
}

fn lock(slot: &Mutex<RunSlot>) -> MutexGuard<'_, RunSlot> {
    slot.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

impl Hub {
    /// Opens the data directory and loads every stored run.
    pub fn new(config: ServerConfig) -> Result<Arc<Hub>, HubError> {
        let store = RunStore::open(&config.data_dir)?;
        let summarizer = SummarizerRegistry::builtin().create(&config.summarizer)?;
        let loaded = store.load_all();
        info!("loaded {} run(s) from {}", loaded.len(), store.root().display());
        let mut runs = HashMap::new();
        let mut index = BTreeMap::new();
        for trajectory in loaded {
            index.insert(trajectory.run_id().to_string(), trajectory.run.clone());
            runs.insert(trajectory.run_id().to_string(), Arc::new(Mutex::new(RunSlot::finished(trajectory))));
        }
        Ok(Arc::new_cyclic(|weak: &Weak<Hub>| {
            let weak = weak.clone();
            let deliver: Deliver = Arc::new(move |job, output| {
                if let Some(hub) = weak.upgrade() {
                    hub.deliver_summary(job, output);
                }
            });
            let pool = SummaryPool::start(config.summary_workers, summarizer.clone(), deliver);
            Hub {
                config,
                store,
                summarizer,
                runs: RwLock::new(runs),
                index: Mutex::new(index),
                ui_clients: Mutex::new(HashMap::new()),
                workspaces: Mutex::new(HashSet::new()),
                pool,
                next_conn: AtomicU64::new(1),
                shutting_down: AtomicBool::new(false),
            }
        }))
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    pub fn store(&self) -> &RunStore {
        &self.store
    }

    pub fn is_shutting_down(&self) -> bool {
        self.shutting_down.load(Ordering::SeqCst)
    }

    pub fn connect(&self) -> (Connection, Receiver<Outgoing>) {
        let (outbox, inbox) = unbounded();
        let id = self.next_conn.fetch_add(1, Ordering::Relaxed);
        (Connection { id, outbox, role: Role::Unknown }, inbox)
    }

    fn slot(&self, run_id: &str) -> Option<Arc<Mutex<RunSlot>>> {
        self.runs.read().unwrap().get(run_id).cloned()
    }

    fn all_slots(&self) -> Vec<Arc<Mutex<RunSlot>>> {
        self.runs.read().unwrap().values().cloned().collect()
    }

    fn sync_index(&self, slot: &RunSlot) {
        self.index.lock().unwrap().insert(slot.run_id().to_string(), slot.trajectory.run.clone());
    }

    /// All runs, oldest first.
    pub fn run_list(&self) -> Vec<RunRecord> {
        let mut runs: Vec<RunRecord> = self.index.lock().unwrap().values().cloned().collect();
        runs.sort_by(|a, b| (a.started_at.as_datetime(), &a.run_id).cmp(&(b.started_at.as_datetime(), &b.run_id)));
        runs
    }

    fn broadcast_run_list(&self) {
        let message = Message::RunList(RunList { runs: self.run_list() });
        self.ui_clients.lock().unwrap().retain(|_, outbox| {
            outbox.send(Outgoing::Send { run_id: String::new(), message: message.clone() }).is_ok()
        });
    }

    /// Snapshot of one run.
    pub fn trajectory(&self, run_id: &str) -> Option<Trajectory> {
        self.slot(run_id).map(|slot| lock(&slot).trajectory.clone())
    }

    /// Canonical document of one run.
    pub fn export(&self, run_id: &str) -> Option<Vec<u8>> {
        self.trajectory(run_id).map(|t| t.serialize())
    }

    /// Waits for all queued summaries to be delivered.
    pub fn wait_idle(&self, timeout: Duration) -> bool {
        self.pool.wait_idle(timeout)
    }

    /// Diff of a commit recorded in a run.
    pub fn diff(&self, run_id: &str, commit_id: &str) -> Result<CommitDiff, DiffError> {
        let trajectory = self.trajectory(run_id).ok_or_else(|| DiffError::RunNotFound(run_id.to_string()))?;
        let Some(path) = trajectory.run.workspace_path.clone() else {
            return Err(DiffError::NoWorkspace(run_id.to_string()));
        };
        if commit_id.len() < 4 || !trajectory.commits().any(|c| c.commit_id.starts_with(commit_id)) {
            return Err(DiffError::NotInRun(commit_id.to_string()));
        }
        Ok(workspace::get_diff(Path::new(&path), commit_id)?)
    }

    // ---- frames ----

    /// Handles one inbound frame; replies go to the connection's outbox.
    pub fn handle_frame(&self, conn: &mut Connection, frame: &[u8]) {
        let envelope = match decode(frame) {
            Ok(envelope) => envelope,
            Err(e) => {
                debug!("connection {}: undecodable frame: {e}", conn.id);
                match &mut conn.role {
                    Role::Agent(_) => {
                        let mut role = std::mem::replace(&mut conn.role, Role::Unknown);
                        if let Role::Agent(session) = &mut role {
                            self.agent_fatal(conn, session, format!("malformed: {e}"));
                        }
                        conn.role = role;
                    }
                    _ => conn.send("", Message::error("protocol", Some(e.to_string()))),
                }
                return;
            }
        };
        if let Role::Unknown = conn.role {
            conn.role = match envelope.message.direction() {
                Direction::AgentToServer => Role::Agent(AgentSession::default()),
                Direction::UiToServer => {
                    self.ui_clients.lock().unwrap().insert(conn.id, conn.outbox.clone());
                    Role::Ui(UiSession::default())
                }
                _ => {
                    conn.send(
                        "",
                        Message::error("protocol", Some(format!("{} is sent by the server", envelope.type_name()))),
                    );
                    return;
                }
            };
        }
        let mut role = std::mem::replace(&mut conn.role, Role::Unknown);
        match &mut role {
            Role::Agent(session) => self.handle_agent_message(conn, session, envelope),
            Role::Ui(session) => self.handle_ui_message(conn, session, envelope),
            Role::Unknown => {}
        }
        conn.role = role;
    }

    /// Cleans up after a closed connection; an unfinished agent run aborts.
    pub fn disconnect(&self, conn: Connection) {
        match conn.role {
            Role::Agent(session) => {
                if let (Some(run_id), false) = (session.run_id, session.finished) {
                    info!("agent of run {run_id} disconnected");
                    self.finish_run(&run_id, RunStatus::Aborted);
                }
            }
            Role::Ui(mut session) => {
                self.ui_clients.lock().unwrap().remove(&conn.id);
                self.unsubscribe(conn.id, &mut session);
            }
            Role::Unknown => {}
        }
    }

    // ---- agent side ----

    pub fn handle_agent_message(&self, conn: &Connection, session: &mut AgentSession, envelope: Envelope) {
        if session.finished {
            self.agent_fatal(conn, session, "session_closed".into());
            return;
        }
        if let Err(reason) = session.sequence.validate(Direction::AgentToServer, &envelope.message) {
            self.agent_fatal(conn, session, reason.code().to_string());
            return;
        }
        let result = match envelope.message {
            Message::HelloAgent(hello) => self.open_run(conn, session, hello),
            Message::EventBegin(begin) => {
                let kind = match begin.event_kind {
                    BreakpointKind::LlmQuery => EventKind::LlmQuery,
                    BreakpointKind::ToolInvocation => EventKind::ToolInvocation,
                };
                self.append_agent_event(session, kind, begin.body, begin.tool_name, begin.holdable)
            }
            Message::EventEnd(end) => {
                let kind = match end.event_kind {
                    BreakpointKind::LlmQuery => EventKind::LlmResponse,
                    BreakpointKind::ToolInvocation => EventKind::ToolResult,
                };
                self.append_agent_event(session, kind, end.body, None, end.holdable)
            }
            Message::CommitRequest(request) => self.commit_request(session, request),
            Message::DebugMessage(message) => self.debug_message(session, message.text),
            Message::Goodbye => {
                session.finished = true;
                if let Some(run_id) = &session.run_id {
                    self.finish_run(run_id, RunStatus::Completed);
                }
                Ok(())
            }
            _ => unreachable!("validate only accepts agent messages"),
        };
        if let Err(reason) = result {
            self.agent_fatal(conn, session, reason);
        }
    }

    fn agent_fatal(&self, conn: &Connection, session: &mut AgentSession, reason: String) {
        warn!("agent connection {}: fatal: {reason}", conn.id);
        conn.send(session.run_id.as_deref().unwrap_or(""), Message::Fatal(Fatal { reason }));
        conn.close();
        if let (Some(run_id), false) = (&session.run_id, session.finished) {
            self.finish_run(run_id, RunStatus::Aborted);
        }
        session.finished = true;
    }

    fn new_run_id(&self) -> String {
        loop {
            let id = uuid::Uuid::new_v4().simple().to_string()[..12].to_string();
            if !self.store.contains(&id) && self.slot(&id).is_none() {
                return id;
            }
        }
    }

    fn open_run(&self, conn: &Connection, session: &mut AgentSession, hello: HelloAgent) -> Result<(), String> {
        let run_id = self.new_run_id();
        let mut run = RunRecord::new_live(&run_id, &hello.agent_name);
        let mut claim = None;
        let mut workspace = None;
        if let Some(path) = hello.workspace_path.as_deref().filter(|p| !p.is_empty()) {
            let canonical = std::fs::canonicalize(path).unwrap_or_else(|_| PathBuf::from(path));
            if !self.workspaces.lock().unwrap().insert(canonical.clone()) {
                return Err(format!("workspace in use by another live run: {path}"));
            }
            match workspace::open_session(Path::new(path), &run_id, self.config.auto_commit) {
                Ok(opened) => {
                    run.workspace_path = Some(path.to_string());
                    run.original_branch = Some(opened.original_branch.clone());
                    run.run_branch = Some(opened.run_branch.clone());
                    workspace = Some(opened);
                    claim = Some(canonical);
                }
                Err(e) => {
                    self.workspaces.lock().unwrap().remove(&canonical);
                    return Err(format!("workspace: {e}"));
                }
            }
        }
        let trajectory = Trajectory::new(run);
        if let Err(e) = self.store.create_live(&trajectory) {
            if let Some(ws) = workspace {
                let _ = ws.close(None, &self.summarizer);
            }
            if let Some(claim) = claim {
                self.workspaces.lock().unwrap().remove(&claim);
            }
            return Err(format!("storage: {e}"));
        }
        info!("run {run_id} started by {:?}", hello.agent_name);
        let slot = RunSlot {
            trajectory,
            engine: Some(BreakpointEngine::new(self.config.initial_state)),
            agent: Some(conn.outbox.clone()),
            workspace,
            workspace_claim: claim,
            subscribers: Vec::new(),
            held_since: None,
            awaiting_resume: false,
        };
        {
            // listed runs must already be subscribable
            let mut runs = self.runs.write().unwrap();
            self.sync_index(&slot);
            runs.insert(run_id.clone(), Arc::new(Mutex::new(slot)));
        }
        session.run_id = Some(run_id.clone());
        conn.send(&run_id, Message::HelloAck(HelloAck { run_id: run_id.clone() }));
        self.broadcast_run_list();
        Ok(())
    }

    fn session_slot(&self, session: &AgentSession) -> Result<Arc<Mutex<RunSlot>>, String> {
        session.run_id.as_deref().and_then(|id| self.slot(id)).ok_or_else(|| "no run for this session".to_string())
    }

    fn append_agent_event(
        &self,
        session: &AgentSession,
        kind: EventKind,
        body: Body,
        tool_name: Option<String>,
        holdable: bool,
    ) -> Result<(), String> {
        if kind == EventKind::ToolInvocation && tool_name.as_deref().is_none_or(str::is_empty) {
            return Err("missing_tool_name".into());
        }
        let slot = self.session_slot(session)?;
        let mut slot = lock(&slot);
        if !slot.is_live() {
            return Err("run_closed".into());
        }
        if slot.awaiting_resume {
            return Err("awaiting_resume".into());
        }
        let previous = previous_rendering(&slot.trajectory, kind, slot.trajectory.events.len() as u64);
        let event_id = slot.trajectory.push_event(kind, body.clone(), tool_name.clone(), Timestamp::now()).event_id;
        let verdict = slot.engine.as_mut().expect("live runs have an engine").on_event(
            event_id,
            kind,
            &body,
            tool_name.as_deref(),
            holdable,
        );
        if verdict == Verdict::Hold {
            slot.trajectory.event_mut(event_id).expect("just appended").held = true;
            slot.held_since = Some(Instant::now());
            slot.awaiting_resume = true;
        }
        let mut commit = None;
        if kind == EventKind::ToolResult && self.config.auto_commit {
            if let Some(ws) = &slot.workspace {
                match ws.commit_changes(None, None, event_id, &self.summarizer) {
                    Ok(outcome) => commit = outcome.record,
                    Err(e) => warn!("run {}: auto-commit failed: {e}", slot.run_id()),
                }
            }
        }
        if let Some(record) = &commit {
            slot.trajectory.event_mut(event_id).expect("just appended").attach_commit(record.clone());
        }
        let event = slot.trajectory.event(event_id).expect("just appended").clone();
        if let Err(e) = self.store.append_event(slot.run_id(), &event) {
            warn!("run {}: cannot journal event {event_id}: {e}", slot.run_id());
        }
        self.sync_index(&slot);
        slot.broadcast(Message::EventAppended(Box::new(event)));
        if let Some(record) = commit {
            slot.broadcast(Message::CommitAppended(record));
        }
        if let Some(kind) = SummaryKind::for_event(kind) {
            let request = SummaryRequest::for_event(kind, &body, tool_name.as_deref(), previous);
            self.pool.submit(SummaryJob { run_id: slot.run_id().to_string(), event_id, request });
        }
        if verdict == Verdict::Hold {
            let state = slot.state_message();
            slot.broadcast(state);
        } else {
            let action = match slot.engine.as_ref().map(|e| e.state().state) {
                Some(agentstepper_core::model::ControlState::Stepping) => ResumeAction::Step,
                _ => ResumeAction::Continue,
            };
            slot.to_agent(Message::Resume(ResumeDecision::unedited(action)));
        }
        Ok(())
    }

    fn commit_request(&self, session: &AgentSession, request: CommitRequest) -> Result<(), String> {
        let slot = self.session_slot(session)?;
        let mut slot = lock(&slot);
        if !slot.is_live() {
            return Err("run_closed".into());
        }
        if slot.awaiting_resume {
            return Err("awaiting_resume".into());
        }
        let not_committed =
            |message: &str| CommitAck { committed: false, commit_id: None, message: Some(message.into()) };
        let last_event = slot.trajectory.events.last().map(|e| e.event_id);
        let ack = match (&slot.workspace, last_event) {
            (None, _) => not_committed("no workspace configured"),
            (Some(_), None) => not_committed("no event to attach the commit to"),
            (Some(ws), Some(event_id)) => {
                match ws.commit_changes(
                    request.summary.as_deref(),
                    request.description.as_deref(),
                    event_id,
                    &self.summarizer,
                ) {
                    Ok(outcome) => match outcome.record {
                        Some(record) => {
                            let event = slot.trajectory.event_mut(event_id).expect("last event exists");
                            event.attach_commit(record.clone());
                            let event = event.clone();
                            if let Err(e) = self.store.append_event(slot.run_id(), &event) {
                                warn!("run {}: cannot journal commit: {e}", slot.run_id());
                            }
                            let commit_id = record.commit_id.clone();
                            slot.broadcast(Message::CommitAppended(record));
                            CommitAck { committed: true, commit_id: Some(commit_id), message: None }
                        }
                        None => not_committed("no changes"),
                    },
                    Err(e) => not_committed(&e.to_string()),
                }
            }
        };
        slot.to_agent(Message::CommitAck(ack));
        Ok(())
    }

    fn debug_message(&self, session: &AgentSession, text: String) -> Result<(), String> {
        let slot = self.session_slot(session)?;
        let mut slot = lock(&slot);
        if !slot.is_live() {
            return Err("run_closed".into());
        }
        if slot.awaiting_resume {
            return Err("awaiting_resume".into());
        }
        let output = self.summarizer.summarize_debug_message(&text);
        let event = slot.trajectory.push_event(EventKind::DebugMessage, Body::String(text), None, Timestamp::now());
        event.summary = Some(EventSummary { text: output.text.clone(), origin: output.origin });
        let event = event.clone();
        if let Err(e) = self.store.append_event(slot.run_id(), &event) {
            warn!("run {}: cannot journal debug message: {e}", slot.run_id());
        }
        self.sync_index(&slot);
        let event_id = event.event_id;
        slot.broadcast(Message::EventAppended(Box::new(event)));
        slot.broadcast(Message::SummaryReady(Summary { event_id, text: output.text, origin: output.origin }));
        Ok(())
    }

    /// Ends a live run: releases any hold, restores the workspace, stamps
    /// the final status and rewrites the document canonically.
    fn finish_run(&self, run_id: &str, status: RunStatus) {
        let Some(slot) = self.slot(run_id) else { return };
        {
            let mut slot = lock(&slot);
            if !slot.is_live() {
                return;
            }
            if let Some(release) = slot.engine.as_mut().and_then(|e| e.close()) {
                slot.to_agent(Message::Resume(release.decision));
            }
            slot.engine = None;
            slot.awaiting_resume = false;
            slot.held_since = None;
            let last_event = slot.trajectory.events.last().map(|e| e.event_id);
            if let Some(ws) = slot.workspace.take() {
                match ws.close(last_event, &self.summarizer) {
                    Ok(Some(record)) => {
                        if let Some(event) = last_event.and_then(|id| slot.trajectory.event_mut(id)) {
                            event.attach_commit(record.clone());
                        }
                        slot.broadcast(Message::CommitAppended(record));
                    }
                    Ok(None) => {}
                    Err(e) => warn!("run {run_id}: restoring the workspace failed: {e}"),
                }
            }
            if let Some(claim) = slot.workspace_claim.take() {
                self.workspaces.lock().unwrap().remove(&claim);
            }
            slot.trajectory.run.status = status;
            slot.trajectory.run.ended_at = Some(Timestamp::now());
            if let Err(e) = self.store.persist(&slot.trajectory) {
                warn!("run {run_id}: cannot persist final document: {e}");
            }
            self.sync_index(&slot);
            let state = slot.state_message();
            slot.broadcast(state);
            slot.agent = None;
            info!("run {run_id} {}", status.as_str());
        }
        self.broadcast_run_list();
    }

    fn deliver_summary(&self, job: SummaryJob, output: SummaryOutput) {
        let Some(slot) = self.slot(&job.run_id) else { return };
        let mut slot = lock(&slot);
        let Some(event) = slot.trajectory.event_mut(job.event_id) else { return };
        // an edit since scheduling means a newer job is on its way
        if render_event_for_summary(event.kind, &event.body, event.tool_name.as_deref()) != job.request.current {
            return;
        }
        event.summary = Some(EventSummary { text: output.text.clone(), origin: output.origin });
        let event = event.clone();
        let stored = if slot.is_live() {
            self.store.append_event(slot.run_id(), &event)
        } else {
            self.store.persist(&slot.trajectory)
        };
        if let Err(e) = stored {
            warn!("run {}: cannot persist summary: {e}", slot.run_id());
        }
        slot.broadcast(Message::SummaryReady(Summary {
            event_id: job.event_id,
            text: output.text,
            origin: output.origin,
        }));
    }

    /// Applies a released hold: records an edit, answers the agent.
    fn apply_release(&self, slot: &mut RunSlot, release: Release) {
        slot.awaiting_resume = false;
        slot.held_since = None;
        let decision = release.decision;
        if decision.edited {
            let event_id = release.slot.event_id;
            let kind = slot.trajectory.event(event_id).expect("held event exists").kind;
            let previous = previous_rendering(&slot.trajectory, kind, event_id);
            let event = slot.trajectory.event_mut(event_id).expect("held event exists");
            event.apply_edit(decision.body.clone().unwrap_or(Body::Null), decision.tool_name.clone());
            let event = event.clone();
            let request = SummaryKind::for_event(event.kind)
                .map(|kind| SummaryRequest::for_event(kind, &event.body, event.tool_name.as_deref(), previous));
            if let Err(e) = self.store.append_event(slot.run_id(), &event) {
                warn!("run {}: cannot journal edit: {e}", slot.run_id());
            }
            slot.broadcast(Message::EventAppended(Box::new(event)));
            if let Some(request) = request {
                self.pool.submit(SummaryJob { run_id: slot.run_id().to_string(), event_id, request });
            }
        }
        slot.to_agent(Message::Resume(decision));
    }

    /// Releases holds older than `timeout` with continue.
    pub fn expire_holds(&self, timeout: Duration) {
        for slot in self.all_slots() {
            let mut slot = lock(&slot);
            if !slot.held_since.is_some_and(|since| since.elapsed() >= timeout) {
                continue;
            }
            if let Some(release) = slot.engine.as_mut().and_then(|e| e.release_on_timeout()) {
                info!("run {}: hold on event {} timed out", slot.run_id(), release.slot.event_id);
                self.apply_release(&mut slot, release);
                let state = slot.state_message();
                slot.broadcast(state);
            }
        }
    }

    /// Aborts every live run (held agents are released with continue) and
    /// tells connections to close.
    pub fn shutdown(&self) {
        let live: Vec<String> =
            self.run_list().into_iter().filter(|r| r.status == RunStatus::Live).map(|r| r.run_id).collect();
        for run_id in live {
            self.finish_run(&run_id, RunStatus::Aborted);
        }
        self.shutting_down.store(true, Ordering::SeqCst);
    }

    // ---- UI side ----

    pub fn handle_ui_message(&self, conn: &Connection, session: &mut UiSession, envelope: Envelope) {
        let target = (!envelope.run_id.is_empty()).then(|| envelope.run_id.clone());
        match envelope.message {
            Message::ListRuns => conn.send("", Message::RunList(RunList { runs: self.run_list() })),
            Message::Subscribe(subscribe) => self.subscribe(conn, session, subscribe.run_id),
            Message::Control(control) => {
                let run_id = target.or_else(|| session.subscribed.clone());
                self.control(conn, run_id.as_deref(), control.command);
            }
            Message::Edit(edit) => self.edit(conn, edit),
            Message::ImportRun(import) => match self.import_document(import.document.as_bytes()) {
                Ok(run) => debug!("imported run {}", run.run_id),
                Err(e) => {
                    let reason = match e {
                        ImportError::Parse(_) => "parse-error",
                        ImportError::Conflict(_) => "conflict",
                        ImportError::Store(_) => "storage",
                    };
                    conn.send("", Message::error(reason, Some(e.to_string())));
                }
            },
            other => {
                conn.send("", Message::error("protocol", Some(format!("{} is not a UI message", other.type_name()))))
            }
        }
    }

    fn unsubscribe(&self, conn_id: ConnId, session: &mut UiSession) {
        if let Some(old) = session.subscribed.take() {
            if let Some(slot) = self.slot(&old) {
                lock(&slot).subscribers.retain(|(id, _)| *id != conn_id);
            }
        }
    }

    fn subscribe(&self, conn: &Connection, session: &mut UiSession, run_id: Option<String>) {
        self.unsubscribe(conn.id, session);
        let Some(run_id) = run_id else { return };
        let Some(slot) = self.slot(&run_id) else {
            conn.send(&run_id, Message::error("not-found", Some(format!("no run {run_id}"))));
            return;
        };
        let mut slot = lock(&slot);
        for event in &slot.trajectory.events {
            conn.send(&run_id, Message::EventAppended(Box::new(event.clone())));
        }
        for event in &slot.trajectory.events {
            if let Some(summary) = &event.summary {
                conn.send(
                    &run_id,
                    Message::SummaryReady(Summary {
                        event_id: event.event_id,
                        text: summary.text.clone(),
                        origin: summary.origin,
                    }),
                );
            }
        }
        for commit in slot.trajectory.commits() {
            conn.send(&run_id, Message::CommitAppended(commit.clone()));
        }
        conn.send(&run_id, slot.state_message());
        slot.subscribers.push((conn.id, conn.outbox.clone()));
        session.subscribed = Some(run_id);
    }

    fn control(&self, conn: &Connection, run_id: Option<&str>, command: ControlCommand) {
        let Some(run_id) = run_id else {
            conn.send("", Message::error("not-found", Some("no run selected".to_string())));
            return;
        };
        let Some(slot) = self.slot(run_id) else {
            conn.send(run_id, Message::error("not-found", Some(format!("no run {run_id}"))));
            return;
        };
        let mut slot = lock(&slot);
        let Some(engine) = slot.engine.as_mut() else {
            let status = slot.trajectory.run.status.as_str();
            conn.send(run_id, Message::error("invalid-state", Some(format!("run {run_id} is {status}"))));
            return;
        };
        match engine.on_control(command) {
            Ok(release) => {
                if let Some(release) = release {
                    self.apply_release(&mut slot, release);
                }
                let state = slot.state_message();
                slot.broadcast(state);
            }
            Err(e) => conn.send(run_id, Message::error(e.reason(), Some(e.to_string()))),
        }
    }

    fn edit(&self, conn: &Connection, edit: Edit) {
        let Some(slot) = self.slot(&edit.run_id) else {
            conn.send(&edit.run_id, Message::error("not-found", Some(format!("no run {}", edit.run_id))));
            return;
        };
        let mut slot = lock(&slot);
        let Some(engine) = slot.engine.as_mut() else {
            let status = slot.trajectory.run.status.as_str();
            conn.send(&edit.run_id, Message::error("invalid-state", Some(format!("run {} is {status}", edit.run_id))));
            return;
        };
        if let Err(e) = engine.submit_edit(edit.event_id, edit.body, edit.tool_name) {
            conn.send(&edit.run_id, Message::error(e.reason(), Some(e.to_string())));
        }
    }

    /// Parses, stores and registers an exported document for post-hoc
    /// inspection under its recorded run id.
    pub fn import_document(&self, document: &[u8]) -> Result<RunRecord, ImportError> {
        let trajectory = Trajectory::deserialize(document)?;
        let run_id = trajectory.run_id().to_string();
        {
            let mut runs = self.runs.write().unwrap();
            if runs.contains_key(&run_id) || self.store.contains(&run_id) {
                return Err(ImportError::Conflict(run_id));
            }
            self.store.import(&trajectory).map_err(|e| match e {
                StoreError::Exists(id) => ImportError::Conflict(id),
                other => ImportError::Store(other),
            })?;
            let slot = RunSlot::finished(trajectory);
            self.sync_index(&slot);
            runs.insert(run_id.clone(), Arc::new(Mutex::new(slot)));
        }
        info!("imported run {run_id}");
        self.broadcast_run_list();
        Ok(self.index.lock().unwrap()[&run_id].clone())
    }
}

/// Rendering of the last event of `kind` before `event_id`, the baseline a
/// summary describes changes against.
fn previous_rendering(trajectory: &Trajectory, kind: EventKind, event_id: u64) -> Option<String> {
    trajectory.events[..event_id as usize]
        .iter()
        .rev()
        .find(|e| e.kind == kind)
        .map(|e| render_event_for_summary(e.kind, &e.body, e.tool_name.as_deref()))
}
