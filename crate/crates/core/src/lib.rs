//! Core building blocks of the agentstepper debugger: the trajectory data
//! model, the debug wire protocol, the breakpoint engine, event summarizers,
//! and git-backed workspace snapshots.

pub mod engine;
pub mod model;
pub mod protocol;
pub mod summarizer;
pub mod workspace;

pub use engine::{BreakpointEngine, EngineError, HoldSlot, Release, Verdict};
pub use model::{
    assign_cycle, Body, CommitRecord, ControlState, Cycle, Event, EventKind, EventSummary, ExecutionState, Phase,
    RunMode, RunRecord, RunStatus, Summary, SummaryOrigin, Timestamp, Trajectory, TrajectoryError,
};
pub use protocol::{decode, encode, Envelope, Message, ProtocolError};
pub use summarizer::{Summarizer, SummarizerConfig, SummarizerRegistry};
pub use workspace::{WorkspaceError, WorkspaceSession};
