//! Scripted agents for the agentstepper debug server.
//!
//! [`run_script`] drives a declarative [`AgentScript`] over the wire
//! protocol against a real sandbox directory; [`record_and_replay`] re-runs
//! a recorded script and compares the persisted trajectories. [`UiClient`]
//! plays the UI side of the protocol for tests, and [`reference`] holds a
//! small hand-written agent with and without instrumentation.

pub mod client;
pub mod reference;
pub mod replay;
pub mod runner;
pub mod script;
pub mod ui;
mod wire;

pub use client::Debugger;
pub use replay::{compare, record_and_replay, Verdict};
pub use runner::{fetch_trajectory, http_get, run_script, Call, CallRecord, ScriptReport, SimError};
pub use script::{AgentScript, CommitMarker, CycleScript, Holdable, ToolCall};
pub use ui::UiClient;
pub use wire::{ClientError, RawConnection};
