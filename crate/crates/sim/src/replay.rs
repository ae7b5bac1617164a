//! Record/replay regression checks: re-run a recorded script and compare
//! the persisted trajectories, ignoring what legitimately differs between
//! runs (run id, timestamps, commit hashes, sandbox location).

use std::fmt;
use std::path::Path;

use agentstepper_core::model::Trajectory;
use serde_json::Value;

use crate::runner::{run_script, ScriptReport, SimError};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Verdict {
    Identical,
    /// `event_id` is `None` when the run header differs.
    Diverged {
        event_id: Option<u64>,
        detail: String,
    },
}

impl Verdict {
    pub fn is_identical(&self) -> bool {
        *self == Verdict::Identical
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Identical => f.write_str("identical"),
            Verdict::Diverged { event_id: Some(id), detail } => write!(f, "diverged at event {id}: {detail}"),
            Verdict::Diverged { event_id: None, detail } => write!(f, "diverged in run header: {detail}"),
        }
    }
}

const RUN_VOLATILE: &[&str] = &["run_id", "started_at", "ended_at", "workspace_path", "run_branch"];

fn normalized_run(trajectory: &Trajectory) -> Value {
    let mut run = serde_json::to_value(&trajectory.run).expect("run records serialize");
    if let Value::Object(fields) = &mut run {
        for key in RUN_VOLATILE {
            fields.remove(*key);
        }
    }
    run
}

fn normalized_event(event: &agentstepper_core::model::Event) -> Value {
    let mut value = serde_json::to_value(event).expect("events serialize");
    if let Value::Object(fields) = &mut value {
        fields.remove("timestamp");
        if fields.contains_key("commit_id") {
            fields.insert("commit_id".into(), Value::String("<commit>".into()));
        }
        if let Some(Value::Array(commits)) = fields.get_mut("commits") {
            for commit in commits {
                if let Value::Object(commit) = commit {
                    commit.remove("commit_id");
                    commit.remove("timestamp");
                }
            }
        }
    }
    value
}

fn first_difference(recorded: &Value, replayed: &Value) -> String {
    if let (Value::Object(a), Value::Object(b)) = (recorded, replayed) {
        let mut keys: Vec<&String> = a.keys().chain(b.keys()).collect();
        keys.sort();
        keys.dedup();
        for key in keys {
            let (x, y) = (a.get(key), b.get(key));
            if x != y {
                let show = |v: Option<&Value>| v.map_or("(absent)".to_string(), |v| v.to_string());
                return format!("{key}: recorded {} / replayed {}", show(x), show(y));
            }
        }
    }
    format!("recorded {recorded} / replayed {replayed}")
}

/// Compares two trajectory documents up to run identity and timing.
pub fn compare(recorded: &str, replayed: &str) -> Verdict {
    let parse = |doc: &str, which: &str| {
        Trajectory::parse_document(doc.as_bytes())
            .map_err(|e| Verdict::Diverged { event_id: None, detail: format!("{which} document unreadable: {e}") })
    };
    let (recorded, replayed) = match (parse(recorded, "recorded"), parse(replayed, "replayed")) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(v), _) | (_, Err(v)) => return v,
    };
    for (a, b) in recorded.events.iter().zip(&replayed.events) {
        let (x, y) = (normalized_event(a), normalized_event(b));
        if x != y {
            return Verdict::Diverged { event_id: Some(a.event_id), detail: first_difference(&x, &y) };
        }
    }
    if recorded.events.len() != replayed.events.len() {
        let shorter = recorded.events.len().min(replayed.events.len());
        return Verdict::Diverged {
            event_id: Some(shorter as u64),
            detail: format!("recorded {} events / replayed {}", recorded.events.len(), replayed.events.len()),
        };
    }
    let (x, y) = (normalized_run(&recorded), normalized_run(&replayed));
    if x != y {
        return Verdict::Diverged { event_id: None, detail: first_difference(&x, &y) };
    }
    Verdict::Identical
}

/// Replays the recorded script against `server` with a fresh `sandbox` and
/// compares the resulting trajectory with the recorded one.
pub fn record_and_replay(
    recorded: &ScriptReport,
    server: &str,
    sandbox: &Path,
) -> Result<(Verdict, ScriptReport), SimError> {
    let expected = recorded.trajectory.as_deref().ok_or(SimError::NoTrajectory)?;
    let replay = run_script(&recorded.script, server, sandbox)?;
    let verdict = match replay.trajectory.as_deref() {
        Some(actual) => compare(expected, actual),
        None => Verdict::Diverged { event_id: None, detail: "replayed run has no trajectory".into() },
    };
    Ok((verdict, replay))
}
