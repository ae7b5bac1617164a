//! On-disk run storage under `<data_dir>/runs/<run_id>/`.
//!
//! A finished run is one canonical trajectory document. A live run is a
//! journal: the header line followed by event records appended as they
//! change. A later record for the same `event_id` replaces the earlier one,
//! so edits, summaries and commits are journaled without rewriting the file.
//! Finishing a run rewrites the journal canonically (write then rename).

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use agentstepper_core::model::{parse_event_line, parse_header_line, Event, RunStatus, Trajectory};
use log::warn;
use thiserror::Error;

const TRAJECTORY_FILE: &str = "trajectory.jsonl";
const IMPORTED_MARKER: &str = "imported";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("run {0} already exists")]
    Exists(String),
    #[error("run {0} not found")]
    NotFound(String),
    #[error("invalid run id {0:?}")]
    InvalidId(String),
    #[error("run {run_id}: {message}")]
    Corrupt { run_id: String, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug)]
pub struct RunStore {
    root: PathBuf,
}

impl RunStore {
    /// Opens (creating if needed) the store inside `data_dir` and checks
    /// that it is writable.
    pub fn open(data_dir: &Path) -> Result<RunStore, StoreError> {
        let root = data_dir.join("runs");
        fs::create_dir_all(&root)?;
        let probe = root.join(".write-probe");
        File::create(&probe)?;
        fs::remove_file(&probe)?;
        Ok(RunStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn contains(&self, run_id: &str) -> bool {
        valid_id(run_id) && self.run_dir(run_id).exists()
    }

    fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join(run_id)
    }

    fn trajectory_path(&self, run_id: &str) -> PathBuf {
        self.run_dir(run_id).join(TRAJECTORY_FILE)
    }

    /// Starts the journal of a new live run.
    pub fn create_live(&self, trajectory: &Trajectory) -> Result<(), StoreError> {
        let run_id = trajectory.run_id();
        check_id(run_id)?;
        let dir = self.run_dir(run_id);
        if dir.exists() {
            return Err(StoreError::Exists(run_id.to_string()));
        }
        fs::create_dir_all(&dir)?;
        let mut file = File::create(self.trajectory_path(run_id))?;
        writeln!(file, "{}", trajectory.header_line())?;
        for event in &trajectory.events {
            writeln!(file, "{}", Trajectory::event_line(event))?;
        }
        file.sync_data()?;
        Ok(())
    }

    /// Journals the current state of one event of a live run.
    pub fn append_event(&self, run_id: &str, event: &Event) -> Result<(), StoreError> {
        let mut file = OpenOptions::new().append(true).open(self.trajectory_path(run_id))?;
        let mut line = Trajectory::event_line(event);
        line.push('\n');
        file.write_all(line.as_bytes())?;
        file.sync_data()?;
        Ok(())
    }

    /// Replaces the stored document with the canonical serialization.
    pub fn persist(&self, trajectory: &Trajectory) -> Result<(), StoreError> {
        let run_id = trajectory.run_id();
        check_id(run_id)?;
        let dir = self.run_dir(run_id);
        fs::create_dir_all(&dir)?;
        write_atomic(&dir, TRAJECTORY_FILE, &trajectory.serialize())
    }

    /// Stores an imported run under its recorded id.
    pub fn import(&self, trajectory: &Trajectory) -> Result<(), StoreError> {
        let run_id = trajectory.run_id();
        check_id(run_id)?;
        let dir = self.run_dir(run_id);
        if dir.exists() {
            return Err(StoreError::Exists(run_id.to_string()));
        }
        fs::create_dir_all(&dir)?;
        File::create(dir.join(IMPORTED_MARKER))?;
        write_atomic(&dir, TRAJECTORY_FILE, &trajectory.serialize())
    }

    pub fn load(&self, run_id: &str) -> Result<Trajectory, StoreError> {
        if !self.contains(run_id) {
            return Err(StoreError::NotFound(run_id.to_string()));
        }
        self.load_dir(&self.run_dir(run_id))
    }

    /// Loads every readable run as stored, without modifying anything.
    /// Unreadable runs are skipped with a warning.
    pub fn scan(&self) -> Vec<Trajectory> {
        let entries = match fs::read_dir(&self.root) {
            Ok(entries) => entries,
            Err(e) => {
                warn!("cannot read {}: {e}", self.root.display());
                return Vec::new();
            }
        };
        let mut runs = Vec::new();
        for entry in entries.flatten() {
            let path = entry.path();
            if !path.is_dir() {
                continue;
            }
            match self.load_dir(&path) {
                Ok(trajectory) => runs.push(trajectory),
                Err(e) => warn!("skipping {}: {e}", path.display()),
            }
        }
        runs.sort_by(|a, b| {
            (a.run.started_at.as_datetime(), a.run_id()).cmp(&(b.run.started_at.as_datetime(), b.run_id()))
        });
        runs
    }

    /// Startup load: like [`scan`](Self::scan), but runs left live by a
    /// crash are demoted to aborted and rewritten canonically.
    pub fn load_all(&self) -> Vec<Trajectory> {
        let mut runs = self.scan();
        for trajectory in runs.iter_mut().filter(|t| t.run.status == RunStatus::Live) {
            demote(trajectory);
            if let Err(e) = self.persist(trajectory) {
                warn!("run {}: cannot rewrite recovered run: {e}", trajectory.run_id());
            }
        }
        runs
    }

    fn load_dir(&self, dir: &Path) -> Result<Trajectory, StoreError> {
        let run_id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let corrupt = |message: String| StoreError::Corrupt { run_id: run_id.clone(), message };
        let bytes = fs::read(dir.join(TRAJECTORY_FILE))?;
        let text = String::from_utf8_lossy(&bytes);
        let header = text.split('\n').next().unwrap_or_default();
        let run = parse_header_line(header).map_err(|m| corrupt(format!("line 1: {m}")))?;
        if run.run_id != run_id {
            return Err(corrupt(format!("header names run {:?}", run.run_id)));
        }
        let mut trajectory = if run.status == RunStatus::Live {
            recover_journal(&text, run)
        } else {
            Trajectory::parse_document(&bytes).map_err(|e| corrupt(e.to_string()))?
        };
        if dir.join(IMPORTED_MARKER).exists() {
            trajectory.mark_imported();
        }
        Ok(trajectory)
    }
}

/// Rebuilds a live run from its journal, keeping the last record of each
/// event and stopping at the first unreadable or out-of-sequence line (the
/// append in flight when the process died).
fn recover_journal(text: &str, mut run: agentstepper_core::model::RunRecord) -> Trajectory {
    let mut latest: BTreeMap<u64, Event> = BTreeMap::new();
    let lines: Vec<&str> = text.split('\n').collect();
    // the piece after the last newline is empty unless the final write was cut short
    let complete = lines.len().saturating_sub(1);
    for (index, line) in lines.iter().enumerate().take(complete).skip(1) {
        let event = match parse_event_line(line) {
            Ok(event) => event,
            Err(e) => {
                warn!("run {}: journal line {}: {e}; ignoring the rest", run.run_id, index + 1);
                break;
            }
        };
        let next_id = latest.len() as u64;
        if event.event_id > next_id {
            warn!(
                "run {}: journal line {}: event {} skips ahead; ignoring the rest",
                run.run_id,
                index + 1,
                event.event_id
            );
            break;
        }
        latest.insert(event.event_id, event);
    }
    if lines.len() > 1 && !lines[lines.len() - 1].is_empty() {
        warn!("run {}: dropping truncated final journal line", run.run_id);
    }
    run.event_count = latest.len() as u64;
    let mut trajectory = Trajectory::new(run);
    trajectory.events = latest.into_values().collect();
    trajectory.rebuild_counter();
    trajectory
}

fn demote(trajectory: &mut Trajectory) {
    trajectory.run.status = RunStatus::Aborted;
    let ended = trajectory.events.last().map(|e| e.timestamp).unwrap_or(trajectory.run.started_at);
    trajectory.run.ended_at = Some(ended);
}

fn write_atomic(dir: &Path, name: &str, contents: &[u8]) -> Result<(), StoreError> {
    let temp = dir.join(format!(".{name}.tmp"));
    {
        let mut file = File::create(&temp)?;
        file.write_all(contents)?;
        file.sync_all()?;
    }
    fs::rename(&temp, dir.join(name))?;
    Ok(())
}

fn valid_id(run_id: &str) -> bool {
    !run_id.is_empty()
        && run_id.len() <= 128
        && !run_id.starts_with('.')
        && run_id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
}

fn check_id(run_id: &str) -> Result<(), StoreError> {
    if valid_id(run_id) {
        Ok(())
    } else {
        Err(StoreError::InvalidId(run_id.to_string()))
    }
}
