//! Repository snapshots of the agent's workspace.
//!
//! Each run works on its own branch `agentstepper/run-<run_id>`. Pending
//! changes are committed there (after tool invocations or on request) and the
//! workspace is switched back to the original branch when the run ends, so
//! the original branch never moves. Commits are made with the `git`
//! executable and are readable by any standard git tooling.

use std::ffi::OsStr;
use std::io::Write;
use std::path::{Component, Path, PathBuf};
use std::process::{Command, Stdio};

use thiserror::Error;

use crate::model::{CommitRecord, Timestamp};
use crate::summarizer::{enforce_limits, Summarizer, SummaryRequest};

pub const RUN_BRANCH_PREFIX: &str = "agentstepper/run-";
pub const IGNORE_FILE: &str = ".agentstepperignore";

/// Diff text handed to the commit-message summarizer is clipped to this size.
const MAX_DIFF_FOR_MESSAGE: usize = 20_000;

#[derive(Debug, Error)]
pub enum WorkspaceError {
    #[error("workspace error: {0}")]
    Invalid(String),
    #[error("git {command} failed: {stderr}")]
    Git { command: String, stderr: String },
    #[error("could not run git: {0}")]
    Spawn(#[from] std::io::Error),
    #[error("not-found: commit {0}")]
    CommitNotFound(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum OriginalRef {
    Branch(String),
    Detached(String),
}

#[derive(Debug)]
pub struct WorkspaceSession {
    pub workspace_path: PathBuf,
    pub original_branch: String,
    pub run_branch: String,
    pub baseline_commit: String,
    pub auto_commit: bool,
    original: OriginalRef,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommitOutcome {
    pub committed: bool,
    pub record: Option<CommitRecord>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FileStat {
    pub path: String,
    pub insertions: u64,
    pub deletions: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DiffStats {
    pub files: Vec<FileStat>,
}

impl DiffStats {
    pub fn files_changed(&self) -> u64 {
        self.files.len() as u64
    }

    pub fn insertions(&self) -> u64 {
        self.files.iter().map(|f| f.insertions).sum()
    }

    pub fn deletions(&self) -> u64 {
        self.files.iter().map(|f| f.deletions).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommitDiff {
    pub commit_id: String,
    pub text: String,
    pub stats: DiffStats,
}

struct Git<'a> {
    dir: &'a Path,
}

impl Git<'_> {
    fn command<I, S>(&self, args: I) -> Command
    where
        I: IntoIterator<Item = S>,
        S: AsRef<OsStr>,
    {
        let mut command = Command::new("git");
        command
            .current_dir(self.dir)
            .args([
                "-c",
                "user.name=agentstepper",
                "-c",
                "user.email=agentstepper@localhost",
                "-c",
                "commit.gpgsign=false",
                "-c",
                "core.hooksPath=/dev/null",
                "-c",
                "core.autocrlf=false",
                "-c",
                "core.quotepath=false",
                "-c",
                "diff.renames=false",
                "-c",
                "advice.detachedHead=false",
            ])
            .args(args)
            .env("LC_ALL", "C")
            .env_remove("GIT_DIR")
            .env_remove("GIT_WORK_TREE")
            .env_remove("GIT_INDEX_FILE")
            .stdin(Stdio::null());
        command
    }

    fn run<I, S>(&self, args: I) -> Result<String, WorkspaceError>
    where
        I: IntoIterator<Item = S> + Clone,
        S: AsRef<OsStr>,
    {
        let output = self.command(args.clone()).output()?;
        if output.status.success() {
            Ok(String::from_utf8_lossy(&output.stdout).into_owned())
        } else {
            Err(WorkspaceError::Git {
                command: describe(args),
                stderr: String::from_utf8_lossy(&output.stderr).trim().to_string(),
            })
        }
    }

    /// Runs a query whose failure means "no".
    fn probe<I, S>(&self, args: I) -> Result<Option<String>, WorkspaceError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<OsStr>,
    {
        let output = self.command(args).output()?;
        Ok(output.status.success().then(|| String::from_utf8_lossy(&output.stdout).trim().to_string()))
    }

    fn commit(&self, message: &str) -> Result<String, WorkspaceError> {
        let mut child = self
            .command(["commit", "-q", "--no-verify", "--allow-empty", "--cleanup=verbatim", "-F", "-"])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()?;
        child.stdin.take().expect("stdin is piped").write_all(message.as_bytes())?;
        let output = child.wait_with_output()?;
        if !output.status.success() {
            return Err(WorkspaceError::Git {
                command: "commit".into(),
                stderr: String::from_utf8_lossy(&output.stderr).trim().to_string(),
            });
        }
        Ok(self.run(["rev-parse", "HEAD"])?.trim().to_string())
    }

    /// Stages every change in the worktree, honoring `.agentstepperignore`.
    fn stage_all(&self) -> Result<(), WorkspaceError> {
        let mut args: Vec<String> = vec!["add".into(), "-A".into(), "--".into(), ".".into()];
        args.extend(ignore_pathspecs(self.dir));
        self.run(&args)?;
        Ok(())
    }

    fn staged_diff(&self) -> Result<String, WorkspaceError> {
        self.run(["diff", "--cached", "--no-color", "--no-ext-diff", "--no-renames"])
    }

    fn head(&self) -> Result<String, WorkspaceError> {
        Ok(self.run(["rev-parse", "HEAD"])?.trim().to_string())
    }
}

fn describe<I, S>(args: I) -> String
where
    I: IntoIterator<Item = S>,
    S: AsRef<OsStr>,
{
    args.into_iter().map(|a| a.as_ref().to_string_lossy().into_owned()).collect::<Vec<_>>().join(" ")
}

fn ignore_pathspecs(dir: &Path) -> Vec<String> {
    let Ok(text) = std::fs::read_to_string(dir.join(IGNORE_FILE)) else {
        return Vec::new();
    };
    let mut specs = Vec::new();
    for line in text.lines() {
        let pattern = line.trim();
        if pattern.is_empty() || pattern.starts_with('#') {
            continue;
        }
        let anchored = pattern.starts_with('/');
        let pattern = pattern.trim_matches('/');
        if pattern.is_empty() {
            continue;
        }
        specs.push(format!(":(exclude,glob){pattern}"));
        specs.push(format!(":(exclude,glob){pattern}/**"));
        if !anchored && !pattern.contains('/') {
            specs.push(format!(":(exclude,glob)**/{pattern}"));
            specs.push(format!(":(exclude,glob)**/{pattern}/**"));
        }
    }
    specs
}

fn branch_exists(git: &Git, name: &str) -> Result<bool, WorkspaceError> {
    Ok(git.probe(["rev-parse", "--verify", "-q", &format!("refs/heads/{name}")])?.is_some())
}

/// Opens the run's workspace session, initializing a repository if needed and
/// checking out a fresh run branch whose first commit captures any
/// uncommitted state.
pub fn open_session(
    workspace_path: &Path,
    run_id: &str,
    auto_commit: bool,
) -> Result<WorkspaceSession, WorkspaceError> {
    if !workspace_path.is_dir() {
        return Err(WorkspaceError::Invalid(format!(
            "workspace path {} does not exist or is not a directory",
            workspace_path.display()
        )));
    }
    if workspace_path.components().any(|c| c == Component::Normal(OsStr::new(".git"))) {
        return Err(WorkspaceError::Invalid(format!(
            "workspace path {} lies inside repository metadata",
            workspace_path.display()
        )));
    }
    let workspace_path = workspace_path.canonicalize()?;
    let git = Git { dir: &workspace_path };
    if !workspace_path.join(".git").exists() {
        git.run(["init", "-q"])?;
    }
    let branch = git.probe(["symbolic-ref", "--short", "-q", "HEAD"])?;
    let has_head = git.probe(["rev-parse", "--verify", "-q", "HEAD"])?.is_some();
    if !has_head {
        // unborn branch: the baseline becomes its first commit
        git.stage_all()?;
        git.commit("agentstepper: baseline")?;
    }
    let original = match branch {
        Some(name) => OriginalRef::Branch(name),
        None => OriginalRef::Detached(git.head()?),
    };
    let base = format!("{RUN_BRANCH_PREFIX}{run_id}");
    let mut run_branch = base.clone();
    let mut suffix = 2;
    while branch_exists(&git, &run_branch)? {
        run_branch = format!("{base}-{suffix}");
        suffix += 1;
    }
    git.run(["checkout", "-q", "-b", &run_branch])?;
    git.stage_all()?;
    if !git.staged_diff()?.is_empty() {
        git.commit("agentstepper: baseline with uncommitted changes")?;
    }
    let baseline_commit = git.head()?;
    let original_branch = match &original {
        OriginalRef::Branch(name) | OriginalRef::Detached(name) => name.clone(),
    };
    Ok(WorkspaceSession { workspace_path, original_branch, run_branch, baseline_commit, auto_commit, original })
}

impl WorkspaceSession {
    fn git(&self) -> Git<'_> {
        Git { dir: &self.workspace_path }
    }

    /// Commits all pending changes on the run branch. An empty change set is
    /// not an error: it yields `committed == false`.
    pub fn commit_changes(
        &self,
        summary: Option<&str>,
        description: Option<&str>,
        triggering_event_id: u64,
        summarizer: &Summarizer,
    ) -> Result<CommitOutcome, WorkspaceError> {
        let git = self.git();
        git.stage_all()?;
        let diff = git.staged_diff()?;
        if diff.is_empty() {
            return Ok(CommitOutcome { committed: false, record: None });
        }
        let stats = parse_diff_stats(&diff);
        let message_summary = match summary.and_then(enforce_limits) {
            Some(text) => text,
            None => {
                let clipped: String = diff.chars().take(MAX_DIFF_FOR_MESSAGE).collect();
                summarizer.summarize(&SummaryRequest::for_diff(clipped)).text
            }
        };
        let message_description = description.unwrap_or_default().trim_end().to_string();
        let message = if message_description.is_empty() {
            format!("{message_summary}\n")
        } else {
            format!("{message_summary}\n\n{message_description}\n")
        };
        let commit_id = git.commit(&message)?;
        Ok(CommitOutcome {
            committed: true,
            record: Some(CommitRecord {
                commit_id,
                message_summary,
                message_description,
                triggering_event_id,
                files_changed: stats.files_changed(),
                insertions: stats.insertions(),
                deletions: stats.deletions(),
                timestamp: Timestamp::now(),
            }),
        })
    }

    /// Returns to the original branch. Pending changes are first committed on
    /// the run branch, attributed to `last_event_id` when there is one.
    pub fn close(
        self,
        last_event_id: Option<u64>,
        summarizer: &Summarizer,
    ) -> Result<Option<CommitRecord>, WorkspaceError> {
        let final_commit = self.commit_changes(None, None, last_event_id.unwrap_or(0), summarizer)?;
        let git = self.git();
        match &self.original {
            OriginalRef::Branch(name) => git.run(["checkout", "-q", name.as_str()])?,
            OriginalRef::Detached(hash) => git.run(["checkout", "-q", "--detach", hash.as_str()])?,
        };
        Ok(final_commit.record.filter(|_| last_event_id.is_some()))
    }

    pub fn diff(&self, commit_id: &str) -> Result<CommitDiff, WorkspaceError> {
        get_diff(&self.workspace_path, commit_id)
    }
}

/// Unified diff of `commit_id` against its first parent (or the empty tree
/// for a root commit).
pub fn get_diff(repository: &Path, commit_id: &str) -> Result<CommitDiff, WorkspaceError> {
    if commit_id.is_empty() || !commit_id.chars().all(|c| c.is_ascii_hexdigit()) {
        return Err(WorkspaceError::CommitNotFound(commit_id.to_string()));
    }
    if !repository.join(".git").exists() {
        return Err(WorkspaceError::CommitNotFound(commit_id.to_string()));
    }
    let git = Git { dir: repository };
    let Some(commit) = git.probe(["rev-parse", "--verify", "-q", &format!("{commit_id}^{{commit}}")])? else {
        return Err(WorkspaceError::CommitNotFound(commit_id.to_string()));
    };
    let parent = match git.probe(["rev-parse", "--verify", "-q", &format!("{commit}^1")])? {
        Some(parent) => parent,
        None => git.run(["hash-object", "-t", "tree", "/dev/null"])?.trim().to_string(),
    };
    let text = git.run(["diff", "--no-color", "--no-ext-diff", "--no-renames", &parent, &commit])?;
    let stats = parse_diff_stats(&text);
    Ok(CommitDiff { commit_id: commit, text, stats })
}

/// Per-file line counts from a unified diff, walking hunks by their declared
/// lengths so content lines that look like headers are counted correctly.
pub fn parse_diff_stats(diff: &str) -> DiffStats {
    let mut files: Vec<FileStat> = Vec::new();
    let mut old_left = 0u64;
    let mut new_left = 0u64;
    for line in diff.lines() {
        if old_left > 0 || new_left > 0 {
            let Some(file) = files.last_mut() else { break };
            match line.as_bytes().first() {
                Some(b'+') => {
                    file.insertions += 1;
                    new_left = new_left.saturating_sub(1);
                }
                Some(b'-') => {
                    file.deletions += 1;
                    old_left = old_left.saturating_sub(1);
                }
                Some(b'\\') => {}
                _ => {
                    old_left = old_left.saturating_sub(1);
                    new_left = new_left.saturating_sub(1);
                }
            }
            continue;
        }
        if let Some(rest) = line.strip_prefix("diff --git ") {
            let path = rest.rfind(" b/").map(|i| &rest[i + 3..]).unwrap_or(rest);
            files.push(FileStat { path: path.to_string(), insertions: 0, deletions: 0 });
        } else if line.starts_with("@@ ") {
            if let Some((old, new)) = parse_hunk_header(line) {
                old_left = old;
                new_left = new;
            }
        }
    }
    DiffStats { files }
}

fn parse_hunk_header(line: &str) -> Option<(u64, u64)> {
    let mut parts = line.split(' ');
    parts.next()?;
    let old = parts.next()?.strip_prefix('-')?;
    let new = parts.next()?.strip_prefix('+')?;
    let length = |range: &str| -> Option<u64> {
        match range.split_once(',') {
            Some((_, n)) => n.parse().ok(),
            None => Some(1),
        }
    };
    Some((length(old)?, length(new)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_walk_hunks() {
        let diff = "\
diff --git a/a.txt b/a.txt
new file mode 100644
index 0000000..e69de29
--- /dev/null
+++ b/a.txt
@@ -0,0 +1,3 @@
+one
+++two
+three
diff --git a/b.txt b/b.txt
index 1..2 100644
--- a/b.txt
+++ b/b.txt
@@ -1,3 +1,2 @@
 keep
--- gone
-also gone
+new
\\ No newline at end of file
";
        let stats = parse_diff_stats(diff);
        assert_eq!(stats.files_changed(), 2);
        assert_eq!(stats.files[0], FileStat { path: "a.txt".into(), insertions: 3, deletions: 0 });
        assert_eq!(stats.files[1], FileStat { path: "b.txt".into(), insertions: 1, deletions: 2 });
    }

    #[test]
    fn binary_files_count_without_lines() {
        let diff = "diff --git a/x.bin b/x.bin\nnew file mode 100644\nBinary files /dev/null and b/x.bin differ\n";
        let stats = parse_diff_stats(diff);
        assert_eq!((stats.files_changed(), stats.insertions(), stats.deletions()), (1, 0, 0));
    }

    #[test]
    fn hunk_header_lengths() {
        assert_eq!(parse_hunk_header("@@ -0,0 +1 @@"), Some((0, 1)));
        assert_eq!(parse_hunk_header("@@ -3,7 +3,9 @@ fn main"), Some((7, 9)));
    }

    #[test]
    fn ignore_file_becomes_exclusions() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(IGNORE_FILE), "# comment\ntarget/\n/build\n\nlogs/*.log\n").unwrap();
        let specs = ignore_pathspecs(dir.path());
        assert!(specs.contains(&":(exclude,glob)**/target/**".to_string()));
        assert!(specs.contains(&":(exclude,glob)build/**".to_string()));
        assert!(!specs.contains(&":(exclude,glob)**/build".to_string()));
        assert!(specs.contains(&":(exclude,glob)logs/*.log".to_string()));
    }

    #[test]
    fn rejects_missing_and_metadata_paths() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope");
        assert!(matches!(open_session(&missing, "r", true), Err(WorkspaceError::Invalid(_))));
        let meta = dir.path().join(".git").join("objects");
        std::fs::create_dir_all(&meta).unwrap();
        assert!(matches!(open_session(&meta, "r", true), Err(WorkspaceError::Invalid(_))));
    }

    #[test]
    fn unknown_commit_is_not_found() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(get_diff(dir.path(), "deadbeef"), Err(WorkspaceError::CommitNotFound(_))));
        assert!(matches!(get_diff(dir.path(), "--help"), Err(WorkspaceError::CommitNotFound(_))));
    }
}
