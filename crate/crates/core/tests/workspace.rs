//! Workspace tracker against real repositories, checked with plain git.

use std::fs;
use std::path::Path;
use std::process::Command;

use agentstepper_core::summarizer::Summarizer;
use agentstepper_core::workspace::{get_diff, open_session, WorkspaceError};

fn git(dir: &Path, args: &[&str]) -> String {
    let output = Command::new("git")
        .current_dir(dir)
        .args(["-c", "user.name=t", "-c", "user.email=t@t", "-c", "commit.gpgsign=false"])
        .args(args)
        .env_remove("GIT_DIR")
        .env_remove("GIT_WORK_TREE")
        .output()
        .unwrap();
    assert!(output.status.success(), "git {args:?}: {}", String::from_utf8_lossy(&output.stderr));
    String::from_utf8(output.stdout).unwrap().trim().to_string()
}

fn fixture_repo(dir: &Path) {
    git(dir, &["init", "-q", "-b", "main"]);
    fs::write(dir.join("README.md"), "# project\nline two\n").unwrap();
    fs::write(dir.join("lib.rs"), "fn a() {}\nfn b() {}\nfn c() {}\n").unwrap();
    git(dir, &["add", "-A"]);
    git(dir, &["commit", "-q", "-m", "initial"]);
}

/// (files, insertions, deletions) from `git show --numstat`.
fn numstat(dir: &Path, commit: &str) -> (u64, u64, u64) {
    let out = git(dir, &["show", "--numstat", "--no-renames", "--format=", commit]);
    out.lines().filter(|l| !l.is_empty()).fold((0, 0, 0), |(f, i, d), line| {
        let mut parts = line.split('\t');
        let ins = parts.next().unwrap().parse().unwrap_or(0);
        let del = parts.next().unwrap().parse().unwrap_or(0);
        (f + 1, i + ins, d + del)
    })
}

fn commit_count(dir: &Path, rev: &str) -> usize {
    git(dir, &["rev-list", "--count", rev]).parse().unwrap()
}

#[test]
fn empty_directory_gets_baseline_on_run_branch() {
    let dir = tempfile::tempdir().unwrap();
    let session = open_session(dir.path(), "r1", true).unwrap();
    assert_eq!(session.run_branch, "agentstepper/run-r1");
    assert_eq!(git(dir.path(), &["symbolic-ref", "--short", "HEAD"]), "agentstepper/run-r1");
    assert_eq!(commit_count(dir.path(), "HEAD"), 1);
    let diff = get_diff(dir.path(), &session.baseline_commit).unwrap();
    assert!(diff.text.is_empty());
    assert_eq!(diff.stats.files_changed(), 0);
}

#[test]
fn clean_repository_branches_from_original_head() {
    let dir = tempfile::tempdir().unwrap();
    fixture_repo(dir.path());
    let main_head = git(dir.path(), &["rev-parse", "main"]);
    let session = open_session(dir.path(), "r1", true).unwrap();
    assert_eq!(session.original_branch, "main");
    assert_eq!(session.baseline_commit, main_head);
    assert_eq!(git(dir.path(), &["rev-parse", "agentstepper/run-r1"]), main_head);
}

#[test]
fn uncommitted_changes_go_to_baseline_not_original() {
    let dir = tempfile::tempdir().unwrap();
    fixture_repo(dir.path());
    let main_head = git(dir.path(), &["rev-parse", "main"]);
    fs::write(dir.path().join("lib.rs"), "fn a() {}\n").unwrap();
    fs::write(dir.path().join("notes.txt"), "wip\n").unwrap();
    let session = open_session(dir.path(), "r1", true).unwrap();
    assert_ne!(session.baseline_commit, main_head);
    assert_eq!(git(dir.path(), &["rev-parse", "main"]), main_head);
    assert_eq!(git(dir.path(), &["rev-parse", &format!("{}^", session.baseline_commit)]), main_head);
    assert_eq!(git(dir.path(), &["status", "--porcelain"]), "");
}

#[test]
fn commit_changes_reports_stats_matching_git() {
    let dir = tempfile::tempdir().unwrap();
    fixture_repo(dir.path());
    let summarizer = Summarizer::default();
    let session = open_session(dir.path(), "r1", true).unwrap();

    let outcome = session.commit_changes(None, None, 3, &summarizer).unwrap();
    assert!(!outcome.committed);
    assert!(outcome.record.is_none());

    fs::write(dir.path().join("new.txt"), "one\ntwo\nthree\n").unwrap();
    let outcome = session.commit_changes(None, None, 3, &summarizer).unwrap();
    let record = outcome.record.unwrap();
    assert!(outcome.committed);
    assert_eq!((record.files_changed, record.insertions, record.deletions), (1, 3, 0));
    assert_eq!(numstat(dir.path(), &record.commit_id), (1, 3, 0));
    assert_eq!(record.triggering_event_id, 3);
    assert!(record.message_summary.starts_with("Changes 1 file(s)"), "{}", record.message_summary);
    assert_eq!(git(dir.path(), &["log", "-1", "--format=%s", &record.commit_id]), record.message_summary);

    // modify, delete and add in one commit
    fs::write(dir.path().join("lib.rs"), "fn a() {}\nfn b2() {}\nfn c() {}\nfn d() {}\n").unwrap();
    fs::remove_file(dir.path().join("README.md")).unwrap();
    fs::create_dir(dir.path().join("src")).unwrap();
    fs::write(dir.path().join("src/x.rs"), "+++ not a header\n--- nor this\n").unwrap();
    let record = session.commit_changes(None, None, 7, &summarizer).unwrap().record.unwrap();
    let expected = numstat(dir.path(), &record.commit_id);
    assert_eq!((record.files_changed, record.insertions, record.deletions), expected);
    assert_eq!(expected, (3, 4, 3));
    let diff = get_diff(dir.path(), &record.commit_id).unwrap();
    assert_eq!((diff.stats.files_changed(), diff.stats.insertions(), diff.stats.deletions()), expected);
}

#[test]
fn explicit_summary_is_first_line() {
    let dir = tempfile::tempdir().unwrap();
    let session = open_session(dir.path(), "r1", true).unwrap();
    fs::write(dir.path().join("patch.diff"), "x\n").unwrap();
    let record = session
        .commit_changes(Some("apply candidate patch 2"), Some("second attempt\nmore"), 0, &Summarizer::default())
        .unwrap()
        .record
        .unwrap();
    assert_eq!(record.message_summary, "apply candidate patch 2");
    let message = git(dir.path(), &["log", "-1", "--format=%B", &record.commit_id]);
    assert_eq!(message, "apply candidate patch 2\n\nsecond attempt\nmore");
}

#[test]
fn close_without_commits_returns_to_original() {
    let dir = tempfile::tempdir().unwrap();
    fixture_repo(dir.path());
    let session = open_session(dir.path(), "r1", true).unwrap();
    let baseline = session.baseline_commit.clone();
    assert!(session.close(None, &Summarizer::default()).unwrap().is_none());
    assert_eq!(git(dir.path(), &["symbolic-ref", "--short", "HEAD"]), "main");
    assert_eq!(git(dir.path(), &["rev-parse", "agentstepper/run-r1"]), baseline);
}

#[test]
fn close_after_three_commits_keeps_history_and_original() {
    let dir = tempfile::tempdir().unwrap();
    fixture_repo(dir.path());
    let main_head = git(dir.path(), &["rev-parse", "main"]);
    let summarizer = Summarizer::default();
    let session = open_session(dir.path(), "r1", true).unwrap();
    for i in 0..3 {
        fs::write(dir.path().join(format!("f{i}.txt")), "x\n").unwrap();
        assert!(session.commit_changes(None, None, i, &summarizer).unwrap().committed);
    }
    session.close(Some(11), &summarizer).unwrap();
    assert_eq!(git(dir.path(), &["symbolic-ref", "--short", "HEAD"]), "main");
    assert_eq!(git(dir.path(), &["rev-parse", "main"]), main_head);
    assert_eq!(commit_count(dir.path(), "main..agentstepper/run-r1"), 3);
    assert!(!dir.path().join("f0.txt").exists());
}

#[test]
fn dirty_tree_at_close_is_committed_first() {
    let dir = tempfile::tempdir().unwrap();
    fixture_repo(dir.path());
    let session = open_session(dir.path(), "r1", true).unwrap();
    fs::write(dir.path().join("late.txt"), "late\n").unwrap();
    let record = session.close(Some(4), &Summarizer::default()).unwrap().unwrap();
    assert_eq!(record.triggering_event_id, 4);
    assert_eq!(git(dir.path(), &["rev-parse", "agentstepper/run-r1"]), record.commit_id);
    assert_eq!(git(dir.path(), &["symbolic-ref", "--short", "HEAD"]), "main");
}

#[test]
fn consecutive_runs_get_distinct_branches() {
    let dir = tempfile::tempdir().unwrap();
    fixture_repo(dir.path());
    let summarizer = Summarizer::default();
    for run in ["a", "b"] {
        let session = open_session(dir.path(), run, true).unwrap();
        fs::write(dir.path().join(format!("{run}.txt")), "x\n").unwrap();
        session.commit_changes(None, None, 0, &summarizer).unwrap();
        session.close(Some(0), &summarizer).unwrap();
    }
    let branches = git(dir.path(), &["branch", "--format=%(refname:short)"]);
    assert!(branches.contains("agentstepper/run-a"));
    assert!(branches.contains("agentstepper/run-b"));
    // a stale branch with the same run id gets a suffix
    let session = open_session(dir.path(), "a", true).unwrap();
    assert_eq!(session.run_branch, "agentstepper/run-a-2");
}

#[test]
fn diff_shows_added_line() {
    let dir = tempfile::tempdir().unwrap();
    let session = open_session(dir.path(), "r1", true).unwrap();
    fs::write(dir.path().join("a.txt"), "hello\n").unwrap();
    let record = session.commit_changes(None, None, 0, &Summarizer::default()).unwrap().record.unwrap();
    let diff = session.diff(&record.commit_id).unwrap();
    assert!(diff.text.contains("diff --git a/a.txt b/a.txt"));
    assert!(diff.text.lines().any(|l| l == "+hello"));
    assert!(matches!(session.diff("0123abcd"), Err(WorkspaceError::CommitNotFound(_))));
}

#[test]
fn ignore_file_excludes_paths_and_gitignore_is_honored() {
    let dir = tempfile::tempdir().unwrap();
    fixture_repo(dir.path());
    fs::write(dir.path().join(".agentstepperignore"), "scratch/\n").unwrap();
    fs::write(dir.path().join(".gitignore"), "*.log\n").unwrap();
    let session = open_session(dir.path(), "r1", true).unwrap();
    fs::create_dir(dir.path().join("scratch")).unwrap();
    fs::write(dir.path().join("scratch/tmp.txt"), "x\n").unwrap();
    fs::write(dir.path().join("run.log"), "x\n").unwrap();
    let outcome = session.commit_changes(None, None, 0, &Summarizer::default()).unwrap();
    assert!(!outcome.committed);
    fs::write(dir.path().join("kept.txt"), "x\n").unwrap();
    let record = session.commit_changes(None, None, 0, &Summarizer::default()).unwrap().record.unwrap();
    assert_eq!(record.files_changed, 1);
}

#[test]
fn detached_head_is_restored() {
    let dir = tempfile::tempdir().unwrap();
    fixture_repo(dir.path());
    let head = git(dir.path(), &["rev-parse", "HEAD"]);
    git(dir.path(), &["checkout", "-q", "--detach", "HEAD"]);
    let session = open_session(dir.path(), "r1", true).unwrap();
    assert_eq!(session.original_branch, head);
    session.close(None, &Summarizer::default()).unwrap();
    assert_eq!(git(dir.path(), &["rev-parse", "HEAD"]), head);
}
