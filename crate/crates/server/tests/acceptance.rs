//! Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero if any
//! criterion fails.

use std::fs;
use std::io::{BufRead, BufReader};
use std::net::TcpListener;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use agentstepper_core::model::{ControlState, EventKind, RunStatus, SummaryOrigin, Trajectory};
use agentstepper_core::protocol::ControlCommand;
use agentstepper_server::{Server, ServerConfig, ServerHandle};
use agentstepper_sim::{http_get, run_script, AgentScript, Debugger, ToolCall, UiClient};
use serde_json::{json, Value};
use similar::{ChangeTag, TextDiff};
use tempfile::TempDir;

const WAIT: Duration = Duration::from_secs(10);

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! check {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("integration effort", integration_effort),
        ("unedited round trip", unedited_round_trip),
        ("edit round trip", edit_round_trip),
        ("state machine", state_machine),
        ("commit per tool invocation", commit_per_tool_invocation),
        ("trajectory round trip", trajectory_round_trip),
        ("fallback summaries", fallback_summaries),
        ("crash resilience", crash_resilience),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, criterion) in criteria {
        let started = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(criterion))
            .unwrap_or_else(|payload| Err(format!("panicked: {}", panic_message(&*payload))));
        let elapsed = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name:<28} {detail} ({elapsed:.2}s)"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name:<28} {detail} ({elapsed:.2}s)");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn panic_message(payload: &(dyn std::any::Any + Send)) -> String {
    payload
        .downcast_ref::<String>()
        .cloned()
        .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_default()
}

struct Fixture {
    _data: TempDir,
    server: ServerHandle,
    address: String,
}

fn start(initial_state: ControlState) -> Fixture {
    let data = tempfile::tempdir().unwrap();
    let mut config = ServerConfig::for_tests(data.path());
    config.initial_state = initial_state;
    let server = Server::bind(config).unwrap().spawn();
    let address = server.addr().to_string();
    Fixture { _data: data, server, address }
}

fn within(limit: Duration, started: Instant) -> Result<(), String> {
    let elapsed = started.elapsed();
    if elapsed < limit {
        Ok(())
    } else {
        Err(format!("took {:.2}s, limit {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64()))
    }
}

fn wait_for_live_run(fx: &Fixture) -> String {
    let deadline = Instant::now() + WAIT;
    loop {
        if let Some(run) = fx.server.hub().run_list().into_iter().find(|r| r.status == RunStatus::Live) {
            return run.run_id;
        }
        assert!(Instant::now() < deadline, "no live run appeared");
        std::thread::sleep(Duration::from_millis(2));
    }
}

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

// ---- criteria ----

const API_CALLS: [&str; 7] = [
    "Debugger::with_session(",
    ".begin_llm_query_breakpoint(",
    ".end_llm_query_breakpoint(",
    ".begin_tool_invocation_breakpoint(",
    ".end_tool_invocation_breakpoint(",
    ".commit_agent_changes(",
    ".post_debug_message(",
];

fn integration_effort() -> Outcome {
    let started = Instant::now();
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../sim/src/reference");
    let plain = fs::read_to_string(dir.join("plain.rs")).unwrap();
    let instrumented = fs::read_to_string(dir.join("instrumented.rs")).unwrap();

    let sites: usize = API_CALLS.iter().map(|call| instrumented.matches(call).count()).sum();
    let each_once = API_CALLS.iter().all(|call| instrumented.matches(call).count() == 1);
    let in_plain: usize = API_CALLS.iter().map(|call| plain.matches(call).count()).sum();
    let debugger_uses = instrumented.matches("debugger.").count() + instrumented.matches("Debugger::").count();
    check!(sites == 7 && each_once, "{sites} call sites, expected 7 distinct");
    check!(debugger_uses == 7, "{debugger_uses} uses of the debugger, expected 7");
    check!(in_plain == 0, "uninstrumented variant calls the API {in_plain} times");

    let diff = TextDiff::from_lines(&plain, &instrumented);
    let changed = diff.iter_all_changes().filter(|c| c.tag() != ChangeTag::Equal).count();
    check!(changed <= 42, "{changed} changed lines, limit 42");
    within(Duration::from_secs(1), started)?;
    Ok(format!("7 call sites, {changed} changed lines"))
}

fn unedited_round_trip() -> Outcome {
    let fx = start(ControlState::Running);
    let sandbox = tempfile::tempdir().unwrap();
    let started = Instant::now();
    let report = run_script(&AgentScript::writing("round-trip", 10), &fx.address, sandbox.path()).unwrap();
    within(Duration::from_secs(5), started)?;
    let mut compared = 0;
    for call in report.breakpoint_calls() {
        let sent = serde_json::to_vec(&call.sent).unwrap();
        let received = serde_json::to_vec(&call.received).unwrap();
        check!(sent == received, "cycle {} {:?}: payload changed", call.cycle, call.call);
        check!(call.tool_sent == call.tool_received, "cycle {}: tool name changed", call.cycle);
        compared += 1;
    }
    check!(compared == 40, "{compared} comparisons, expected 40");
    Ok(format!("{compared}/40 byte-identical"))
}

fn edit_round_trip() -> Outcome {
    let fx = start(ControlState::Stepping);
    let sandbox = tempfile::tempdir().unwrap();
    let mut script = AgentScript::writing("editor", 3);
    script.cycles[1].tool = ToolCall::write_file("a.txt", "hello\n");
    let original = script.cycles[1].tool.args.clone();
    let edited = json!({"path": "b.txt", "contents": "hello\n"});

    let started = Instant::now();
    let address = fx.address.clone();
    let path = sandbox.path().to_path_buf();
    let agent = std::thread::spawn(move || run_script(&script, &address, &path));
    let run_id = wait_for_live_run(&fx);
    let mut ui = UiClient::connect(&fx.address).unwrap();
    ui.subscribe(&run_id).unwrap();

    // step to the second cycle's tool invocation, edit it, then continue
    let hub = fx.server.hub().clone();
    let mut last_held = None;
    loop {
        let state =
            ui.wait_state(&run_id, WAIT, |s| s.held_event_id.is_some() && s.held_event_id != last_held).unwrap();
        let held = state.and_then(|s| s.held_event_id).ok_or("no hold at the target event")?;
        last_held = Some(held);
        let event = hub.trajectory(&run_id).unwrap().event(held).unwrap().clone();
        if event.kind == EventKind::ToolInvocation && event.cycle_index == 1 {
            ui.edit(&run_id, held, edited.clone(), None).unwrap();
            ui.control(&run_id, ControlCommand::Continue).unwrap();
            break;
        }
        ui.control(&run_id, ControlCommand::Step).unwrap();
    }
    let report = agent.join().unwrap().unwrap();
    within(Duration::from_secs(5), started)?;

    let call = report.calls.iter().find(|c| c.cycle == 1 && c.tool_sent.is_some()).unwrap();
    check!(call.edited && call.received == edited, "agent continued with {}", call.received);
    let trajectory = report.trajectory().ok_or("no trajectory")?;
    let invocation =
        trajectory.events.iter().find(|e| e.kind == EventKind::ToolInvocation && e.cycle_index == 1).unwrap();
    check!(invocation.edited, "invocation not marked edited");
    check!(invocation.body == edited, "recorded body {}", invocation.body);
    check!(invocation.original_body.as_ref() == Some(&original), "original body not preserved");
    let result = &trajectory.events[invocation.event_id as usize + 1];
    let commit = result.commit_id.as_deref().ok_or("edited write was not committed")?;
    let diff = fx.server.hub().diff(&run_id, commit).unwrap();
    let files: Vec<&str> = diff.stats.files.iter().map(|f| f.path.as_str()).collect();
    check!(files == ["b.txt"], "edited action changed {files:?}");
    let head = git(sandbox.path(), &["ls-tree", "--name-only", &trajectory.run.run_branch.clone().unwrap()]);
    check!(head.lines().any(|l| l == "b.txt") && !head.lines().any(|l| l == "a.txt"), "run branch holds {head:?}");
    Ok("sandbox wrote b.txt, edited=true, original preserved".into())
}

fn state_machine() -> Outcome {
    // (a) running: no holds
    let fx = start(ControlState::Running);
    let sandbox = tempfile::tempdir().unwrap();
    let report = run_script(&AgentScript::idle("running", 10), &fx.address, sandbox.path()).unwrap();
    let held = report.trajectory().unwrap().events.iter().filter(|e| e.held).count();
    check!(held == 0, "running mode held {held} events");

    // (b) stepping: one resume command per event
    let fx = start(ControlState::Stepping);
    let sandbox = tempfile::tempdir().unwrap();
    let address = fx.address.clone();
    let path = sandbox.path().to_path_buf();
    let agent = std::thread::spawn(move || run_script(&AgentScript::idle("stepping", 10), &address, &path));
    let run_id = wait_for_live_run(&fx);
    let mut ui = UiClient::connect(&fx.address).unwrap();
    ui.subscribe(&run_id).unwrap();
    let resumes = ui.steer(&run_id, WAIT, |_, _| Ok(())).unwrap();
    let report = agent.join().unwrap().unwrap();
    let held = report.trajectory().unwrap().events.iter().filter(|e| e.held).count();
    check!(resumes == 40 && held == 40, "stepping mode: {resumes} resumes, {held} holds");

    // (c) pause while running takes effect at the next event
    let fx = start(ControlState::Running);
    let mut agent = Debugger::connect_to(&fx.address, "paused", None).unwrap();
    agent.begin_llm_query_breakpoint(json!("p")).unwrap();
    agent.end_llm_query_breakpoint(json!("r")).unwrap();
    let run_id = agent.run_id().to_string();
    let mut ui = UiClient::connect(&fx.address).unwrap();
    ui.subscribe(&run_id).unwrap();
    ui.control(&run_id, ControlCommand::Pause).unwrap();
    let armed = ui.wait_state(&run_id, WAIT, |s| s.pause_armed).unwrap();
    check!(armed.is_some_and(|s| s.held_event_id.is_none()), "pause did not arm");
    let invocation = std::thread::spawn(move || {
        let continued = agent.begin_tool_invocation_breakpoint("noop", json!({})).unwrap();
        (agent, continued)
    });
    let hold = ui.wait_state(&run_id, WAIT, |s| s.held_event_id.is_some()).unwrap();
    let held_at = hold.as_ref().and_then(|s| s.held_event_id);
    let state = hold.and_then(|s| s.state);
    check!(held_at == Some(2), "held at {held_at:?}, expected the next event (2)");
    check!(state == Some(ControlState::Paused), "state {state:?} at the hold");
    ui.control(&run_id, ControlCommand::Continue).unwrap();
    let (agent, _) = invocation.join().unwrap();
    agent.close().unwrap();
    Ok("running 0 holds, stepping 40 resumes, pause held event 2".into())
}

/// (files, insertions, deletions) per `git show --numstat`.
fn numstat(dir: &Path, commit: &str) -> (u64, u64, u64) {
    git(dir, &["show", "--numstat", "--no-renames", "--format=", commit]).lines().filter(|l| !l.is_empty()).fold(
        (0, 0, 0),
        |(f, i, d), line| {
            let mut parts = line.split('\t');
            let ins: u64 = parts.next().unwrap().parse().unwrap_or(0);
            let del: u64 = parts.next().unwrap().parse().unwrap_or(0);
            (f + 1, i + ins, d + del)
        },
    )
}

fn commit_per_tool_invocation() -> Outcome {
    let fx = start(ControlState::Running);
    let sandbox = tempfile::tempdir().unwrap();
    let dir = sandbox.path();
    git(dir, &["init", "-q", "-b", "main"]);
    fs::write(dir.join("notes.txt"), "one\ntwo\nthree\n").unwrap();
    fs::write(dir.join("old.txt"), "stale\nlines\n").unwrap();
    git(dir, &["add", "-A"]);
    git(dir, &["commit", "-q", "-m", "initial"]);
    let original_head = git(dir, &["rev-parse", "main"]);

    let mut script = AgentScript::idle("committer", 5);
    script.cycles[0].tool = ToolCall::write_file("src/new.txt", "alpha\nbeta\n");
    script.cycles[2].tool = ToolCall::append_file("notes.txt", "four");
    script.cycles[4].tool = ToolCall::delete_file("old.txt");
    let report = run_script(&script, &fx.address, dir).unwrap();
    let trajectory = report.trajectory().ok_or("no trajectory")?;
    let run_branch = format!("agentstepper/run-{}", report.run_id);

    let commits: Vec<_> = trajectory.commits().cloned().collect();
    check!(commits.len() == 3, "{} commits recorded, expected 3", commits.len());
    let on_branch: usize = git(dir, &["rev-list", "--count", &format!("main..{run_branch}")]).parse().unwrap();
    check!(on_branch == 3, "{on_branch} commits on {run_branch}, expected 3");
    check!(git(dir, &["rev-parse", "main"]) == original_head, "original branch head moved");
    let head = git(dir, &["symbolic-ref", "--short", "HEAD"]);
    check!(head == "main", "HEAD on {head} after goodbye");
    for commit in &commits {
        let expected = numstat(dir, &commit.commit_id);
        let recorded = (commit.files_changed, commit.insertions, commit.deletions);
        check!(recorded == expected, "{}: recorded {recorded:?}, git {expected:?}", commit.commit_id);
        let diff = fx.server.hub().diff(&report.run_id, &commit.commit_id).unwrap();
        let served = diff.stats.files.iter().fold((0, 0, 0), |(f, i, d), s| (f + 1, i + s.insertions, d + s.deletions));
        check!(served == expected, "{}: diff stats {served:?}, git {expected:?}", commit.commit_id);
    }
    Ok(format!("3 commits on {run_branch}, stats match git numstat"))
}

fn trajectory_round_trip() -> Outcome {
    let source = start(ControlState::Running);
    let sandbox = tempfile::tempdir().unwrap();
    let mut script = AgentScript::writing("exported", 3);
    script.cycles[1].debug_message = Some("halfway".into());
    script.cycles[2].commit = Some(Default::default());
    let report = run_script(&script, &source.address, sandbox.path()).unwrap();
    let first = source.server.hub().export(&report.run_id).unwrap();

    let target = start(ControlState::Running);
    target.server.hub().import_document(&first).map_err(|e| e.to_string())?;
    let second = target.server.hub().export(&report.run_id).unwrap();
    check!(first == second, "re-export differs from the original document");

    let lines = first.split(|b| *b == b'\n').filter(|l| !l.is_empty()).count();
    let cut = &first[..first.len() - 20];
    let error = match Trajectory::deserialize(cut) {
        Ok(_) => return Err("truncated document imported".into()),
        Err(e) => e.to_string(),
    };
    check!(error.contains(&format!("line {lines}")), "truncated import error lacks line {lines}: {error}");
    let via_hub = target.server.hub().import_document(cut).map(|_| ()).map_err(|e| e.to_string()).unwrap_err();
    check!(via_hub.contains("line "), "hub import error lacks a line number: {via_hub}");
    Ok(format!("{} bytes identical, truncation reported: {error}", first.len()))
}

fn fallback_summaries() -> Outcome {
    check!(std::env::var_os("AGENTSTEPPER_LLM_KEY").is_none(), "an LLM key is set in the environment");
    let fx = start(ControlState::Running);
    let sandbox = tempfile::tempdir().unwrap();
    let mut script = AgentScript::writing("summarized", 3);
    script.cycles[0].prompt = json!({"task": "write files", "constraints": ["small", "plain text"]});
    script.cycles[1].response = json!("x".repeat(1000));
    script.cycles[2].tool = ToolCall::fail("disk\nfull");
    script.cycles[2].debug_message = Some("multi\nline\nmessage".into());
    let report = run_script(&script, &fx.address, sandbox.path()).unwrap();
    let trajectory = report.trajectory().ok_or("no trajectory")?;
    check!(trajectory.run.status == RunStatus::Completed, "run is {:?}", trajectory.run.status);
    let mut longest = 0;
    for event in &trajectory.events {
        let summary = event.summary.as_ref().ok_or(format!("event {} has no summary", event.event_id))?;
        check!(
            summary.origin == SummaryOrigin::Fallback,
            "event {} summary origin {:?}",
            event.event_id,
            summary.origin
        );
        let text = &summary.text;
        check!(!text.trim().is_empty(), "event {} summary empty", event.event_id);
        check!(!text.contains('\n') && !text.contains('\r'), "event {} summary spans lines", event.event_id);
        check!(text.chars().count() <= 240, "event {} summary has {} chars", event.event_id, text.chars().count());
        longest = longest.max(text.chars().count());
    }
    Ok(format!("{} events summarized, longest {longest} chars", trajectory.events.len()))
}

struct ServerProcess {
    child: Child,
    address: String,
}

impl Drop for ServerProcess {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn spawn_server(data: &Path) -> ServerProcess {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut child = Command::new(env!("CARGO_BIN_EXE_agentstepper"))
        .args(["--data-dir", data.to_str().unwrap(), "serve", "--port", &port.to_string()])
        .env("RUST_LOG", "warn")
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    assert!(line.contains("listening on"), "unexpected startup output {line:?}");
    ServerProcess { child, address: format!("127.0.0.1:{port}") }
}

fn crash_resilience() -> Outcome {
    let data = tempfile::tempdir().unwrap();
    let data_dir: PathBuf = data.path().join("data");
    let mut server = spawn_server(&data_dir);

    let mut agent = Debugger::connect_to(&server.address, "doomed", None).unwrap();
    let run_id = agent.run_id().to_string();
    let mut sent = Vec::new();
    for cycle in 0..2 {
        let prompt = json!(format!("prompt {cycle}"));
        let response = json!({"text": format!("response {cycle}"), "n": cycle});
        let args = json!({"cycle": cycle});
        let output = json!(format!("output {cycle}"));
        agent.begin_llm_query_breakpoint(prompt.clone()).unwrap();
        agent.end_llm_query_breakpoint(response.clone()).unwrap();
        agent.begin_tool_invocation_breakpoint("noop", args.clone()).unwrap();
        agent.end_tool_invocation_breakpoint(output.clone()).unwrap();
        sent.extend([prompt, response, args, output]);
    }
    let pending = json!("prompt 2");
    agent.begin_llm_query_breakpoint(pending.clone()).unwrap();
    sent.push(pending);

    server.child.kill().unwrap();
    server.child.wait().unwrap();
    drop(agent);

    let restarted = spawn_server(&data_dir);
    let runs: Value =
        serde_json::from_str(&http_get(&restarted.address, "/api/runs").ok_or("run list unavailable")?).unwrap();
    let run = runs.as_array().unwrap().iter().find(|r| r["run_id"] == run_id).ok_or("run missing after restart")?;
    check!(run["status"] == "aborted", "run listed as {}", run["status"]);
    let document = http_get(&restarted.address, &format!("/api/runs/{run_id}/trajectory")).ok_or("no trajectory")?;
    let trajectory = Trajectory::parse_document(document.as_bytes()).map_err(|e| e.to_string())?;
    let bodies: Vec<Value> = trajectory.events.iter().map(|e| e.body.clone()).collect();
    check!(bodies == sent, "events after restart: {bodies:?}");
    Ok(format!("run aborted with {} events intact", bodies.len()))
}
