use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use agentstepper_sim::{record_and_replay, run_script, AgentScript, ScriptReport};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

/// Scripted agent for the agentstepper debug server.
#[derive(Parser)]
#[command(name = "agentstepper-sim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a script against a server.
    Run {
        script: PathBuf,
        /// Server as host:port.
        #[arg(long, default_value = "127.0.0.1:8765")]
        server: String,
        /// Directory the script's tools act on.
        #[arg(long)]
        sandbox: PathBuf,
        /// Write the report (calls and trajectory) as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Re-run a recorded report's script and compare trajectories.
    Replay {
        report: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8765")]
        server: String,
        #[arg(long)]
        sandbox: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("agentstepper-sim: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { script, server, sandbox, report } => {
            let text = fs::read_to_string(&script).with_context(|| format!("reading {}", script.display()))?;
            let script = AgentScript::from_json(&text).map_err(anyhow::Error::msg).context("invalid script")?;
            let result = run_script(&script, &server, &sandbox)?;
            let identical = result.identical_round_trips();
            let breakpoints = result.breakpoint_calls().count();
            println!(
                "run {}: {} calls, {identical}/{breakpoints} unedited round trips",
                result.run_id,
                result.calls.len()
            );
            if let Some(path) = report {
                fs::write(&path, serde_json::to_string_pretty(&result)?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            if let Some(reason) = &result.fatal {
                bail!("server ended the session: {reason}");
            }
            Ok(true)
        }
        Command::Replay { report, server, sandbox } => {
            let text = fs::read_to_string(&report).with_context(|| format!("reading {}", report.display()))?;
            let recorded: ScriptReport = serde_json::from_str(&text).context("invalid report")?;
            let (verdict, replay) = record_and_replay(&recorded, &server, &sandbox)?;
            println!("run {}: {verdict}", replay.run_id);
            Ok(verdict.is_identical())
        }
    }
}
