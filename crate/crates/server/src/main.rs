use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use agentstepper_core::model::ControlState;
use agentstepper_core::summarizer::SummarizerConfig;
use agentstepper_server::{ImportError, RunStore, Server, ServerConfig, StoreError};
use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "agentstepper", version, about = "Debug server for LLM agents")]
struct Cli {
    /// Directory holding recorded runs.
    #[arg(long, global = true, env = "AGENTSTEPPER_DATA_DIR", default_value = "agentstepper-data")]
    data_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the debug server.
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        address: String,
        #[arg(long, default_value_t = agentstepper_server::config::DEFAULT_PORT, value_parser = clap::value_parser!(u16).range(1..))]
        port: u16,
        /// Do not commit workspace changes after tool invocations.
        #[arg(long)]
        no_auto_commit: bool,
        #[arg(long, value_enum, default_value_t = SummarizerChoice::Fallback)]
        summarizer: SummarizerChoice,
        /// Chat-completion endpoint for the llm summarizer.
        #[arg(long)]
        llm_endpoint: Option<String>,
        #[arg(long, default_value = "gpt-4o-mini")]
        llm_model: String,
        /// Release a hold with continue after this many seconds.
        #[arg(long)]
        hold_timeout: Option<f64>,
        #[arg(long, value_enum, default_value_t = InitialState::Running)]
        initial_state: InitialState,
        /// Web UI build to serve.
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
    /// Import an exported trajectory for post-hoc inspection.
    Import { file: PathBuf },
    /// Write a run's trajectory document.
    Export {
        run_id: String,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// List recorded runs.
    List,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SummarizerChoice {
    Llm,
    Fallback,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InitialState {
    Running,
    Stepping,
    Paused,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Serve {
            address,
            port,
            no_auto_commit,
            summarizer,
            llm_endpoint,
            llm_model,
            hold_timeout,
            initial_state,
            static_dir,
        } => {
            let hold_timeout = hold_timeout
                .map(|secs| Duration::try_from_secs_f64(secs).context("--hold-timeout must be a non-negative number"))
                .transpose()?;
            let config = ServerConfig {
                address,
                port,
                auto_commit: !no_auto_commit,
                summarizer: SummarizerConfig {
                    strategy: match summarizer {
                        SummarizerChoice::Llm => "llm".into(),
                        SummarizerChoice::Fallback => "fallback".into(),
                    },
                    endpoint: llm_endpoint,
                    model: llm_model,
                    ..SummarizerConfig::default()
                }
                .with_env_key(),
                hold_timeout,
                initial_state: match initial_state {
                    InitialState::Running => ControlState::Running,
                    InitialState::Stepping => ControlState::Stepping,
                    InitialState::Paused => ControlState::Paused,
                },
                static_dir,
                ..ServerConfig::new(cli.data_dir)
            };
            let server = Server::bind(config)?;
            println!("agentstepper listening on http://{}", server.local_addr());
            std::io::stdout().flush()?;
            server.run();
            Ok(())
        }
        Command::Import { file } => {
            let document = fs::read(&file).with_context(|| format!("reading {}", file.display()))?;
            let store = RunStore::open(&cli.data_dir)?;
            let trajectory = agentstepper_core::Trajectory::deserialize(&document)
                .map_err(ImportError::from)
                .with_context(|| format!("importing {}", file.display()))?;
            match store.import(&trajectory) {
                Err(StoreError::Exists(id)) => anyhow::bail!("run {id} already exists"),
                other => other?,
            }
            println!("{}", trajectory.run_id());
            Ok(())
        }
        Command::Export { run_id, output } => {
            let store = RunStore::open(&cli.data_dir)?;
            let document = store.load(&run_id)?.serialize();
            match output {
                Some(path) => fs::write(&path, &document).with_context(|| format!("writing {}", path.display()))?,
                None => std::io::stdout().write_all(&document)?,
            }
            Ok(())
        }
        Command::List => {
            let store = RunStore::open(&cli.data_dir)?;
            let runs = store.scan();
            let mut out = std::io::stdout().lock();
            for trajectory in runs {
                let run = &trajectory.run;
                writeln!(
                    out,
                    "{}\t{}\t{}\t{} events\t{}",
                    run.run_id,
                    run.status.as_str(),
                    run.started_at,
                    run.event_count,
                    run.agent_name
                )?;
            }
            Ok(())
        }
    }
}
