use std::path::PathBuf;
use std::time::Duration;

use agentstepper_core::model::ControlState;
use agentstepper_core::summarizer::SummarizerConfig;

pub const DEFAULT_PORT: u16 = 8765;

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub address: String,
    /// 0 asks the OS for a free port.
    pub port: u16,
    pub data_dir: PathBuf,
    pub auto_commit: bool,
    pub summarizer: SummarizerConfig,
    /// `None` holds forever.
    pub hold_timeout: Option<Duration>,
    /// Execution state of a new run before any control command.
    pub initial_state: ControlState,
    /// Directory with the web UI build; a minimal page is served without it.
    pub static_dir: Option<PathBuf>,
    pub summary_workers: usize,
}

impl ServerConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        ServerConfig {
            address: "127.0.0.1".into(),
            port: DEFAULT_PORT,
            data_dir: data_dir.into(),
            auto_commit: true,
            summarizer: SummarizerConfig::default(),
            hold_timeout: None,
            initial_state: ControlState::Running,
            static_dir: None,
            summary_workers: 2,
        }
    }

    /// Loopback, ephemeral port.
    pub fn for_tests(data_dir: impl Into<PathBuf>) -> Self {
        ServerConfig { port: 0, ..Self::new(data_dir) }
    }
}
