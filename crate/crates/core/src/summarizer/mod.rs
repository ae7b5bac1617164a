//! One-sentence summaries for events and commit messages for diffs.
//!
//! Strategies implement [`SummaryStrategy`] and are created by name through a
//! [`SummarizerRegistry`]. Two are built in: `fallback`, a deterministic
//! offline summarizer, and `llm`, which asks a chat-completion endpoint and
//! degrades to `fallback` on any failure. Whatever a strategy returns is
//! passed through [`enforce_limits`] so every summary is a non-empty single
//! line of at most 240 characters.

mod fallback;
mod llm;
pub mod render;
mod templates;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::model::{Body, EventKind, SummaryOrigin, SUMMARY_MAX_CHARS};

pub use fallback::FallbackSummarizer;
pub use llm::LlmSummarizer;
pub use render::render_event_for_summary;

pub const LLM_KEY_ENV: &str = "AGENTSTEPPER_LLM_KEY";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SummaryKind {
    LlmQuery,
    LlmResponse,
    ToolInvocation,
    ToolResult,
    DiffMessage,
}

impl SummaryKind {
    pub fn for_event(kind: EventKind) -> Option<SummaryKind> {
        match kind {
            EventKind::LlmQuery => Some(SummaryKind::LlmQuery),
            EventKind::LlmResponse => Some(SummaryKind::LlmResponse),
            EventKind::ToolInvocation => Some(SummaryKind::ToolInvocation),
            EventKind::ToolResult => Some(SummaryKind::ToolResult),
            EventKind::DebugMessage => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SummaryKind::LlmQuery => "llm_query",
            SummaryKind::LlmResponse => "llm_response",
            SummaryKind::ToolInvocation => "tool_invocation",
            SummaryKind::ToolResult => "tool_result",
            SummaryKind::DiffMessage => "diff_message",
        }
    }
}

impl fmt::Display for SummaryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToolContext {
    pub name: String,
    pub arg_keys: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SummaryRequest {
    pub kind: SummaryKind,
    /// Rendered current event, or the diff text for commit messages.
    pub current: String,
    /// Rendered preceding event of the same kind.
    pub previous: Option<String>,
    pub tool: Option<ToolContext>,
}

impl SummaryRequest {
    pub fn for_event(kind: SummaryKind, body: &Body, tool_name: Option<&str>, previous: Option<String>) -> Self {
        let event_kind = match kind {
            SummaryKind::LlmQuery => EventKind::LlmQuery,
            SummaryKind::LlmResponse => EventKind::LlmResponse,
            SummaryKind::ToolInvocation => EventKind::ToolInvocation,
            SummaryKind::ToolResult | SummaryKind::DiffMessage => EventKind::ToolResult,
        };
        let tool = (kind == SummaryKind::ToolInvocation).then(|| ToolContext {
            name: tool_name.unwrap_or_default().to_string(),
            arg_keys: render::argument_keys(body),
        });
        SummaryRequest { kind, current: render_event_for_summary(event_kind, body, tool_name), previous, tool }
    }

    pub fn for_diff(diff: impl Into<String>) -> Self {
        SummaryRequest { kind: SummaryKind::DiffMessage, current: diff.into(), previous: None, tool: None }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SummaryOutput {
    pub text: String,
    pub origin: SummaryOrigin,
}

pub trait SummaryStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    fn summarize(&self, request: &SummaryRequest) -> SummaryOutput;
}

#[derive(Clone, Debug)]
pub struct SummarizerConfig {
    pub strategy: String,
    pub endpoint: Option<String>,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retries: u32,
}

impl Default for SummarizerConfig {
    fn default() -> Self {
        SummarizerConfig {
            strategy: "fallback".into(),
            endpoint: None,
            model: "gpt-4o-mini".into(),
            api_key: None,
            timeout: Duration::from_secs(20),
            retries: 1,
        }
    }
}

impl SummarizerConfig {
    /// Reads the backend key from `AGENTSTEPPER_LLM_KEY`.
    pub fn with_env_key(mut self) -> Self {
        self.api_key = std::env::var(LLM_KEY_ENV).ok().filter(|k| !k.is_empty());
        self
    }
}

#[derive(Debug, Error)]
pub enum SummarizerError {
    #[error("unknown summarizer {name:?} (available: {available})")]
    Unknown { name: String, available: String },
    #[error("summarizer {name}: {message}")]
    Config { name: String, message: String },
}

type Factory = Box<dyn Fn(&SummarizerConfig) -> Result<Box<dyn SummaryStrategy>, SummarizerError> + Send + Sync>;

/// Named summarizer strategies.
pub struct SummarizerRegistry {
    factories: BTreeMap<String, Factory>,
}

impl SummarizerRegistry {
    pub fn empty() -> Self {
        SummarizerRegistry { factories: BTreeMap::new() }
    }

    pub fn builtin() -> Self {
        let mut registry = Self::empty();
        registry.register("fallback", |_| Ok(Box::new(FallbackSummarizer)));
        registry.register("llm", |config| {
            let strategy = LlmSummarizer::from_config(config)?;
            Ok(Box::new(strategy))
        });
        registry
    }

    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&SummarizerConfig) -> Result<Box<dyn SummaryStrategy>, SummarizerError> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn create(&self, config: &SummarizerConfig) -> Result<Summarizer, SummarizerError> {
        let factory = self.factories.get(&config.strategy).ok_or_else(|| SummarizerError::Unknown {
            name: config.strategy.clone(),
            available: self.names().join(", "),
        })?;
        Ok(Summarizer { strategy: Arc::from(factory(config)?) })
    }
}

impl Default for SummarizerRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

/// Cheaply clonable handle to the configured strategy.
#[derive(Clone)]
pub struct Summarizer {
    strategy: Arc<dyn SummaryStrategy>,
}

impl fmt::Debug for Summarizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Summarizer").field("strategy", &self.strategy.name()).finish()
    }
}

impl Default for Summarizer {
    fn default() -> Self {
        Summarizer::new(FallbackSummarizer)
    }
}

impl Summarizer {
    pub fn new(strategy: impl SummaryStrategy + 'static) -> Self {
        Summarizer { strategy: Arc::new(strategy) }
    }

    pub fn strategy_name(&self) -> &'static str {
        self.strategy.name()
    }

    /// Never fails; the result always satisfies the summary limits.
    pub fn summarize(&self, request: &SummaryRequest) -> SummaryOutput {
        let output = self.strategy.summarize(request);
        match enforce_limits(&output.text) {
            Some(text) => SummaryOutput { text, origin: output.origin },
            None => FallbackSummarizer.summarize(request),
        }
    }

    /// Debug messages are shown as written, clipped to the summary limits.
    pub fn summarize_debug_message(&self, text: &str) -> SummaryOutput {
        SummaryOutput {
            text: enforce_limits(text).unwrap_or_else(|| "(empty debug message)".to_string()),
            origin: SummaryOrigin::Fallback,
        }
    }
}

/// Collapses all whitespace runs (including line breaks) to single spaces
/// and clips to the summary length with a trailing ellipsis. Returns `None`
/// for blank input.
pub fn enforce_limits(text: &str) -> Option<String> {
    let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ");
    if collapsed.is_empty() {
        return None;
    }
    Some(clip(&collapsed, SUMMARY_MAX_CHARS))
}

/// Clips to at most `max` characters, marking truncation with `…`.
pub fn clip(text: &str, max: usize) -> String {
    if text.chars().count() <= max {
        return text.to_string();
    }
    let mut out: String = text.chars().take(max.saturating_sub(1)).collect();
    out.truncate(out.trim_end().len());
    out.push('…');
    out
}

/// Post-processes free-form model output: keeps the first sentence only.
pub fn first_sentence(text: &str) -> Option<String> {
    let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ");
    let collapsed = collapsed.trim_matches(|c| c == '"' || c == '`').trim();
    if collapsed.is_empty() {
        return None;
    }
    let mut end = collapsed.len();
    let bytes = collapsed.as_bytes();
    for (i, c) in collapsed.char_indices() {
        if matches!(c, '.' | '!' | '?') && bytes.get(i + 1) == Some(&b' ') {
            end = i + 1;
            break;
        }
    }
    enforce_limits(&collapsed[..end])
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn registry_lists_and_creates_builtins() {
        let registry = SummarizerRegistry::builtin();
        assert_eq!(registry.names(), vec!["fallback", "llm"]);
        let summarizer = registry.create(&SummarizerConfig::default()).unwrap();
        assert_eq!(summarizer.strategy_name(), "fallback");
    }

    #[test]
    fn unknown_strategy_names_alternatives() {
        let registry = SummarizerRegistry::builtin();
        let config = SummarizerConfig { strategy: "magic".into(), ..Default::default() };
        let err = registry.create(&config).unwrap_err();
        assert!(err.to_string().contains("fallback, llm"), "{err}");
    }

    #[test]
    fn llm_strategy_requires_endpoint() {
        let registry = SummarizerRegistry::builtin();
        let config = SummarizerConfig { strategy: "llm".into(), ..Default::default() };
        assert!(matches!(registry.create(&config), Err(SummarizerError::Config { .. })));
    }

    struct Chatty;
    impl SummaryStrategy for Chatty {
        fn name(&self) -> &'static str {
            "chatty"
        }
        fn summarize(&self, _: &SummaryRequest) -> SummaryOutput {
            SummaryOutput { text: format!("line one\nline two {}", "x".repeat(400)), origin: SummaryOrigin::Llm }
        }
    }

    struct Silent;
    impl SummaryStrategy for Silent {
        fn name(&self) -> &'static str {
            "silent"
        }
        fn summarize(&self, _: &SummaryRequest) -> SummaryOutput {
            SummaryOutput { text: " \n ".into(), origin: SummaryOrigin::Llm }
        }
    }

    #[test]
    fn custom_strategies_are_registered_by_name() {
        let mut registry = SummarizerRegistry::builtin();
        registry.register("chatty", |_| Ok(Box::new(Chatty)));
        let config = SummarizerConfig { strategy: "chatty".into(), ..Default::default() };
        let summarizer = registry.create(&config).unwrap();
        let out = summarizer.summarize(&SummaryRequest::for_event(SummaryKind::LlmQuery, &json!("p"), None, None));
        assert_eq!(out.text.chars().count(), 240);
        assert!(!out.text.contains('\n'));
        assert!(out.text.ends_with('…'));
    }

    #[test]
    fn blank_strategy_output_degrades_to_fallback() {
        let summarizer = Summarizer::new(Silent);
        let out = summarizer.summarize(&SummaryRequest::for_event(SummaryKind::LlmQuery, &json!("p"), None, None));
        assert_eq!(out.origin, SummaryOrigin::Fallback);
        assert_eq!(out.text, "Sends prompt: p");
    }

    #[test]
    fn first_sentence_extraction() {
        assert_eq!(first_sentence("Adds a test. Then more.").as_deref(), Some("Adds a test."));
        assert_eq!(first_sentence("  \"Runs v1.2 tests\"\n").as_deref(), Some("Runs v1.2 tests"));
        assert_eq!(first_sentence("   "), None);
    }

    #[test]
    fn debug_messages_are_clipped_verbatim() {
        let summarizer = Summarizer::default();
        assert_eq!(summarizer.summarize_debug_message("hello\nworld").text, "hello world");
        assert_eq!(summarizer.summarize_debug_message("").text, "(empty debug message)");
    }

    #[test]
    fn clip_respects_char_boundaries() {
        let text = "é".repeat(300);
        let clipped = clip(&text, 240);
        assert_eq!(clipped.chars().count(), 240);
    }
}
