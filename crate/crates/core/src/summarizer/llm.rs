use std::time::Duration;

use serde_json::{json, Value};

use super::templates::build_prompt;
use super::{
    first_sentence, FallbackSummarizer, SummarizerConfig, SummarizerError, SummaryOutput, SummaryRequest,
    SummaryStrategy,
};
use crate::model::SummaryOrigin;

/// Summarizes through a chat-completion endpoint (single user message,
/// temperature 0). Failures, timeouts and unusable answers fall back to
/// [`FallbackSummarizer`].
pub struct LlmSummarizer {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    retries: u32,
    agent: ureq::Agent,
}

impl LlmSummarizer {
    pub fn from_config(config: &SummarizerConfig) -> Result<Self, SummarizerError> {
        let endpoint = config
            .endpoint
            .clone()
            .ok_or_else(|| SummarizerError::Config { name: "llm".into(), message: "no endpoint configured".into() })?;
        Ok(Self::new(endpoint, config.model.clone(), config.api_key.clone(), config.timeout, config.retries))
    }

    pub fn new(endpoint: String, model: String, api_key: Option<String>, timeout: Duration, retries: u32) -> Self {
        let agent =
            ureq::Agent::config_builder().timeout_global(Some(timeout)).http_status_as_error(true).build().new_agent();
        LlmSummarizer { endpoint, model, api_key, retries, agent }
    }

    fn complete(&self, prompt: &str) -> Result<String, String> {
        let request = json!({
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut call = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = call.send_json(&request).map_err(|e| e.to_string())?;
        let reply: Value = response.body_mut().read_json().map_err(|e| e.to_string())?;
        reply
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| "response lacks choices[0].message.content".to_string())
    }
}

impl SummaryStrategy for LlmSummarizer {
    fn name(&self) -> &'static str {
        "llm"
    }

    fn summarize(&self, request: &SummaryRequest) -> SummaryOutput {
        let prompt = build_prompt(request);
        for attempt in 0..=self.retries {
            match self.complete(&prompt) {
                Ok(answer) => match first_sentence(&answer) {
                    Some(text) => return SummaryOutput { text, origin: SummaryOrigin::Llm },
                    None => log::warn!("summarizer backend returned an empty answer"),
                },
                Err(err) => log::warn!("summarizer backend attempt {} failed: {err}", attempt + 1),
            }
        }
        FallbackSummarizer.summarize(request)
    }
}
