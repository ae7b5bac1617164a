//! A small ReAct-style agent in two versions: [`plain`] runs without a
//! debugger, [`instrumented`] is the same loop with the debugger calls added.

pub mod instrumented;
pub mod plain;

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use agentstepper_core::model::Body;
use serde_json::Value;

use crate::script::execute_call;

/// What the model asked for.
#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Tool { name: String, args: Body },
    Finish(String),
}

/// Reads `{"tool": name, "args": {...}}` or `{"finish": answer}`. Anything
/// else finishes with the response text as the answer.
pub fn parse_action(response: &Body) -> Action {
    if let Some(name) = response.get("tool").and_then(Value::as_str) {
        let args = response.get("args").cloned().unwrap_or_else(|| Value::Object(Default::default()));
        return Action::Tool { name: name.to_string(), args };
    }
    match response.get("finish") {
        Some(Value::String(answer)) => Action::Finish(answer.clone()),
        Some(other) => Action::Finish(other.to_string()),
        None => Action::Finish(match response {
            Value::String(text) => text.clone(),
            other => other.to_string(),
        }),
    }
}

pub trait Llm {
    fn complete(&mut self, prompt: &Body) -> Body;
}

/// Replies with canned responses in order, then finishes.
pub struct ScriptedLlm {
    responses: VecDeque<Body>,
}

impl ScriptedLlm {
    pub fn new(responses: impl IntoIterator<Item = Body>) -> ScriptedLlm {
        ScriptedLlm { responses: responses.into_iter().collect() }
    }
}

impl Llm for ScriptedLlm {
    fn complete(&mut self, _prompt: &Body) -> Body {
        self.responses.pop_front().unwrap_or_else(|| serde_json::json!({ "finish": "out of responses" }))
    }
}

/// The directory the agent's tools act on.
pub struct Environment {
    sandbox: PathBuf,
}

impl Environment {
    pub fn new(sandbox: impl Into<PathBuf>) -> Environment {
        Environment { sandbox: sandbox.into() }
    }

    pub fn sandbox(&self) -> &Path {
        &self.sandbox
    }

    pub fn run(&self, name: &str, args: &Body) -> Body {
        Value::String(execute_call(&self.sandbox, name, args))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    /// `None` if the step budget ran out.
    pub answer: Option<String>,
    pub steps: usize,
    /// Task, responses and observations in order.
    pub history: Vec<Body>,
}
