//! The reference agent loop.

use serde_json::Value;

use super::{parse_action, Action, Environment, Llm, Outcome};

/// Alternates model calls and tool calls until the model finishes or
/// `max_steps` model calls have been made.
pub fn run(task: &str, llm: &mut dyn Llm, env: &Environment, max_steps: usize) -> Outcome {
    let mut history = vec![Value::String(task.to_string())];
    for step in 0..max_steps {
        let prompt = Value::Array(history.clone());
        let response = llm.complete(&prompt);
        history.push(response.clone());
        match parse_action(&response) {
            Action::Finish(answer) => {
                return Outcome { answer: Some(answer), steps: step + 1, history };
            }
            Action::Tool { name, args } => {
                let observation = env.run(&name, &args);
                history.push(observation);
            }
        }
    }
    Outcome { answer: None, steps: max_steps, history }
}
