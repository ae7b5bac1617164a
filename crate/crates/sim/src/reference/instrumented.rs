//! The reference agent loop with the debugger calls added.

use serde_json::Value;

use super::{parse_action, Action, Environment, Llm, Outcome};
use crate::client::Debugger;
use crate::wire::ClientError;

/// Alternates model calls and tool calls until the model finishes or
/// `max_steps` model calls have been made.
pub fn run(
    task: &str,
    llm: &mut dyn Llm,
    env: &Environment,
    max_steps: usize,
    server: &str,
) -> Result<Outcome, ClientError> {
    Debugger::with_session(server, "reference-agent", Some(env.sandbox()), |debugger| {
        agent_loop(task, llm, env, max_steps, debugger)
    })
}

fn agent_loop(
    task: &str,
    llm: &mut dyn Llm,
    env: &Environment,
    max_steps: usize,
    debugger: &mut Debugger,
) -> Result<Outcome, ClientError> {
    let mut history = vec![Value::String(task.to_string())];
    for step in 0..max_steps {
        let prompt = debugger.begin_llm_query_breakpoint(Value::Array(history.clone()))?;
        let response = debugger.end_llm_query_breakpoint(llm.complete(&prompt))?;
        history.push(response.clone());
        match parse_action(&response) {
            Action::Finish(answer) => {
                debugger.post_debug_message(&format!("finished after {} steps", step + 1))?;
                return Ok(Outcome { answer: Some(answer), steps: step + 1, history });
            }
            Action::Tool { name, args } => {
                let (name, args) = debugger.begin_tool_invocation_breakpoint(&name, args)?;
                let observation = debugger.end_tool_invocation_breakpoint(env.run(&name, &args))?;
                debugger.commit_agent_changes(None, None)?;
                history.push(observation);
            }
        }
    }
    Ok(Outcome { answer: None, steps: max_steps, history })
}
