//! Declarative agent scripts and the sandbox tools they drive.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Component, Path, PathBuf};

use agentstepper_core::model::Body;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

/// A fully deterministic agent: one entry per reasoning cycle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentScript {
    pub agent_name: String,
    pub cycles: Vec<CycleScript>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CycleScript {
    /// Plain text or a structured prompt. From the second cycle on, the
    /// previous tool result is appended as the observation.
    pub prompt: Body,
    /// Canned LLM response.
    pub response: Body,
    pub tool: ToolCall,
    #[serde(default, skip_serializing_if = "Holdable::all")]
    pub holdable: Holdable,
    /// Explicit commit after the tool result.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub commit: Option<CommitMarker>,
    /// Posted after the tool result (and commit).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub debug_message: Option<String>,
}

/// Tool name and arguments. The name selects the behavior:
/// `write_file {path, contents}`, `delete_file {path}`,
/// `append_file {path, line}`, `noop {}`, `fail {message}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolCall {
    pub name: String,
    #[serde(default = "empty_args")]
    pub args: Body,
}

fn empty_args() -> Body {
    Value::Object(Map::new())
}

impl ToolCall {
    pub fn write_file(path: &str, contents: &str) -> ToolCall {
        ToolCall { name: "write_file".into(), args: json!({ "path": path, "contents": contents }) }
    }

    pub fn delete_file(path: &str) -> ToolCall {
        ToolCall { name: "delete_file".into(), args: json!({ "path": path }) }
    }

    pub fn append_file(path: &str, line: &str) -> ToolCall {
        ToolCall { name: "append_file".into(), args: json!({ "path": path, "line": line }) }
    }

    pub fn noop() -> ToolCall {
        ToolCall { name: "noop".into(), args: empty_args() }
    }

    pub fn fail(message: &str) -> ToolCall {
        ToolCall { name: "fail".into(), args: json!({ "message": message }) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Holdable {
    pub query_begin: bool,
    pub query_end: bool,
    pub tool_begin: bool,
    pub tool_end: bool,
}

impl Default for Holdable {
    fn default() -> Self {
        Holdable { query_begin: true, query_end: true, tool_begin: true, tool_end: true }
    }
}

impl Holdable {
    fn all(&self) -> bool {
        *self == Holdable::default()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommitMarker {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ToolAction {
    WriteFile { path: String, contents: String },
    DeleteFile { path: String },
    AppendFile { path: String, line: String },
    Noop,
    Fail { message: String },
}

impl ToolAction {
    pub fn parse(name: &str, args: &Body) -> Result<ToolAction, String> {
        let field = |key: &str| -> Result<String, String> {
            args.get(key)
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| format!("{name}: missing string argument {key:?}"))
        };
        match name {
            "write_file" => Ok(ToolAction::WriteFile { path: field("path")?, contents: field("contents")? }),
            "delete_file" => Ok(ToolAction::DeleteFile { path: field("path")? }),
            "append_file" => Ok(ToolAction::AppendFile { path: field("path")?, line: field("line")? }),
            "noop" => Ok(ToolAction::Noop),
            "fail" => Ok(ToolAction::Fail { message: field("message")? }),
            other => Err(format!("unknown tool {other:?}")),
        }
    }

    /// Runs against `sandbox` and returns the tool output. Failures are
    /// outputs too, as they would be for a real agent.
    pub fn execute(&self, sandbox: &Path) -> String {
        match self.try_execute(sandbox) {
            Ok(output) => output,
            Err(e) => format!("error: {e}"),
        }
    }

    fn try_execute(&self, sandbox: &Path) -> Result<String, String> {
        match self {
            ToolAction::WriteFile { path, contents } => {
                let target = resolve(sandbox, path)?;
                if let Some(parent) = target.parent() {
                    fs::create_dir_all(parent).map_err(|e| e.to_string())?;
                }
                fs::write(&target, contents).map_err(|e| format!("{path}: {e}"))?;
                Ok(format!("wrote {} bytes to {path}", contents.len()))
            }
            ToolAction::DeleteFile { path } => {
                let target = resolve(sandbox, path)?;
                fs::remove_file(&target).map_err(|e| format!("{path}: {e}"))?;
                Ok(format!("deleted {path}"))
            }
            ToolAction::AppendFile { path, line } => {
                let target = resolve(sandbox, path)?;
                let mut file =
                    OpenOptions::new().create(true).append(true).open(&target).map_err(|e| format!("{path}: {e}"))?;
                writeln!(file, "{line}").map_err(|e| format!("{path}: {e}"))?;
                Ok(format!("appended 1 line to {path}"))
            }
            ToolAction::Noop => Ok("ok".to_string()),
            ToolAction::Fail { message } => Err(message.clone()),
        }
    }
}

/// Runs a possibly edited tool call.
pub fn execute_call(sandbox: &Path, name: &str, args: &Body) -> String {
    match ToolAction::parse(name, args) {
        Ok(action) => action.execute(sandbox),
        Err(e) => format!("error: {e}"),
    }
}

fn resolve(sandbox: &Path, path: &str) -> Result<PathBuf, String> {
    let relative = Path::new(path);
    if path.is_empty() || !relative.components().all(|c| matches!(c, Component::Normal(_) | Component::CurDir)) {
        return Err(format!("path {path:?} is not inside the sandbox"));
    }
    Ok(sandbox.join(relative))
}

/// Prompt actually sent for a cycle: the scripted prompt plus the last
/// observation.
pub fn build_prompt(prompt: &Body, observation: Option<&Body>) -> Body {
    let Some(observation) = observation else { return prompt.clone() };
    match prompt {
        Value::String(text) => {
            let observed = match observation {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            Value::String(format!("{text}\nObservation: {observed}"))
        }
        Value::Object(fields) => {
            let mut fields = fields.clone();
            fields.insert("observation".into(), observation.clone());
            Value::Object(fields)
        }
        other => json!({ "prompt": other, "observation": observation }),
    }
}

impl AgentScript {
    pub fn from_json(text: &str) -> Result<AgentScript, String> {
        let script: AgentScript = serde_json::from_str(text).map_err(|e| e.to_string())?;
        script.validate()?;
        Ok(script)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.agent_name.is_empty() {
            return Err("agent_name is empty".into());
        }
        for (index, cycle) in self.cycles.iter().enumerate() {
            let action =
                ToolAction::parse(&cycle.tool.name, &cycle.tool.args).map_err(|e| format!("cycle {index}: {e}"))?;
            let path = match &action {
                ToolAction::WriteFile { path, .. }
                | ToolAction::DeleteFile { path }
                | ToolAction::AppendFile { path, .. } => Some(path),
                _ => None,
            };
            if let Some(path) = path {
                resolve(Path::new("."), path).map_err(|e| format!("cycle {index}: {e}"))?;
            }
        }
        Ok(())
    }

    /// `cycles` cycles that each write one file, `file<i>.txt`.
    pub fn writing(agent_name: &str, cycles: usize) -> AgentScript {
        AgentScript {
            agent_name: agent_name.into(),
            cycles: (0..cycles)
                .map(|i| CycleScript {
                    prompt: Value::String(format!("Step {i}: write file{i}.txt")),
                    response: Value::String(format!("I will write file{i}.txt")),
                    tool: ToolCall::write_file(&format!("file{i}.txt"), &format!("contents {i}\n")),
                    holdable: Holdable::default(),
                    commit: None,
                    debug_message: None,
                })
                .collect(),
        }
    }

    /// `cycles` cycles whose tool does nothing.
    pub fn idle(agent_name: &str, cycles: usize) -> AgentScript {
        let mut script = Self::writing(agent_name, cycles);
        for cycle in &mut script.cycles {
            cycle.tool = ToolCall::noop();
        }
        script
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tools_modify_the_sandbox() {
        let dir = tempfile::tempdir().unwrap();
        let sandbox = dir.path();
        assert_eq!(
            execute_call(sandbox, "write_file", &json!({"path": "d/a.txt", "contents": "x\n"})),
            "wrote 2 bytes to d/a.txt"
        );
        assert_eq!(
            execute_call(sandbox, "append_file", &json!({"path": "d/a.txt", "line": "y"})),
            "appended 1 line to d/a.txt"
        );
        assert_eq!(fs::read_to_string(sandbox.join("d/a.txt")).unwrap(), "x\ny\n");
        assert_eq!(execute_call(sandbox, "delete_file", &json!({"path": "d/a.txt"})), "deleted d/a.txt");
        assert!(execute_call(sandbox, "delete_file", &json!({"path": "d/a.txt"})).starts_with("error: d/a.txt"));
        assert_eq!(execute_call(sandbox, "noop", &json!({})), "ok");
        assert_eq!(execute_call(sandbox, "fail", &json!({"message": "boom"})), "error: boom");
        assert_eq!(execute_call(sandbox, "rm", &json!({})), "error: unknown tool \"rm\"");
    }

    #[test]
    fn paths_stay_inside_the_sandbox() {
        let dir = tempfile::tempdir().unwrap();
        for path in ["../x", "/etc/passwd", "", "a/../../b"] {
            let out = execute_call(dir.path(), "write_file", &json!({"path": path, "contents": ""}));
            assert!(out.contains("not inside the sandbox"), "{path}: {out}");
        }
    }

    #[test]
    fn prompts_carry_the_observation() {
        assert_eq!(build_prompt(&json!("fix"), None), json!("fix"));
        assert_eq!(build_prompt(&json!("fix"), Some(&json!("ok"))), json!("fix\nObservation: ok"));
        assert_eq!(build_prompt(&json!({"task": "t"}), Some(&json!("ok"))), json!({"task": "t", "observation": "ok"}));
    }

    #[test]
    fn script_json_round_trips() {
        let mut script = AgentScript::writing("a", 2);
        script.cycles[1].holdable.tool_begin = false;
        script.cycles[1].commit = Some(CommitMarker { summary: Some("s".into()), description: None });
        let text = serde_json::to_string_pretty(&script).unwrap();
        assert_eq!(AgentScript::from_json(&text).unwrap(), script);
        assert!(!text.contains("query_begin") || text.contains("\"tool_begin\": false"));
    }

    #[test]
    fn invalid_scripts_are_rejected() {
        let bad = r#"{"agent_name": "a", "cycles": [{"prompt": "p", "response": "r", "tool": {"name": "write_file", "args": {"path": "../x", "contents": ""}}}]}"#;
        assert!(AgentScript::from_json(bad).unwrap_err().contains("cycle 0"));
        let unknown = r#"{"agent_name": "a", "cycles": [{"prompt": "p", "response": "r", "tool": {"name": "rm"}}]}"#;
        assert!(AgentScript::from_json(unknown).is_err());
    }
}
