//! Deterministic flattening of event bodies into text.

use serde_json::Value;

use crate::model::{Body, EventKind};

/// Renders a body: plain strings as-is, structured values in a compact
/// brace notation with keys in sorted order.
pub fn render_body(body: &Body) -> String {
    match body {
        Value::String(text) => text.clone(),
        other => render_value(other),
    }
}

pub fn render_value(value: &Value) -> String {
    let mut out = String::new();
    write_value(&mut out, value);
    out
}

fn write_value(out: &mut String, value: &Value) {
    match value {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => out.push_str(&n.to_string()),
        Value::String(s) => {
            out.push('\'');
            for c in s.chars() {
                if c == '\'' || c == '\\' {
                    out.push('\\');
                }
                out.push(c);
            }
            out.push('\'');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                write_value(out, item);
            }
            out.push(']');
        }
        Value::Object(map) => {
            // serde_json's default map is ordered by key
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, key) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                out.push_str(key);
                out.push_str(": ");
                write_value(out, &map[key]);
            }
            out.push('}');
        }
    }
}

/// Text fed to the summarizer for one event. Tool invocations render as a
/// call expression, e.g. `run_tests({suite: 'unit'})`.
pub fn render_event_for_summary(kind: EventKind, body: &Body, tool_name: Option<&str>) -> String {
    match kind {
        EventKind::ToolInvocation => {
            format!("{}({})", tool_name.unwrap_or(""), render_value(body))
        }
        _ => render_body(body),
    }
}

/// Top-level argument keys of a tool invocation body.
pub fn argument_keys(body: &Body) -> Vec<String> {
    match body {
        Value::Object(map) => {
            let mut keys: Vec<String> = map.keys().cloned().collect();
            keys.sort();
            keys
        }
        _ => Vec::new(),
    }
}
