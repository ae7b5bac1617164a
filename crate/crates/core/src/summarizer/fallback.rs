use std::collections::HashSet;

use super::{clip, SummaryKind, SummaryOutput, SummaryRequest, SummaryStrategy, ToolContext};
use crate::model::SummaryOrigin;

/// Characters of event content quoted after the lead-in.
const SNIPPET_CHARS: usize = 160;

/// Deterministic summarizer: a kind-specific lead-in followed by the start of
/// what changed relative to the previous event of the same kind.
#[derive(Clone, Copy, Debug, Default)]
pub struct FallbackSummarizer;

impl SummaryStrategy for FallbackSummarizer {
    fn name(&self) -> &'static str {
        "fallback"
    }

    fn summarize(&self, request: &SummaryRequest) -> SummaryOutput {
        SummaryOutput { text: fallback_text(request), origin: SummaryOrigin::Fallback }
    }
}

fn fallback_text(request: &SummaryRequest) -> String {
    if let Some(previous) = &request.previous {
        if *previous == request.current {
            return format!("Identical to previous {}.", request.kind);
        }
    }
    let tool = match (&request.tool, request.kind) {
        (Some(tool), _) => Some(tool.clone()),
        (None, SummaryKind::ToolInvocation) => parse_call(&request.current),
        _ => None,
    };
    let lead = match request.kind {
        SummaryKind::LlmQuery => "Sends prompt".to_string(),
        SummaryKind::LlmResponse => "LLM responds".to_string(),
        SummaryKind::ToolInvocation => match &tool {
            Some(tool) if tool.arg_keys.is_empty() => format!("Invokes tool {} with no arguments", tool.name),
            Some(tool) => format!("Invokes tool {} with {}", tool.name, tool.arg_keys.join(", ")),
            None => "Invokes a tool".to_string(),
        },
        SummaryKind::ToolResult => "Tool returns".to_string(),
        SummaryKind::DiffMessage => format!("Changes {} file(s)", changed_files(&request.current)),
    };
    let current = match (&tool, request.kind) {
        (Some(tool), SummaryKind::ToolInvocation) => strip_call(&request.current, &tool.name),
        _ => request.current.as_str(),
    };
    let delta = match &request.previous {
        Some(previous) => {
            let previous = match (&tool, request.kind) {
                (Some(tool), SummaryKind::ToolInvocation) => strip_call(previous, &tool.name),
                _ => previous.as_str(),
            };
            line_delta(current, previous)
        }
        None => current.to_string(),
    };
    let delta = delta.split_whitespace().collect::<Vec<_>>().join(" ");
    if delta.is_empty() {
        format!("{lead}.")
    } else {
        format!("{lead}: {}", clip(&delta, SNIPPET_CHARS))
    }
}

/// Lines of `current` absent from `previous`; when there are none (content
/// was only removed), the removed lines instead.
fn line_delta(current: &str, previous: &str) -> String {
    let before: HashSet<&str> = previous.lines().collect();
    let added: Vec<&str> = current.lines().filter(|l| !before.contains(l)).collect();
    if !added.is_empty() {
        return added.join(" / ");
    }
    let after: HashSet<&str> = current.lines().collect();
    let removed: Vec<&str> = previous.lines().filter(|l| !after.contains(l)).collect();
    if removed.is_empty() {
        // same lines, different order or whitespace
        current.to_string()
    } else {
        format!("removed {}", removed.join(" / "))
    }
}

fn changed_files(diff: &str) -> usize {
    let headers = diff.lines().filter(|l| l.starts_with("diff --git ")).count();
    if headers > 0 {
        headers
    } else {
        diff.lines().filter(|l| l.starts_with("+++ ")).count()
    }
}

fn strip_call<'a>(text: &'a str, name: &str) -> &'a str {
    text.strip_prefix(name)
        .and_then(|rest| rest.strip_prefix('('))
        .and_then(|rest| rest.strip_suffix(')'))
        .unwrap_or(text)
}

/// Recovers `name` and top-level argument keys from `name({key: ...})`.
fn parse_call(text: &str) -> Option<ToolContext> {
    let open = text.find('(')?;
    let name = text[..open].trim();
    if name.is_empty() || !name.chars().all(|c| c.is_alphanumeric() || "_-.:".contains(c)) {
        return None;
    }
    let args = text[open + 1..].trim_end().strip_suffix(')')?.trim();
    let mut keys = Vec::new();
    if let Some(inner) = args.strip_prefix('{').and_then(|a| a.strip_suffix('}')) {
        let mut depth = 0usize;
        let mut quote: Option<char> = None;
        let mut escaped = false;
        let mut token = String::new();
        for c in inner.chars() {
            if let Some(q) = quote {
                if escaped {
                    escaped = false;
                } else if c == '\\' {
                    escaped = true;
                } else if c == q {
                    quote = None;
                    continue;
                }
                if depth == 0 {
                    token.push(c);
                }
                continue;
            }
            match c {
                '\'' | '"' => quote = Some(c),
                '{' | '[' | '(' => depth += 1,
                '}' | ']' | ')' => depth = depth.saturating_sub(1),
                ':' if depth == 0 => {
                    let key = token.trim().trim_matches(|c| c == '\'' || c == '"');
                    if !key.is_empty() {
                        keys.push(key.to_string());
                    }
                    token.clear();
                }
                ',' if depth == 0 => token.clear(),
                _ if depth == 0 => token.push(c),
                _ => {}
            }
        }
    }
    Some(ToolContext { name: name.to_string(), arg_keys: keys })
}
