//! Prompt templates sent to the LLM strategy.

use super::{SummaryKind, SummaryRequest};

const RULES: &str = "Answer with exactly one sentence of at most 30 words. \
Focus on what is specific to this event and ignore boilerplate, standing instructions \
and repeated sections. Do not use line breaks or quotes.";

fn subject(kind: SummaryKind) -> &'static str {
    match kind {
        SummaryKind::LlmQuery => "a prompt that a software development agent sent to its LLM",
        SummaryKind::LlmResponse => "a response that an LLM returned to a software development agent",
        SummaryKind::ToolInvocation => "a tool call that a software development agent is about to execute",
        SummaryKind::ToolResult => "the output a tool returned to a software development agent",
        SummaryKind::DiffMessage => "a diff of code changes made by a software development agent",
    }
}

pub fn build_prompt(request: &SummaryRequest) -> String {
    let mut prompt = String::new();
    if request.kind == SummaryKind::DiffMessage {
        prompt.push_str(&format!(
            "Write a concise commit message summary line for {}. {RULES}\n\n<diff>\n{}\n</diff>\n",
            subject(request.kind),
            request.current
        ));
        return prompt;
    }
    match &request.previous {
        Some(previous) => prompt.push_str(&format!(
            "Summarize {}. The previous event of the same type is given for reference: \
             highlight only the differences between the two events. {RULES}\n\n\
             <previous>\n{previous}\n</previous>\n\n<current>\n{}\n</current>\n",
            subject(request.kind),
            request.current
        )),
        None => prompt.push_str(&format!(
            "Summarize {}. {RULES}\n\n<current>\n{}\n</current>\n",
            subject(request.kind),
            request.current
        )),
    }
    prompt
}
