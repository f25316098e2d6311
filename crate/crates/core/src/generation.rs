//! Stage B: a single encouraging follow-up question, grounded in the most
//! recent dialogue turns.

use std::sync::LazyLock;

use thiserror::Error;

use crate::llm_backend::{BackendError, CallParams, CompletionBackend, Purpose};
use crate::scenario::{NodeId, NodeKind, ScenarioNode};
use crate::transcript::{Speaker, Turn};

const FOLLOWUP_TEMPLATE_ASSET: &str = include_str!("../assets/followup_generation.txt");

/// Default number of turns shown to the generator.
pub const HISTORY_WINDOW: usize = 10;

/// The generation template with its header comment lines removed.
pub static FOLLOWUP_TEMPLATE: LazyLock<String> = LazyLock::new(|| strip_header(FOLLOWUP_TEMPLATE_ASSET));

fn strip_header(asset: &str) -> String {
    let mut rest = asset;
    while rest.starts_with("# ") {
        rest = rest.split_once('\n').map_or("", |(_, tail)| tail);
    }
    rest.to_owned()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenPromptBundle {
    pub system_text: String,
    pub history_block: String,
    pub prompt_text: String,
    pub examples_block: String,
    /// The response that failed the gate; sent as the user turn.
    pub learner_response: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FollowUp {
    pub text: String,
    pub raw: String,
}

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("node `{0}` has no gate to generate from")]
    MissingGate(NodeId),
    #[error("no follow-up question in model output: {raw:?}")]
    Extraction { raw: String },
    #[error("generation backend unavailable: {0}")]
    Backend(#[from] BackendError),
}

fn history_line(speaker: Speaker, text: &str) -> String {
    let who = match speaker {
        Speaker::System => "Robot",
        Speaker::Learner => "Learner",
    };
    // One line per turn, whatever the text contains.
    let flat = text.split_whitespace().collect::<Vec<_>>().join(" ");
    format!("{who}: {flat}")
}

/// The last `k` turns, oldest first, one `Robot:`/`Learner:` line each.
pub fn render_history_block(transcript: &[Turn], k: usize) -> String {
    assert!(k >= 1, "history window must hold at least one turn");
    let start = transcript.len().saturating_sub(k);
    transcript[start..]
        .iter()
        .map(|t| history_line(t.speaker, &t.text))
        .collect::<Vec<_>>()
        .join("\n")
}

fn examples_block(node: &ScenarioNode) -> String {
    node.gate
        .as_ref()
        .map(|g| {
            g.gen_exemplars
                .iter()
                .map(|e| format!("Situation: {}\nFollow-up: {}", e.situation, e.followup))
                .collect::<Vec<_>>()
                .join("\n\n")
        })
        .unwrap_or_default()
}

pub fn build_generation_prompt(
    node: &ScenarioNode,
    transcript: &[Turn],
    learner_response: &str,
    window: usize,
) -> Result<GenPromptBundle, GenerationError> {
    if node.kind != NodeKind::Reflection || node.gate.is_none() {
        return Err(GenerationError::MissingGate(node.id.clone()));
    }
    assert!(window >= 1, "history window must hold at least one turn");

    let ends_with_response = transcript
        .last()
        .is_some_and(|t| t.speaker == Speaker::Learner && t.text == learner_response);
    let history_block = if ends_with_response {
        render_history_block(transcript, window)
    } else {
        // Make room for the response that has not been recorded yet.
        let mut lines: Vec<String> = if window > 1 {
            let earlier = render_history_block(transcript, window - 1);
            if earlier.is_empty() { vec![] } else { vec![earlier] }
        } else {
            vec![]
        };
        lines.push(history_line(Speaker::Learner, learner_response));
        lines.join("\n")
    };

    let examples_block = examples_block(node);
    let system_text = fill_slots(
        &FOLLOWUP_TEMPLATE,
        &[
            ("{history_block}", &history_block),
            ("{prompt_text}", &node.prompt_text),
            ("{examples_block}", &examples_block),
        ],
    );
    Ok(GenPromptBundle {
        system_text,
        history_block,
        prompt_text: node.prompt_text.clone(),
        examples_block,
        learner_response: learner_response.to_owned(),
    })
}

/// Single-pass slot substitution: inserted values are never rescanned.
fn fill_slots(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() * 2);
    let mut rest = template;
    loop {
        let next = slots
            .iter()
            .filter_map(|(slot, value)| rest.find(slot).map(|at| (at, *slot, *value)))
            .min_by_key(|(at, _, _)| *at);
        match next {
            Some((at, slot, value)) => {
                out.push_str(&rest[..at]);
                out.push_str(value);
                rest = &rest[at + slot.len()..];
            }
            None => {
                out.push_str(rest);
                return out;
            }
        }
    }
}

const QUOTES: &[char] = &['"', '\'', '\u{201c}', '\u{201d}', '\u{2018}', '\u{2019}', '`'];

/// Splits text into sentences at `.`, `!` or `?` followed by whitespace or
/// the end of input. Runs of terminators stay with their sentence.
fn sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            let mut end = i + c.len_utf8();
            while let Some(&(j, d)) = chars.peek() {
                if matches!(d, '.' | '!' | '?') || QUOTES.contains(&d) {
                    end = j + d.len_utf8();
                    chars.next();
                } else {
                    break;
                }
            }
            let at_boundary = chars.peek().is_none_or(|&(_, d)| d.is_whitespace());
            if at_boundary {
                let s = text[start..end].trim();
                if !s.is_empty() {
                    out.push(s);
                }
                start = end;
            }
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// Keeps at most one non-question preamble sentence plus the first question;
/// anything after that question is dropped.
pub fn extract_followup(raw: &str) -> Result<FollowUp, GenerationError> {
    let cleaned = raw.trim().trim_matches(|c: char| QUOTES.contains(&c) || c.is_whitespace());
    let parts = sentences(cleaned);
    let question_at = parts
        .iter()
        .position(|s| s.trim_end_matches(QUOTES).ends_with('?'))
        .ok_or_else(|| GenerationError::Extraction { raw: raw.to_owned() })?;
    let clean = |s: &str| -> String {
        let s = s.trim_matches(|c: char| QUOTES.contains(&c) || c.is_whitespace());
        s.split_whitespace().collect::<Vec<_>>().join(" ")
    };
    let question = clean(parts[question_at]);
    let text = match question_at.checked_sub(1).map(|i| clean(parts[i])) {
        Some(preamble) if !preamble.is_empty() => format!("{preamble} {question}"),
        _ => question,
    };
    Ok(FollowUp {
        text,
        raw: raw.to_owned(),
    })
}

pub async fn generate_followup<B>(
    node: &ScenarioNode,
    transcript: &[Turn],
    learner_response: &str,
    window: usize,
    backend: &B,
    params: &CallParams,
) -> Result<FollowUp, GenerationError>
where
    B: CompletionBackend + ?Sized,
{
    let bundle = build_generation_prompt(node, transcript, learner_response, window)?;
    let req = params.request(Purpose::Generation, bundle.system_text, bundle.learner_response);
    let raw = backend.complete(&req).await?;
    extract_followup(&raw)
}
