//! Stage A: the relevance gate.
//!
//! A learner's open response is first checked against the node's field
//! description and few-shot exemplars. Responses that pass are run through
//! the interrogative detector, which rejects answers that are themselves
//! questions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm_backend::{BackendError, CallParams, CompletionBackend, Purpose};
use crate::scenario::{NodeId, NodeKind, ScenarioNode};

pub const FIELD_CHECK_TEMPLATE: &str = include_str!("../assets/relevance_field_check.txt");
pub const INTERROGATIVE_TEMPLATE: &str = include_str!("../assets/interrogative_detector.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictValue {
    Relevant,
    NotRelevant,
    Malformed,
}

/// A parsed model reply together with the raw text it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub value: VerdictValue,
    pub raw: String,
}

/// The gate's binary outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relevance {
    Relevant,
    NotRelevant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShortCircuit {
    Blank,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevanceDecision {
    #[serde(rename = "final")]
    pub final_verdict: Relevance,
    pub stage_a_verdict: Verdict,
    pub interrogative_verdict: Option<Verdict>,
    pub local_short_circuit: Option<ShortCircuit>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatePromptBundle {
    pub system_text: String,
    pub field_desc: String,
    pub examples_section: String,
    pub candidate_response: String,
}

#[derive(Debug, Error)]
pub enum RelevanceError {
    #[error("node `{0}` has no relevance gate")]
    MissingGate(NodeId),
    /// The backend failed. `stage_a` holds the field-check verdict when the
    /// failure happened in the interrogative call.
    #[error("relevance backend unavailable: {source}")]
    BackendUnavailable {
        stage_a: Option<Verdict>,
        #[source]
        source: BackendError,
    },
}

/// Maps a reply to a verdict from its first whitespace-delimited token,
/// case-folded with surrounding punctuation stripped.
pub fn parse_verdict(raw: &str) -> Verdict {
    let token = raw
        .split_whitespace()
        .next()
        .unwrap_or_default()
        .trim_matches(|c: char| c.is_ascii_punctuation())
        .to_ascii_lowercase();
    let value = match token.as_str() {
        "yes" => VerdictValue::Relevant,
        "no" => VerdictValue::NotRelevant,
        _ => VerdictValue::Malformed,
    };
    Verdict {
        value,
        raw: raw.to_owned(),
    }
}

fn examples_section(node: &ScenarioNode) -> String {
    let Some(gate) = &node.gate else {
        return String::new();
    };
    gate.exemplars
        .iter()
        .map(|e| {
            format!(
                "Response: {}\nVerdict: {}\nReasoning: {}",
                e.sample_response,
                e.verdict.as_str(),
                e.reasoning
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

pub fn build_gate_prompt(node: &ScenarioNode, response: &str) -> Result<GatePromptBundle, RelevanceError> {
    let gate = match (&node.gate, node.kind) {
        (Some(gate), NodeKind::Reflection) => gate,
        _ => return Err(RelevanceError::MissingGate(node.id.clone())),
    };
    let examples_section = examples_section(node);
    // Substitute both slots in one pass so that slot-like text inside the
    // field description is never re-expanded.
    let system_text = FIELD_CHECK_TEMPLATE
        .split("{field_desc}")
        .map(|part| part.replace("{examples_section}", &examples_section))
        .collect::<Vec<_>>()
        .join(&gate.field_desc);
    Ok(GatePromptBundle {
        system_text,
        field_desc: gate.field_desc.clone(),
        examples_section,
        candidate_response: response.to_owned(),
    })
}

/// The detector template carries no slots; the message goes in the task slot,
/// which is the user turn of the request.
pub fn build_interrogative_prompt(response: &str) -> (String, String) {
    debug_assert!(!response.trim().is_empty(), "blank responses are short-circuited");
    (INTERROGATIVE_TEMPLATE.to_owned(), response.to_owned())
}

/// Runs the gate pipeline: blank check, field check, then the interrogative
/// detector for responses that passed. Malformed replies count as relevant.
pub async fn assess_relevance<B>(
    node: &ScenarioNode,
    response: &str,
    backend: &B,
    params: &CallParams,
) -> Result<RelevanceDecision, RelevanceError>
where
    B: CompletionBackend + ?Sized,
{
    let bundle = build_gate_prompt(node, response)?;

    if response.trim().is_empty() {
        return Ok(RelevanceDecision {
            final_verdict: Relevance::NotRelevant,
            stage_a_verdict: parse_verdict(""),
            interrogative_verdict: None,
            local_short_circuit: Some(ShortCircuit::Blank),
        });
    }

    let req = params.request(Purpose::Relevance, bundle.system_text, bundle.candidate_response);
    let raw = backend
        .complete(&req)
        .await
        .map_err(|source| RelevanceError::BackendUnavailable { stage_a: None, source })?;
    let stage_a = parse_verdict(&raw);

    let decided = |final_verdict, interrogative_verdict| RelevanceDecision {
        final_verdict,
        stage_a_verdict: stage_a.clone(),
        interrogative_verdict,
        local_short_circuit: None,
    };

    match stage_a.value {
        VerdictValue::NotRelevant => return Ok(decided(Relevance::NotRelevant, None)),
        VerdictValue::Malformed => return Ok(decided(Relevance::Relevant, None)),
        VerdictValue::Relevant => {}
    }

    let (system_text, user_text) = build_interrogative_prompt(response);
    let req = params.request(Purpose::Interrogative, system_text, user_text);
    let raw = match backend.complete(&req).await {
        Ok(raw) => raw,
        Err(source) => {
            return Err(RelevanceError::BackendUnavailable {
                stage_a: Some(stage_a),
                source,
            })
        }
    };
    let question = parse_verdict(&raw);
    // The detector answers "is this a question?": YES fails the gate.
    let final_verdict = match question.value {
        VerdictValue::Relevant => Relevance::NotRelevant,
        VerdictValue::NotRelevant | VerdictValue::Malformed => Relevance::Relevant,
    };
    Ok(decided(final_verdict, Some(question)))
}
