//! Re-drives a stored transcript through the engine and compares what the
//! system says with what was recorded.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::engine::{Engine, LearnerInput, SessionConfig, SessionState};
use crate::llm_backend::CompletionBackend;
use crate::scenario::Scenario;
use crate::store::TranscriptRecord;
use crate::transcript::{FixedClock, Origin, Speaker, Turn};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReplayMode {
    /// System turn texts must match byte for byte.
    #[default]
    Exact,
    /// Only turn count, origins and the node path must match.
    Fuzzy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Divergence {
    pub turn_index: usize,
    pub expected: String,
    pub actual: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayResult {
    pub matched: bool,
    pub compared_turns: usize,
    pub first_divergence: Option<Divergence>,
}

const END: &str = "<end of transcript>";

fn describe(turn: &Turn, mode: ReplayMode) -> String {
    let origin = serde_json::to_value(turn.origin)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default();
    match mode {
        ReplayMode::Exact => turn.text.clone(),
        ReplayMode::Fuzzy => format!("{origin}@{}", turn.node_id),
    }
}

fn same(expected: &Turn, actual: &Turn, mode: ReplayMode) -> bool {
    if expected.origin != actual.origin || expected.speaker != actual.speaker {
        return false;
    }
    match mode {
        ReplayMode::Exact => expected.speaker == Speaker::Learner || expected.text == actual.text,
        ReplayMode::Fuzzy => expected.node_id == actual.node_id,
    }
}

fn divergence(turn_index: usize, expected: impl Into<String>, actual: impl Into<String>) -> ReplayResult {
    ReplayResult {
        matched: false,
        compared_turns: turn_index,
        first_divergence: Some(Divergence {
            turn_index,
            expected: expected.into(),
            actual: actual.into(),
        }),
    }
}

fn learner_input(turn: &Turn) -> LearnerInput {
    match (turn.origin, &turn.option_id) {
        (Origin::LearnerOption, Some(id)) => LearnerInput::Option(id.clone()),
        _ => LearnerInput::OpenText(turn.text.clone()),
    }
}

/// Replays `record` against `scenario`, answering model calls with `backend`.
pub async fn replay<B>(scenario: Arc<Scenario>, record: &TranscriptRecord, backend: &B, mode: ReplayMode) -> ReplayResult
where
    B: CompletionBackend + ?Sized,
{
    if record.scenario_id != scenario.id {
        return divergence(
            0,
            format!("<scenario {}>", record.scenario_id),
            format!("<scenario {}>", scenario.id),
        );
    }
    let config = SessionConfig {
        clock: Arc::new(FixedClock(record.started_at)),
        ..SessionConfig::default()
    };
    let engine = match Engine::new(scenario, config) {
        Ok(e) => e,
        Err(e) => return divergence(0, "<valid scenario>", format!("<error: {e}>")),
    };

    let mut state: SessionState = match engine.start_session(record.session_id.clone()) {
        Ok(out) => out.new_state,
        Err(e) => return divergence(0, "<session start>", format!("<error: {e}>")),
    };

    // Feed each recorded learner turn once the replayed transcript has caught up to it.
    for turn in record.turns.iter().filter(|t| t.speaker == Speaker::Learner) {
        if let Some(d) = compare_prefix(&record.turns, &state.transcript, turn.index, mode) {
            return d;
        }
        let input = learner_input(turn);
        match engine.handle_learner_input(&state, &input, backend).await {
            Ok(out) => state = out.new_state,
            Err(e) => return divergence(turn.index, describe(turn, mode), format!("<error: {e}>")),
        }
    }

    if let Some(d) = compare_prefix(&record.turns, &state.transcript, record.turns.len(), mode) {
        return d;
    }
    if state.transcript.len() > record.turns.len() {
        let extra = &state.transcript[record.turns.len()];
        return divergence(extra.index, END, describe(extra, mode));
    }
    ReplayResult {
        matched: true,
        compared_turns: record.turns.len(),
        first_divergence: None,
    }
}

/// Checks the first `upto` recorded turns against the replayed ones.
fn compare_prefix(recorded: &[Turn], actual: &[Turn], upto: usize, mode: ReplayMode) -> Option<ReplayResult> {
    for (i, expected) in recorded.iter().enumerate().take(upto) {
        match actual.get(i) {
            None => return Some(divergence(i, describe(expected, mode), END)),
            Some(a) if !same(expected, a, mode) => {
                return Some(divergence(i, describe(expected, mode), describe(a, mode)));
            }
            Some(_) => {}
        }
    }
    None
}
