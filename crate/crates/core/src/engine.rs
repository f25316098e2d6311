//! One dialogue session as a finite state machine over a [`Scenario`].
//!
//! Decision nodes move on as soon as an option is picked. Reflection nodes
//! pass the learner's text through the relevance gate; a failed gate yields a
//! generated follow-up and the node is asked again, up to
//! [`REPROMPT_BUDGET`] times, after which the session moves on regardless.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generation::{generate_followup, GenerationError, HISTORY_WINDOW};
use crate::llm_backend::{CallParams, CompletionBackend};
use crate::relevance::{assess_relevance, parse_verdict, Relevance, RelevanceError, ShortCircuit, Verdict};
use crate::scenario::{validate, NodeId, NodeKind, Outcome, Scenario, ScenarioNode, TransitionError, ValidationReport};
use crate::transcript::{Clock, Origin, SystemClock, Turn};

/// Generated follow-ups allowed per node visit.
pub const REPROMPT_BUDGET: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Active,
    Completed,
    Aborted,
}

impl fmt::Display for SessionStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SessionStatus::Active => "active",
            SessionStatus::Completed => "completed",
            SessionStatus::Aborted => "aborted",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub scenario_id: String,
    pub current_node: NodeId,
    pub reprompt_count: u8,
    pub transcript: Vec<Turn>,
    pub status: SessionStatus,
}

impl SessionState {
    pub fn is_active(&self) -> bool {
        self.status == SessionStatus::Active
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LearnerInput {
    OpenText(String),
    Option(String),
}

/// Why the engine moved on without a usable gate or generator result.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", content = "detail", rename_all = "snake_case")]
pub enum FailOpen {
    GateBackend(String),
    GenerationBackend(String),
    Extraction(String),
}

/// What the gate decided for one open learner turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateTrace {
    pub learner_turn_index: usize,
    pub stage_a: Verdict,
    pub interrogative: Option<Verdict>,
    pub short_circuit: Option<ShortCircuit>,
    /// Gate outcome after fail-open is applied.
    pub verdict: Relevance,
    pub reprompt_issued: bool,
    pub generated_turn_index: Option<usize>,
    pub fail_open: Option<FailOpen>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EngineOutcome {
    /// System turns produced by this step, already part of `new_state.transcript`.
    pub emitted: Vec<Turn>,
    pub new_state: SessionState,
    pub gate_trace: Option<GateTrace>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    Open,
    Options,
    None,
}

impl InputMode {
    pub fn for_kind(kind: NodeKind) -> Self {
        match kind {
            NodeKind::Reflection => InputMode::Open,
            NodeKind::Decision => InputMode::Options,
            NodeKind::Statement | NodeKind::Terminal => InputMode::None,
        }
    }
}

#[derive(Debug, Clone, Error)]
pub enum EngineError {
    #[error("scenario failed validation:\n{0}")]
    InvalidScenario(ValidationReport),
    #[error("node `{node}` expects {expected:?} input")]
    InputKindMismatch { node: NodeId, expected: InputMode },
    #[error("node `{node}` has no option `{option_id}`")]
    UnknownOption { node: NodeId, option_id: String },
    #[error("session is {0}")]
    SessionNotActive(SessionStatus),
    #[error("session refers to node `{0}` that the scenario lacks")]
    UnknownNode(NodeId),
    #[error("scenario transition failed: {0}")]
    Transition(#[from] TransitionError),
}

#[derive(Clone)]
pub struct SessionConfig {
    pub history_window: usize,
    pub gate_params: CallParams,
    pub gen_params: CallParams,
    pub clock: Arc<dyn Clock>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            history_window: HISTORY_WINDOW,
            gate_params: CallParams::verdict(),
            gen_params: CallParams::followup(),
            clock: Arc::new(SystemClock),
        }
    }
}

impl fmt::Debug for SessionConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SessionConfig")
            .field("history_window", &self.history_window)
            .field("gate_params", &self.gate_params)
            .field("gen_params", &self.gen_params)
            .finish_non_exhaustive()
    }
}

/// Runs sessions over one validated scenario. Holds no per-session state.
#[derive(Debug, Clone)]
pub struct Engine {
    scenario: Arc<Scenario>,
    config: SessionConfig,
}

impl Engine {
    pub fn new(scenario: Arc<Scenario>, config: SessionConfig) -> Result<Self, EngineError> {
        let report = validate(&scenario);
        if !report.ok {
            return Err(EngineError::InvalidScenario(report));
        }
        Ok(Self { scenario, config })
    }

    pub fn scenario(&self) -> &Arc<Scenario> {
        &self.scenario
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn node(&self, id: &NodeId) -> Result<&ScenarioNode, EngineError> {
        self.scenario
            .node(id.as_str())
            .ok_or_else(|| EngineError::UnknownNode(id.clone()))
    }

    /// Emits the start prompt and any statements that follow it.
    pub fn start_session(&self, session_id: impl Into<String>) -> Result<EngineOutcome, EngineError> {
        let mut state = SessionState {
            session_id: session_id.into(),
            scenario_id: self.scenario.id.clone(),
            current_node: self.scenario.start_node.clone(),
            reprompt_count: 0,
            transcript: Vec::new(),
            status: SessionStatus::Active,
        };
        self.enter(&mut state, self.scenario.start_node.clone())?;
        Ok(EngineOutcome {
            emitted: state.transcript.clone(),
            new_state: state,
            gate_trace: None,
        })
    }

    pub async fn handle_learner_input<B>(
        &self,
        state: &SessionState,
        input: &LearnerInput,
        backend: &B,
    ) -> Result<EngineOutcome, EngineError>
    where
        B: CompletionBackend + ?Sized,
    {
        if !state.is_active() {
            return Err(EngineError::SessionNotActive(state.status));
        }
        let node = self.node(&state.current_node)?;
        let mut next = state.clone();
        let first_new = next.transcript.len();

        let gate_trace = match (node.kind, input) {
            (NodeKind::Decision, LearnerInput::Option(option_id)) => {
                let option = node.option(option_id).ok_or_else(|| EngineError::UnknownOption {
                    node: node.id.clone(),
                    option_id: option_id.clone(),
                })?;
                self.push(&mut next, Origin::LearnerOption, option.label.clone(), Some(option_id.clone()));
                let target = self.scenario.next_node(node.id.as_str(), Outcome::OptionChoice(option_id))?;
                self.enter(&mut next, target.clone())?;
                None
            }
            (NodeKind::Reflection, LearnerInput::OpenText(text)) => {
                Some(self.handle_reflection(node, &mut next, text, backend).await?)
            }
            (kind, _) => {
                return Err(EngineError::InputKindMismatch {
                    node: node.id.clone(),
                    expected: InputMode::for_kind(kind),
                })
            }
        };

        let emitted = next.transcript[first_new..]
            .iter()
            .filter(|t| t.origin.speaker() == crate::transcript::Speaker::System)
            .cloned()
            .collect();
        Ok(EngineOutcome {
            emitted,
            new_state: next,
            gate_trace,
        })
    }

    async fn handle_reflection<B>(
        &self,
        node: &ScenarioNode,
        state: &mut SessionState,
        text: &str,
        backend: &B,
    ) -> Result<GateTrace, EngineError>
    where
        B: CompletionBackend + ?Sized,
    {
        let learner_turn_index = self.push(state, Origin::LearnerOpen, text.to_owned(), None);

        let mut trace = match assess_relevance(node, text, backend, &self.config.gate_params).await {
            Ok(decision) => GateTrace {
                learner_turn_index,
                stage_a: decision.stage_a_verdict,
                interrogative: decision.interrogative_verdict,
                short_circuit: decision.local_short_circuit,
                verdict: decision.final_verdict,
                reprompt_issued: false,
                generated_turn_index: None,
                fail_open: None,
            },
            Err(RelevanceError::BackendUnavailable { stage_a, source }) => {
                tracing::warn!(node = %node.id, error = %source, "gate backend failed; advancing");
                GateTrace {
                    learner_turn_index,
                    stage_a: stage_a.unwrap_or_else(|| parse_verdict("")),
                    interrogative: None,
                    short_circuit: None,
                    verdict: Relevance::Relevant,
                    reprompt_issued: false,
                    generated_turn_index: None,
                    fail_open: Some(FailOpen::GateBackend(source.to_string())),
                }
            }
            Err(RelevanceError::MissingGate(id)) => {
                // validate() guarantees every reflection node carries a gate
                return Err(EngineError::UnknownNode(id));
            }
        };

        if trace.verdict == Relevance::NotRelevant && state.reprompt_count < REPROMPT_BUDGET {
            let followup = generate_followup(
                node,
                &state.transcript,
                text,
                self.config.history_window,
                backend,
                &self.config.gen_params,
            )
            .await;
            match followup {
                Ok(f) => {
                    let index = self.push(state, Origin::Generated, f.text, None);
                    state.reprompt_count += 1;
                    trace.reprompt_issued = true;
                    trace.generated_turn_index = Some(index);
                    return Ok(trace);
                }
                Err(e) => {
                    tracing::warn!(node = %node.id, error = %e, "follow-up generation failed; advancing");
                    trace.fail_open = Some(match e {
                        GenerationError::Extraction { raw } => FailOpen::Extraction(raw),
                        other => FailOpen::GenerationBackend(other.to_string()),
                    });
                }
            }
        }

        let target = self.scenario.next_node(node.id.as_str(), Outcome::Advance)?;
        self.enter(state, target.clone())?;
        Ok(trace)
    }

    /// Moves to `target`, emitting its prompt and auto-advancing through statements.
    fn enter(&self, state: &mut SessionState, mut target: NodeId) -> Result<(), EngineError> {
        // A validated graph cannot loop through statements forever; bound the walk anyway.
        for _ in 0..=self.scenario.nodes().len() {
            let node = self.node(&target)?;
            state.current_node = node.id.clone();
            state.reprompt_count = 0;
            self.push(state, Origin::Scripted, node.prompt_text.clone(), None);
            match node.kind {
                NodeKind::Statement => {
                    target = self.scenario.next_node(node.id.as_str(), Outcome::Advance)?.clone();
                }
                NodeKind::Terminal => {
                    state.status = SessionStatus::Completed;
                    return Ok(());
                }
                NodeKind::Reflection | NodeKind::Decision => return Ok(()),
            }
        }
        Err(EngineError::UnknownNode(target))
    }

    fn push(&self, state: &mut SessionState, origin: Origin, text: String, option_id: Option<String>) -> usize {
        let index = state.transcript.len();
        state.transcript.push(Turn {
            index,
            speaker: origin.speaker(),
            origin,
            text,
            option_id,
            node_id: state.current_node.clone(),
            timestamp: self.config.clock.now(),
        });
        index
    }
}

/// Marks an active session aborted, keeping its transcript.
pub fn abort_session(mut state: SessionState) -> Result<SessionState, EngineError> {
    if !state.is_active() {
        return Err(EngineError::SessionNotActive(state.status));
    }
    state.status = SessionStatus::Aborted;
    Ok(state)
}
