//! Scenario-driven reflective dialogue with a model-backed relevance gate.

pub mod engine;
pub mod generation;
pub mod llm_backend;
pub mod metrics;
pub mod relevance;
pub mod replay;
pub mod scenario;
pub mod store;
pub mod transcript;

pub use engine::{Engine, EngineError, EngineOutcome, LearnerInput, SessionConfig, SessionState, SessionStatus};
pub use llm_backend::{CompletionBackend, ScriptedBackend, ScriptedPolicy};
pub use scenario::{load_scenario, validate, Scenario};
