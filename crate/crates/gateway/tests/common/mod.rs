#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use reflect_core::engine::{Engine, SessionConfig};
use reflect_core::llm_backend::{CompletionBackend, ScriptedBackend, ScriptedPolicy};
use reflect_core::scenario::load_scenario;
use reflect_gateway::Gateway;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

pub fn engine() -> Engine {
    let doc = std::fs::read_to_string(fixture("reflection_scenario.json")).unwrap();
    Engine::new(Arc::new(load_scenario(&doc).unwrap()), SessionConfig::default()).unwrap()
}

pub fn golden_backend() -> Arc<dyn CompletionBackend> {
    let policy = std::fs::read_to_string(fixture("golden_policy.json")).unwrap();
    Arc::new(ScriptedBackend::new(ScriptedPolicy::from_json(&policy).unwrap()))
}

pub fn gateway() -> Gateway {
    Gateway::new(golden_backend()).with_engine(engine())
}

pub const PUBLISHED_FOLLOWUP: &str = "That's a great starting point! What specific coding skills or tools do you think you'll use to make your robot walk and talk?";
