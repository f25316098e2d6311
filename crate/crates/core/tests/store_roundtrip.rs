use std::sync::Arc;

use futures::executor::block_on;
use proptest::prelude::*;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reflect_core::engine::{Engine, InputMode, LearnerInput, SessionConfig, SessionStatus};
use reflect_core::llm_backend::{Purpose, ScriptedBackend, ScriptedPolicy};
use reflect_core::metrics::compute_metrics;
use reflect_core::scenario::load_scenario;
use reflect_core::store::{GateEvent, SessionHeader, SessionStore, TranscriptRecord};
use reflect_core::transcript::{FixedClock, Origin};

const DOC: &str = include_str!("../../../fixtures/reflection_scenario.json");
const ANSWERS: [&str; 6] = ["by coding", "", "I made it wave its arms", "what?", "because", "dance"];

fn engine() -> Engine {
    let t0 = chrono::DateTime::parse_from_rfc3339("2024-07-15T09:00:00Z").unwrap().to_utc();
    let config = SessionConfig {
        clock: Arc::new(FixedClock(t0)),
        ..SessionConfig::default()
    };
    Engine::new(Arc::new(load_scenario(DOC).unwrap()), config).unwrap()
}

fn backend() -> ScriptedBackend {
    ScriptedBackend::new(
        ScriptedPolicy::new("YES")
            .rule(Some(Purpose::Relevance), Some("by coding"), "NO")
            .rule(Some(Purpose::Relevance), Some("dance"), "NO")
            .rule(Some(Purpose::Interrogative), Some("?"), "YES")
            .rule(Some(Purpose::Interrogative), None, "NO")
            .rule(Some(Purpose::Generation), None, "Can you tell me more about that?"),
    )
}

/// Runs one random session, writing it to `store` the way the gateway does,
/// and returns the in-memory record.
fn random_session(id: &str, seed: u64, store: &SessionStore) -> TranscriptRecord {
    let engine = engine();
    let backend = backend();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = engine.start_session(id).unwrap();
    let started = out.new_state.transcript[0].timestamp;
    let mut writer = store
        .writer(SessionHeader {
            session_id: id.into(),
            scenario_id: out.new_state.scenario_id.clone(),
            started_at: started,
        })
        .unwrap();
    for t in &out.new_state.transcript {
        writer.append_turn(t, None).unwrap();
    }
    let mut state = out.new_state;
    let mut events = Vec::new();
    let steps = rng.random_range(0..40);
    for _ in 0..steps {
        if !state.is_active() {
            break;
        }
        let node = engine.scenario().node(state.current_node.as_str()).unwrap();
        let input = match InputMode::for_kind(node.kind) {
            InputMode::Options => LearnerInput::Option(node.options.choose(&mut rng).unwrap().option_id.clone()),
            _ => LearnerInput::OpenText(ANSWERS.choose(&mut rng).unwrap().to_string()),
        };
        let from = state.transcript.len();
        let out = block_on(engine.handle_learner_input(&state, &input, &backend)).unwrap();
        state = out.new_state;
        let event = out.gate_trace.as_ref().map(GateEvent::from);
        let new = &state.transcript[from..];
        for (i, t) in new.iter().enumerate() {
            writer.append_turn(t, if i + 1 == new.len() { event.as_ref() } else { None }).unwrap();
        }
        events.extend(event);
    }
    if state.is_active() && rng.random_bool(0.5) {
        state = reflect_core::engine::abort_session(state).unwrap();
    }
    writer.finish(state.status, started).unwrap();
    TranscriptRecord::from_state(&state, started, events)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn stored_sessions_reload_with_identical_metrics(seeds in proptest::collection::vec(any::<u64>(), 1..5)) {
        let dir = tempfile::tempdir().unwrap();
        let store = SessionStore::open(dir.path()).unwrap();
        let memory: Vec<TranscriptRecord> = seeds
            .iter()
            .enumerate()
            .map(|(i, &seed)| random_session(&format!("s{i:02}"), seed, &store))
            .collect();
        let loaded = store.load_all().unwrap();
        prop_assert_eq!(&loaded, &memory);
        prop_assert_eq!(compute_metrics(&loaded), compute_metrics(&memory));

        for record in &loaded {
            let generated = record.turns.iter().filter(|t| t.origin == Origin::Generated).count();
            let with_followup = record.gate_events.iter().filter(|e| e.generated_turn_index.is_some()).count();
            prop_assert_eq!(generated, with_followup);
        }
    }

    #[test]
    fn metrics_ignore_session_order(seeds in proptest::collection::vec(any::<u64>(), 2..6), shuffle in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let store = SessionStore::open(dir.path()).unwrap();
        let records: Vec<TranscriptRecord> = seeds
            .iter()
            .enumerate()
            .map(|(i, &seed)| random_session(&format!("p{i}"), seed, &store))
            .collect();
        let mut shuffled = records.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle));
        prop_assert_eq!(compute_metrics(&records), compute_metrics(&shuffled));
    }
}

#[test]
fn aborted_session_counts_its_partial_turns() {
    let dir = tempfile::tempdir().unwrap();
    let store = SessionStore::open(dir.path()).unwrap();
    let records = store.load_all().unwrap();
    assert!(records.is_empty());

    let fixture = SessionStore::open(concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/metrics_store")).unwrap();
    let s02 = fixture.load("s02").unwrap();
    assert_eq!(s02.status, SessionStatus::Aborted);
    let report = compute_metrics(std::slice::from_ref(&s02));
    assert_eq!(report.sessions[0].total_turns, 17);
    assert_eq!(report.sessions[0].status, SessionStatus::Aborted);
}
