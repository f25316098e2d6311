//! Session lifecycle for one client connection, independent of the transport.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use reflect_core::engine::{abort_session, Engine, EngineError, InputMode, LearnerInput, SessionState, SessionStatus};
use reflect_core::llm_backend::CompletionBackend;
use reflect_core::store::{GateEvent, SessionHeader, SessionStore, SessionWriter};
use reflect_core::transcript::{Speaker, Turn};

use crate::wire::{
    parse_client_frame, ErrorCode, LearnerReply, SessionEnd, SessionStart, SystemMessage, WireMessage, WireOption,
};

pub const DEFAULT_IDLE_TIMEOUT: Duration = Duration::from_secs(15 * 60);

/// Why a session is being closed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloseReason {
    Disconnect,
    IdleTimeout,
    Shutdown,
}

/// Shared, immutable service state: the registered scenarios and the model backend.
pub struct Gateway {
    engines: BTreeMap<String, Engine>,
    default_scenario: Option<String>,
    backend: Arc<dyn CompletionBackend>,
    store: Option<SessionStore>,
    idle_timeout: Duration,
}

impl Gateway {
    pub fn new(backend: Arc<dyn CompletionBackend>) -> Self {
        Self {
            engines: BTreeMap::new(),
            default_scenario: None,
            backend,
            store: None,
            idle_timeout: DEFAULT_IDLE_TIMEOUT,
        }
    }

    /// Registers a scenario. The first one registered is the default.
    pub fn with_engine(mut self, engine: Engine) -> Self {
        let id = engine.scenario().id.clone();
        self.default_scenario.get_or_insert_with(|| id.clone());
        self.engines.insert(id, engine);
        self
    }

    pub fn with_store(mut self, store: SessionStore) -> Self {
        self.store = Some(store);
        self
    }

    pub fn with_idle_timeout(mut self, idle: Duration) -> Self {
        self.idle_timeout = idle;
        self
    }

    pub fn idle_timeout(&self) -> Duration {
        self.idle_timeout
    }

    pub fn scenario_ids(&self) -> impl Iterator<Item = &str> {
        self.engines.keys().map(String::as_str)
    }

    /// Starts a session on `scenario_id` (or the default scenario). The
    /// returned frames are to be sent in order; if the scenario is unknown
    /// they hold a single error and the connection has no session.
    pub fn open(self: &Arc<Self>, scenario_id: Option<&str>) -> (Connection, Vec<WireMessage>) {
        let mut conn = Connection {
            gateway: Arc::clone(self),
            live: None,
        };
        let requested = scenario_id.or(self.default_scenario.as_deref()).unwrap_or_default();
        let Some(engine) = self.engines.get(requested) else {
            let frame = WireMessage::error(ErrorCode::UnknownScenario, format!("no scenario `{requested}`"));
            return (conn, vec![frame]);
        };

        let session_id = uuid::Uuid::new_v4().to_string();
        let out = match engine.start_session(session_id.clone()) {
            Ok(out) => out,
            Err(e) => return (conn, vec![WireMessage::error(ErrorCode::Internal, e.to_string())]),
        };
        let writer = self.store.as_ref().and_then(|store| {
            let header = SessionHeader {
                session_id: session_id.clone(),
                scenario_id: engine.scenario().id.clone(),
                started_at: engine.config().clock.now(),
            };
            store
                .writer(header)
                .inspect_err(|e| tracing::error!(error = %e, "cannot store session"))
                .ok()
        });
        tracing::info!(session = %session_id, scenario = %requested, "session started");

        let mut frames = vec![WireMessage::SessionStart(SessionStart {
            session_id,
            scenario_id: engine.scenario().id.clone(),
        })];
        let mut live = Live {
            engine: engine.clone(),
            state: out.new_state,
            writer,
        };
        live.persist(0, None);
        frames.extend(out.emitted.iter().map(|t| live.frame(t)));
        frames.extend(live.end_frame());
        conn.live = Some(live);
        (conn, frames)
    }
}

struct Live {
    engine: Engine,
    state: SessionState,
    writer: Option<SessionWriter>,
}

impl Live {
    fn frame(&self, turn: &Turn) -> WireMessage {
        let node = self.engine.scenario().node(turn.node_id.as_str());
        let input_mode = node.map_or(InputMode::None, |n| InputMode::for_kind(n.kind));
        let options = (input_mode == InputMode::Options).then(|| {
            node.into_iter()
                .flat_map(|n| n.options.iter())
                .map(|o| WireOption {
                    option_id: o.option_id.clone(),
                    label: o.label.clone(),
                })
                .collect()
        });
        WireMessage::SystemMessage(SystemMessage {
            text: turn.text.clone(),
            node_id: turn.node_id.to_string(),
            input_mode,
            options,
            tts: node.is_some_and(|n| n.tts_enabled),
        })
    }

    /// The prompt the learner is currently answering, for re-sending after a bad reply.
    fn current_prompt(&self) -> Option<WireMessage> {
        self.state
            .transcript
            .iter()
            .rev()
            .find(|t| t.speaker == Speaker::System)
            .map(|t| self.frame(t))
    }

    fn end_frame(&mut self) -> Option<WireMessage> {
        if self.state.is_active() {
            return None;
        }
        self.finish();
        Some(WireMessage::SessionEnd(SessionEnd {
            session_id: self.state.session_id.clone(),
            status: self.state.status,
        }))
    }

    /// Appends turns from `from` onward; the gate event goes with the last of them
    /// so that a generated turn it references is already written.
    fn persist(&mut self, from: usize, event: Option<GateEvent>) {
        let Some(writer) = self.writer.as_mut() else { return };
        let turns = &self.state.transcript[from..];
        for (i, turn) in turns.iter().enumerate() {
            let ev = if i + 1 == turns.len() { event.as_ref() } else { None };
            if let Err(e) = writer.append_turn(turn, ev) {
                tracing::error!(session = %self.state.session_id, error = %e, "transcript write failed");
                self.writer = None;
                return;
            }
        }
    }

    fn finish(&mut self) {
        if let Some(writer) = self.writer.as_mut() {
            if let Err(e) = writer.finish(self.state.status, self.engine.config().clock.now()) {
                tracing::error!(session = %self.state.session_id, error = %e, "transcript close failed");
            }
        }
    }
}

/// One client's view of the gateway. Frames for a session are handled one at
/// a time by whoever owns the connection.
pub struct Connection {
    gateway: Arc<Gateway>,
    live: Option<Live>,
}

impl Connection {
    pub fn session_id(&self) -> Option<&str> {
        self.live.as_ref().map(|l| l.state.session_id.as_str())
    }

    pub fn state(&self) -> Option<&SessionState> {
        self.live.as_ref().map(|l| &l.state)
    }

    /// True once there is nothing left to talk about: no session, or a
    /// session that has ended.
    pub fn is_finished(&self) -> bool {
        self.live.as_ref().is_none_or(|l| !l.state.is_active())
    }

    /// Handles one text frame from the client and returns the frames to send back.
    pub async fn handle_text(&mut self, text: &str) -> Vec<WireMessage> {
        let reply = match parse_client_frame(text) {
            Ok(reply) => reply,
            Err(frame) => return vec![frame],
        };
        let Some(live) = self.live.as_mut() else {
            return vec![WireMessage::error(ErrorCode::SessionNotActive, "no session on this connection")];
        };
        let input = match reply {
            LearnerReply::Text(t) => LearnerInput::OpenText(t),
            LearnerReply::Option(o) => LearnerInput::Option(o),
        };
        let from = live.state.transcript.len();
        let backend = Arc::clone(&self.gateway.backend);
        match live.engine.handle_learner_input(&live.state, &input, &*backend).await {
            Ok(out) => {
                live.state = out.new_state;
                live.persist(from, out.gate_trace.as_ref().map(GateEvent::from));
                let mut frames: Vec<WireMessage> = out.emitted.iter().map(|t| live.frame(t)).collect();
                frames.extend(live.end_frame());
                frames
            }
            Err(e) => {
                let code = match e {
                    EngineError::InputKindMismatch { .. } => ErrorCode::InputKindMismatch,
                    EngineError::UnknownOption { .. } => ErrorCode::UnknownOption,
                    EngineError::SessionNotActive(_) => ErrorCode::SessionNotActive,
                    _ => ErrorCode::Internal,
                };
                let mut frames = vec![WireMessage::error(code, e.to_string())];
                if matches!(code, ErrorCode::InputKindMismatch | ErrorCode::UnknownOption) {
                    frames.extend(live.current_prompt());
                }
                frames
            }
        }
    }

    /// A binary or otherwise unusable transport frame.
    pub fn unsupported_frame(&self) -> WireMessage {
        WireMessage::error(ErrorCode::UnsupportedFrame, "only JSON text frames are accepted")
    }

    /// Aborts an active session and records its final status. Safe to call
    /// repeatedly. Returns the `session_end` frame when this call ended the session.
    pub fn close(&mut self, reason: CloseReason) -> Option<WireMessage> {
        let live = self.live.as_mut()?;
        if !live.state.is_active() {
            live.finish();
            return None;
        }
        match abort_session(live.state.clone()) {
            Ok(state) => live.state = state,
            Err(e) => {
                tracing::error!(error = %e, "abort failed");
                return None;
            }
        }
        tracing::info!(session = %live.state.session_id, ?reason, "session aborted");
        live.end_frame()
    }

    pub fn status(&self) -> Option<SessionStatus> {
        self.live.as_ref().map(|l| l.state.status)
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        self.close(CloseReason::Disconnect);
    }
}
