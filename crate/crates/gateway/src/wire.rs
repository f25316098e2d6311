//! JSON text frames exchanged with chat clients.
//!
//! Every frame is `{"type": <kind>, "payload": {...}}`.

use reflect_core::engine::{InputMode, SessionStatus};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case")]
pub enum WireMessage {
    SessionStart(SessionStart),
    SystemMessage(SystemMessage),
    LearnerMessage(LearnerMessage),
    SessionEnd(SessionEnd),
    Error(ErrorPayload),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionStart {
    pub session_id: String,
    pub scenario_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireOption {
    pub option_id: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemMessage {
    pub text: String,
    pub node_id: String,
    pub input_mode: InputMode,
    /// Present exactly when `input_mode` is `options`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<WireOption>>,
    pub tts: bool,
}

/// Exactly one of the two fields is set; see [`LearnerMessage::reply`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerMessage {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub option_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LearnerReply {
    Text(String),
    Option(String),
}

impl LearnerMessage {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: Some(text.into()),
            option_id: None,
        }
    }

    pub fn option(option_id: impl Into<String>) -> Self {
        Self {
            text: None,
            option_id: Some(option_id.into()),
        }
    }

    pub fn reply(&self) -> Option<LearnerReply> {
        match (&self.text, &self.option_id) {
            (Some(t), None) => Some(LearnerReply::Text(t.clone())),
            (None, Some(o)) => Some(LearnerReply::Option(o.clone())),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionEnd {
    pub session_id: String,
    pub status: SessionStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    UnknownScenario,
    InputKindMismatch,
    UnknownOption,
    SessionNotActive,
    /// Not JSON, or a `learner_message` whose payload is unusable.
    MalformedFrame,
    /// A frame type this server does not know, or a binary frame.
    UnsupportedFrame,
    /// A known frame type that only the server sends.
    UnexpectedType,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub code: ErrorCode,
    pub message: String,
}

impl WireMessage {
    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        WireMessage::Error(ErrorPayload {
            code,
            message: message.into(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("wire messages serialize")
    }
}

const SERVER_TYPES: [&str; 4] = ["session_start", "system_message", "session_end", "error"];

/// Parses a client frame. Anything other than a well-formed learner message
/// comes back as the error frame to send.
pub fn parse_client_frame(text: &str) -> Result<LearnerReply, WireMessage> {
    let value: Value = serde_json::from_str(text)
        .map_err(|e| WireMessage::error(ErrorCode::MalformedFrame, format!("not JSON: {e}")))?;
    let kind = value
        .get("type")
        .and_then(Value::as_str)
        .ok_or_else(|| WireMessage::error(ErrorCode::MalformedFrame, "frame has no string `type`"))?;
    match kind {
        "learner_message" => {}
        k if SERVER_TYPES.contains(&k) => {
            return Err(WireMessage::error(
                ErrorCode::UnexpectedType,
                format!("`{k}` frames are sent by the server"),
            ))
        }
        k => {
            return Err(WireMessage::error(
                ErrorCode::UnsupportedFrame,
                format!("unknown frame type `{k}`"),
            ))
        }
    }
    let payload = value.get("payload").cloned().unwrap_or(Value::Null);
    let msg: LearnerMessage = serde_json::from_value(payload)
        .map_err(|e| WireMessage::error(ErrorCode::MalformedFrame, format!("bad learner_message payload: {e}")))?;
    msg.reply().ok_or_else(|| {
        WireMessage::error(
            ErrorCode::MalformedFrame,
            "learner_message needs exactly one of `text` or `option_id`",
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn system_message_layout() {
        let frame = WireMessage::SystemMessage(SystemMessage {
            text: "Do you want to change your goal?".into(),
            node_id: "goals_change".into(),
            input_mode: InputMode::Options,
            options: Some(vec![WireOption {
                option_id: "yes".into(),
                label: "Yes".into(),
            }]),
            tts: true,
        });
        assert_eq!(
            serde_json::to_value(&frame).unwrap(),
            json!({"type": "system_message", "payload": {
                "text": "Do you want to change your goal?", "node_id": "goals_change",
                "input_mode": "options", "options": [{"option_id": "yes", "label": "Yes"}], "tts": true}})
        );
    }

    #[test]
    fn open_prompt_omits_options() {
        let frame = WireMessage::SystemMessage(SystemMessage {
            text: "Why?".into(),
            node_id: "n".into(),
            input_mode: InputMode::Open,
            options: None,
            tts: false,
        });
        let v = serde_json::to_value(&frame).unwrap();
        assert!(v["payload"].get("options").is_none());
        assert_eq!(v["payload"]["input_mode"], "open");
    }

    #[test]
    fn error_and_end_layout() {
        assert_eq!(
            serde_json::to_value(WireMessage::error(ErrorCode::UnknownScenario, "no")).unwrap(),
            json!({"type": "error", "payload": {"code": "UNKNOWN_SCENARIO", "message": "no"}})
        );
        let end = WireMessage::SessionEnd(SessionEnd {
            session_id: "s".into(),
            status: SessionStatus::Completed,
        });
        assert_eq!(
            serde_json::to_value(end).unwrap(),
            json!({"type": "session_end", "payload": {"session_id": "s", "status": "completed"}})
        );
    }

    fn code(text: &str) -> ErrorCode {
        match parse_client_frame(text) {
            Err(WireMessage::Error(e)) => e.code,
            other => panic!("expected error frame, got {other:?}"),
        }
    }

    #[test]
    fn client_frames() {
        assert_eq!(
            parse_client_frame(r#"{"type":"learner_message","payload":{"text":"by coding"}}"#),
            Ok(LearnerReply::Text("by coding".into()))
        );
        assert_eq!(
            parse_client_frame(r#"{"type":"learner_message","payload":{"option_id":"yes"}}"#),
            Ok(LearnerReply::Option("yes".into()))
        );
        assert_eq!(code("nope"), ErrorCode::MalformedFrame);
        assert_eq!(code("[1,2]"), ErrorCode::MalformedFrame);
        assert_eq!(code(r#"{"type":"learner_message"}"#), ErrorCode::MalformedFrame);
        assert_eq!(code(r#"{"type":"learner_message","payload":{}}"#), ErrorCode::MalformedFrame);
        assert_eq!(
            code(r#"{"type":"learner_message","payload":{"text":"a","option_id":"b"}}"#),
            ErrorCode::MalformedFrame
        );
        assert_eq!(
            code(r#"{"type":"learner_message","payload":{"text":"a","extra":1}}"#),
            ErrorCode::MalformedFrame
        );
        assert_eq!(code(r#"{"type":"learner_message","payload":{"text":7}}"#), ErrorCode::MalformedFrame);
        assert_eq!(code(r#"{"type":"session_end","payload":{}}"#), ErrorCode::UnexpectedType);
        assert_eq!(code(r#"{"type":"ping"}"#), ErrorCode::UnsupportedFrame);
    }
}
