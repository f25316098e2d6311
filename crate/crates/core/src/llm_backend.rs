//! Completion backends: an HTTP client for chat-completions endpoints and a
//! deterministic scripted mock used for tests and replay.

use std::net::IpAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::{Host, Url};

/// Which pipeline stage a request belongs to. Not sent over the wire; lets
/// scripted policies and test wrappers tell the calls apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Relevance,
    Interrogative,
    Generation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub purpose: Purpose,
    pub system_text: String,
    pub user_text: String,
    pub max_tokens: u32,
    pub temperature: f32,
    pub timeout: Duration,
}

impl CompletionRequest {
    pub fn check(&self) -> Result<(), BackendError> {
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be at least 1".into()));
        }
        if self.timeout.is_zero() {
            return Err(BackendError::InvalidRequest("timeout must be positive".into()));
        }
        // NaN fails too
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest("temperature must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-stage sampling parameters shared by the relevance and generation calls.
#[derive(Debug, Clone, PartialEq)]
pub struct CallParams {
    pub max_tokens: u32,
    pub temperature: f32,
    pub timeout: Duration,
}

impl CallParams {
    /// Short replies (a single YES/NO token).
    pub fn verdict() -> Self {
        Self {
            max_tokens: 4,
            temperature: 0.0,
            timeout: Duration::from_secs(20),
        }
    }

    pub fn followup() -> Self {
        Self {
            max_tokens: 96,
            temperature: 0.0,
            timeout: Duration::from_secs(30),
        }
    }

    pub fn request(&self, purpose: Purpose, system_text: String, user_text: String) -> CompletionRequest {
        CompletionRequest {
            purpose,
            system_text,
            user_text,
            max_tokens: self.max_tokens,
            temperature: self.temperature,
            timeout: self.timeout,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendErrorKind {
    Timeout,
    Protocol,
    Remote,
    Config,
}

#[derive(Debug, Clone, Error)]
pub enum BackendError {
    /// No reply within the deadline, or the endpoint could not be reached.
    #[error("backend timed out: {0}")]
    Timeout(String),
    #[error("backend protocol error: {0}")]
    Protocol(String),
    #[error("backend returned status {status}: {body}")]
    Remote { status: u16, body: String },
    #[error("backend misconfigured: {0}")]
    Config(String),
    #[error("invalid completion request: {0}")]
    InvalidRequest(String),
}

impl BackendError {
    pub fn kind(&self) -> BackendErrorKind {
        match self {
            BackendError::Timeout(_) => BackendErrorKind::Timeout,
            BackendError::Protocol(_) => BackendErrorKind::Protocol,
            BackendError::Remote { .. } => BackendErrorKind::Remote,
            BackendError::Config(_) | BackendError::InvalidRequest(_) => BackendErrorKind::Config,
        }
    }
}

#[async_trait]
pub trait CompletionBackend: Send + Sync {
    async fn complete(&self, req: &CompletionRequest) -> Result<String, BackendError>;
}

#[async_trait]
impl<B: CompletionBackend + ?Sized> CompletionBackend for Arc<B> {
    async fn complete(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        (**self).complete(req).await
    }
}

#[async_trait]
impl<B: CompletionBackend + ?Sized> CompletionBackend for &B {
    async fn complete(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        (**self).complete(req).await
    }
}

// ---------------------------------------------------------------------------
// Scripted backend
// ---------------------------------------------------------------------------

/// How a rule matches `user_text`: a bare string is a substring test,
/// `{"regex": "..."}` a pattern search.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TextMatch {
    Contains(String),
    Regex {
        #[serde(with = "serde_regex")]
        regex: Regex,
    },
}

impl TextMatch {
    pub fn is_match(&self, text: &str) -> bool {
        match self {
            TextMatch::Contains(needle) => text.contains(needle.as_str()),
            TextMatch::Regex { regex } => regex.is_match(text),
        }
    }
}

mod serde_regex {
    use regex::Regex;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(re: &Regex, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(re.as_str())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Regex, D::Error> {
        let pattern = String::deserialize(d)?;
        Regex::new(&pattern).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedRule {
    /// Restricts the rule to one stage; absent matches every stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<Purpose>,
    /// Absent matches any text.
    #[serde(default, rename = "match", skip_serializing_if = "Option::is_none")]
    pub matcher: Option<TextMatch>,
    pub reply: String,
}

impl ScriptedRule {
    fn applies(&self, req: &CompletionRequest) -> bool {
        self.stage.is_none_or(|s| s == req.purpose)
            && self.matcher.as_ref().is_none_or(|m| m.is_match(&req.user_text))
    }
}

/// Ordered rules; the first match wins and `default_reply` covers the rest.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedPolicy {
    #[serde(default)]
    pub rules: Vec<ScriptedRule>,
    pub default_reply: String,
}

impl ScriptedPolicy {
    pub fn new(default_reply: impl Into<String>) -> Self {
        Self {
            rules: Vec::new(),
            default_reply: default_reply.into(),
        }
    }

    pub fn rule(mut self, stage: Option<Purpose>, matcher: Option<&str>, reply: impl Into<String>) -> Self {
        self.rules.push(ScriptedRule {
            stage,
            matcher: matcher.map(|m| TextMatch::Contains(m.to_owned())),
            reply: reply.into(),
        });
        self
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn reply_for(&self, req: &CompletionRequest) -> &str {
        self.rules
            .iter()
            .find(|r| r.applies(req))
            .map_or(self.default_reply.as_str(), |r| r.reply.as_str())
    }
}

/// Answers from a [`ScriptedPolicy`]; never touches the network.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    policy: ScriptedPolicy,
}

impl ScriptedBackend {
    pub fn new(policy: ScriptedPolicy) -> Self {
        Self { policy }
    }

    pub fn policy(&self) -> &ScriptedPolicy {
        &self.policy
    }
}

#[async_trait]
impl CompletionBackend for ScriptedBackend {
    async fn complete(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        req.check()?;
        Ok(self.policy.reply_for(req).to_owned())
    }
}

/// Wraps a backend and keeps a copy of every request and reply.
#[derive(Debug, Default)]
pub struct RecordingBackend<B> {
    inner: B,
    log: Mutex<Vec<(CompletionRequest, Result<String, BackendError>)>>,
}

impl<B> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> Vec<(CompletionRequest, Result<String, BackendError>)> {
        self.log.lock().expect("recording lock poisoned").clone()
    }

    pub fn call_count(&self) -> usize {
        self.log.lock().expect("recording lock poisoned").len()
    }

    pub fn purposes(&self) -> Vec<Purpose> {
        self.log
            .lock()
            .expect("recording lock poisoned")
            .iter()
            .map(|(r, _)| r.purpose)
            .collect()
    }

    pub fn clear(&self) {
        self.log.lock().expect("recording lock poisoned").clear();
    }
}

#[async_trait]
impl<B: CompletionBackend> CompletionBackend for RecordingBackend<B> {
    async fn complete(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        let result = self.inner.complete(req).await;
        self.log
            .lock()
            .expect("recording lock poisoned")
            .push((req.clone(), result.clone()));
        result
    }
}

// ---------------------------------------------------------------------------
// HTTP backend
// ---------------------------------------------------------------------------

pub const ENV_ENDPOINT_URL: &str = "LLM_ENDPOINT_URL";
pub const ENV_MODEL_NAME: &str = "LLM_MODEL_NAME";
pub const ENV_TIMEOUT_MS: &str = "LLM_TIMEOUT_MS";

#[derive(Debug, Clone)]
pub struct HttpBackendConfig {
    pub endpoint: Url,
    pub model: String,
    /// Overrides per-request timeouts when set.
    pub timeout: Option<Duration>,
    /// Permit endpoints that are not on the loopback interface.
    pub allow_remote: bool,
}

impl HttpBackendConfig {
    pub fn new(endpoint: &str) -> Result<Self, BackendError> {
        let endpoint = Url::parse(endpoint).map_err(|e| BackendError::Config(format!("bad endpoint url: {e}")))?;
        Ok(Self {
            endpoint,
            model: "default".to_owned(),
            timeout: None,
            allow_remote: false,
        })
    }

    /// Reads `LLM_ENDPOINT_URL`, `LLM_MODEL_NAME` and `LLM_TIMEOUT_MS`.
    /// Returns `Ok(None)` when no endpoint is configured.
    pub fn from_env() -> Result<Option<Self>, BackendError> {
        let Ok(endpoint) = std::env::var(ENV_ENDPOINT_URL) else {
            return Ok(None);
        };
        let mut cfg = Self::new(&endpoint)?;
        if let Ok(model) = std::env::var(ENV_MODEL_NAME) {
            cfg.model = model;
        }
        if let Ok(ms) = std::env::var(ENV_TIMEOUT_MS) {
            let ms: u64 = ms
                .parse()
                .map_err(|_| BackendError::Config(format!("{ENV_TIMEOUT_MS} must be an integer")))?;
            cfg.timeout = Some(Duration::from_millis(ms));
        }
        Ok(Some(cfg))
    }
}

pub fn is_loopback(url: &Url) -> bool {
    match url.host() {
        Some(Host::Domain(d)) => d.eq_ignore_ascii_case("localhost"),
        Some(Host::Ipv4(ip)) => IpAddr::V4(ip).is_loopback(),
        Some(Host::Ipv6(ip)) => IpAddr::V6(ip).is_loopback(),
        None => false,
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 2],
    max_tokens: u32,
    temperature: f32,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Deserialize)]
struct ChatReply {
    content: String,
}

/// Client for an endpoint speaking the chat-completions wire shape.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    client: reqwest::Client,
    config: HttpBackendConfig,
}

impl HttpBackend {
    /// Refuses non-loopback endpoints unless `allow_remote` is set.
    pub fn new(config: HttpBackendConfig) -> Result<Self, BackendError> {
        if !matches!(config.endpoint.scheme(), "http" | "https") {
            return Err(BackendError::Config(format!(
                "unsupported scheme `{}`",
                config.endpoint.scheme()
            )));
        }
        if !config.allow_remote && !is_loopback(&config.endpoint) {
            return Err(BackendError::Config(format!(
                "endpoint {} is not on loopback; set the allow-remote flag to use it",
                config.endpoint
            )));
        }
        let client = reqwest::Client::builder()
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(Self { client, config })
    }

    pub fn config(&self) -> &HttpBackendConfig {
        &self.config
    }

    async fn post_once(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        let body = ChatRequest {
            model: &self.config.model,
            messages: [
                ChatMessage {
                    role: "system",
                    content: &req.system_text,
                },
                ChatMessage {
                    role: "user",
                    content: &req.user_text,
                },
            ],
            max_tokens: req.max_tokens,
            temperature: req.temperature,
        };
        let timeout = self.config.timeout.unwrap_or(req.timeout);
        let response = self
            .client
            .post(self.config.endpoint.clone())
            .timeout(timeout)
            .json(&body)
            .send()
            .await
            .map_err(classify_transport)?;
        let status = response.status();
        if !status.is_success() {
            let body = response.text().await.unwrap_or_default();
            return Err(BackendError::Remote {
                status: status.as_u16(),
                body: body.chars().take(512).collect(),
            });
        }
        let bytes = response.bytes().await.map_err(classify_transport)?;
        let parsed: ChatResponse =
            serde_json::from_slice(&bytes).map_err(|e| BackendError::Protocol(format!("bad response body: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| BackendError::Protocol("response has no choices".into()))
    }
}

fn classify_transport(e: reqwest::Error) -> BackendError {
    if e.is_timeout() || e.is_connect() {
        BackendError::Timeout(e.to_string())
    } else {
        BackendError::Protocol(e.to_string())
    }
}

#[async_trait]
impl CompletionBackend for HttpBackend {
    async fn complete(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        req.check()?;
        match self.post_once(req).await {
            Err(BackendError::Timeout(first)) => {
                tracing::warn!(error = %first, "completion timed out; retrying once");
                self.post_once(req).await
            }
            other => other,
        }
    }
}
