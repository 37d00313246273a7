//! Chat-completion gateway.
//!
//! [`HttpGateway`] speaks the common chat-completions JSON shape
//! (`model`/`messages`/`temperature` in, `choices[0].message.content` out)
//! with retries on transient failures and a shared in-flight bound.
//! [`MockGateway`] answers from fixtures keyed by a hash of the message
//! contents, so complete pipeline runs are reproducible offline.

use std::collections::{HashMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::http::{HttpTransport, TransportError, UreqTransport};
use crate::limit::InFlightLimit;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GatewayError {
    #[error("request failed after {attempts} attempts: {last}")]
    Exhausted { attempts: usize, last: String },
    #[error("authentication error: {0}")]
    Auth(String),
    #[error("bad response: {0}")]
    BadResponse(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("no mock fixture for request {0}")]
    MissingFixture(String),
    #[error("gateway misconfigured: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub model: String,
}

impl ChatRequest {
    /// Single user message with default sampling settings.
    pub fn user(content: impl Into<String>) -> Self {
        ChatRequest {
            messages: vec![ChatMessage {
                role: Role::User,
                content: content.into(),
            }],
            temperature: 0.0,
            max_tokens: 1024,
            model: String::new(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        match self.messages.last() {
            None => return Err(GatewayError::InvalidRequest("no messages".into())),
            Some(m) if m.role != Role::User => {
                return Err(GatewayError::InvalidRequest(
                    "last message must come from the user".into(),
                ))
            }
            _ => {}
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} must be >= 0",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Fixture key: SHA-256 over roles and contents only, so fixtures survive
    /// model or sampling changes.
    pub fn fixture_key(&self) -> String {
        let mut h = Sha256::new();
        for m in &self.messages {
            h.update(m.role.as_str().as_bytes());
            h.update([0x1f]);
            h.update(m.content.as_bytes());
            h.update([0x1e]);
        }
        hex::encode(h.finalize())
    }
}

pub trait ChatGateway: Send + Sync {
    fn chat(&self, req: &ChatRequest) -> Result<String, GatewayError>;
}

impl<G: ChatGateway + ?Sized> ChatGateway for Arc<G> {
    fn chat(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        (**self).chat(req)
    }
}

impl<G: ChatGateway + ?Sized> ChatGateway for &G {
    fn chat(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        (**self).chat(req)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Http,
    #[default]
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub provider: ProviderKind,
    pub base_url: String,
    pub model: String,
    pub api_key_env: String,
    pub timeout_ms: u64,
    pub max_retries: usize,
    pub max_in_flight: usize,
    pub backoff_base_ms: u64,
    pub backoff_max_ms: u64,
    pub temperature: f64,
    pub max_tokens: u32,
    pub fixtures_dir: Option<PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            provider: ProviderKind::Mock,
            base_url: "http://localhost:8000/v1".into(),
            model: "gpt-4o-mini".into(),
            api_key_env: "COOPRAG_API_KEY".into(),
            timeout_ms: 60_000,
            max_retries: 3,
            max_in_flight: 8,
            backoff_base_ms: 500,
            backoff_max_ms: 20_000,
            temperature: 0.0,
            max_tokens: 1024,
            fixtures_dir: None,
        }
    }
}

impl GatewayConfig {
    pub fn request(&self, prompt: impl Into<String>) -> ChatRequest {
        ChatRequest {
            model: self.model.clone(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            ..ChatRequest::user(prompt)
        }
    }

    /// Builds the configured gateway.
    pub fn build(&self) -> Result<Box<dyn ChatGateway>, GatewayError> {
        match self.provider {
            ProviderKind::Http => Ok(Box::new(HttpGateway::from_config(self)?)),
            ProviderKind::Mock => {
                let dir = self.fixtures_dir.clone().ok_or_else(|| {
                    GatewayError::Config("mock provider needs fixtures_dir".into())
                })?;
                Ok(Box::new(MockGateway::from_dir(dir)))
            }
        }
    }
}

pub type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

pub struct HttpGateway {
    endpoint: String,
    api_key: String,
    transport: Arc<dyn HttpTransport>,
    limit: Arc<InFlightLimit>,
    max_retries: usize,
    backoff_base: Duration,
    backoff_max: Duration,
    sleeper: Sleeper,
}

impl HttpGateway {
    /// Reads the API key from the configured environment variable. Fails with
    /// [`GatewayError::Auth`] before any network traffic when it is unset.
    pub fn from_config(cfg: &GatewayConfig) -> Result<Self, GatewayError> {
        let transport = Arc::new(UreqTransport::new(Duration::from_millis(cfg.timeout_ms)));
        Self::with_transport(cfg, transport)
    }

    pub fn with_transport(
        cfg: &GatewayConfig,
        transport: Arc<dyn HttpTransport>,
    ) -> Result<Self, GatewayError> {
        let api_key = std::env::var(&cfg.api_key_env)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| {
                GatewayError::Auth(format!("environment variable {} is not set", cfg.api_key_env))
            })?;
        Ok(Self::with_key(cfg, api_key, transport))
    }

    pub fn with_key(cfg: &GatewayConfig, api_key: String, transport: Arc<dyn HttpTransport>) -> Self {
        HttpGateway {
            endpoint: format!("{}/chat/completions", cfg.base_url.trim_end_matches('/')),
            api_key,
            transport,
            limit: Arc::new(InFlightLimit::new(cfg.max_in_flight)),
            max_retries: cfg.max_retries,
            backoff_base: Duration::from_millis(cfg.backoff_base_ms),
            backoff_max: Duration::from_millis(cfg.backoff_max_ms),
            sleeper: Arc::new(std::thread::sleep),
        }
    }

    pub fn with_sleeper(mut self, sleeper: Sleeper) -> Self {
        self.sleeper = sleeper;
        self
    }

    fn backoff(&self, retry: usize) -> Duration {
        let factor = 1u32 << retry.min(16);
        self.backoff_base.saturating_mul(factor).min(self.backoff_max)
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<String, Attempt> {
        let headers = vec![("Authorization".to_string(), format!("Bearer {}", self.api_key))];
        let resp = {
            let _permit = self.limit.acquire();
            self.transport.post_json(&self.endpoint, &headers, body)
        };
        let resp = match resp {
            Ok(r) => r,
            Err(e @ TransportError::Timeout) | Err(e @ TransportError::Connect(_)) => {
                return Err(Attempt::Transient(e.to_string()))
            }
        };
        match resp.status {
            200..=299 => extract_content(&resp.body).map_err(Attempt::Fatal),
            401 | 403 => Err(Attempt::Fatal(GatewayError::Auth(format!(
                "HTTP {}",
                resp.status
            )))),
            408 | 429 | 500..=599 => Err(Attempt::Transient(format!("HTTP {}", resp.status))),
            status => Err(Attempt::Fatal(GatewayError::Http {
                status,
                body: resp.body,
            })),
        }
    }
}

enum Attempt {
    Transient(String),
    Fatal(GatewayError),
}

fn extract_content(body: &str) -> Result<String, GatewayError> {
    let v: serde_json::Value =
        serde_json::from_str(body).map_err(|e| GatewayError::BadResponse(e.to_string()))?;
    v.pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .ok_or_else(|| GatewayError::BadResponse("missing choices[0].message.content".into()))
}

impl ChatGateway for HttpGateway {
    fn chat(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        req.validate()?;
        let body = serde_json::json!({
            "model": req.model,
            "messages": req.messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        let mut last = String::new();
        for attempt in 0..=self.max_retries {
            if attempt > 0 {
                (self.sleeper)(self.backoff(attempt - 1));
            }
            match self.attempt(&body) {
                Ok(content) => return Ok(content),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Transient(msg)) => {
                    log::warn!("chat attempt {} failed: {msg}", attempt + 1);
                    last = msg;
                }
            }
        }
        Err(GatewayError::Exhausted {
            attempts: self.max_retries + 1,
            last,
        })
    }
}

/// One question's view of a gateway: builds requests from the configured
/// sampling settings and counts calls.
pub struct LlmSession<'a> {
    gateway: &'a dyn ChatGateway,
    settings: &'a GatewayConfig,
    calls: AtomicUsize,
}

impl<'a> LlmSession<'a> {
    pub fn new(gateway: &'a dyn ChatGateway, settings: &'a GatewayConfig) -> Self {
        LlmSession {
            gateway,
            settings,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn ask(&self, prompt: &str) -> Result<String, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.gateway.chat(&self.settings.request(prompt))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

/// Fixture-backed gateway: `<fixtures_dir>/<fixture_key>.txt` holds the reply.
#[derive(Debug, Default)]
pub struct MockGateway {
    entries: HashMap<String, String>,
    dir: Option<PathBuf>,
    calls: AtomicUsize,
}

impl MockGateway {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_dir(dir: impl Into<PathBuf>) -> Self {
        MockGateway {
            dir: Some(dir.into()),
            ..Self::default()
        }
    }

    pub fn insert(&mut self, req: &ChatRequest, response: impl Into<String>) {
        self.entries.insert(req.fixture_key(), response.into());
    }

    pub fn insert_prompt(&mut self, prompt: &str, response: impl Into<String>) {
        self.insert(&ChatRequest::user(prompt), response);
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn fixture_path(dir: &Path, req: &ChatRequest) -> PathBuf {
        dir.join(format!("{}.txt", req.fixture_key()))
    }

    pub fn write_fixture(dir: &Path, prompt: &str, response: &str) -> std::io::Result<PathBuf> {
        let path = Self::fixture_path(dir, &ChatRequest::user(prompt));
        std::fs::write(&path, response)?;
        Ok(path)
    }
}

impl ChatGateway for MockGateway {
    fn chat(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        req.validate()?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let key = req.fixture_key();
        if let Some(r) = self.entries.get(&key) {
            return Ok(r.clone());
        }
        if let Some(dir) = &self.dir {
            let path = dir.join(format!("{key}.txt"));
            if let Ok(text) = std::fs::read_to_string(&path) {
                return Ok(text);
            }
        }
        Err(GatewayError::MissingFixture(key))
    }
}

/// Replays a fixed sequence of replies regardless of the request and keeps
/// every request it saw.
#[derive(Debug, Default)]
pub struct ScriptedGateway {
    replies: Mutex<VecDeque<Result<String, GatewayError>>>,
    seen: Mutex<Vec<ChatRequest>>,
}

impl ScriptedGateway {
    pub fn new<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::with_results(replies.into_iter().map(|r| Ok(r.into())))
    }

    pub fn with_results<I>(replies: I) -> Self
    where
        I: IntoIterator<Item = Result<String, GatewayError>>,
    {
        ScriptedGateway {
            replies: Mutex::new(replies.into_iter().collect()),
            seen: Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.seen.lock().expect("lock").clone()
    }

    pub fn calls(&self) -> usize {
        self.seen.lock().expect("lock").len()
    }
}

impl ChatGateway for ScriptedGateway {
    fn chat(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        self.seen.lock().expect("lock").push(req.clone());
        self.replies
            .lock()
            .expect("lock")
            .pop_front()
            .unwrap_or_else(|| Err(GatewayError::MissingFixture("script exhausted".into())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::http::HttpResponse;

    struct Scripted {
        replies: Mutex<VecDeque<Result<HttpResponse, TransportError>>>,
        calls: AtomicUsize,
    }

    impl Scripted {
        fn new(replies: Vec<Result<HttpResponse, TransportError>>) -> Arc<Self> {
            Arc::new(Scripted {
                replies: Mutex::new(replies.into()),
                calls: AtomicUsize::new(0),
            })
        }
    }

    impl HttpTransport for Scripted {
        fn post_json(
            &self,
            _url: &str,
            headers: &[(String, String)],
            body: &serde_json::Value,
        ) -> Result<HttpResponse, TransportError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            assert_eq!(headers[0].1, "Bearer k");
            assert!(body["messages"].is_array());
            self.replies.lock().unwrap().pop_front().expect("script exhausted")
        }
    }

    fn status(code: u16, body: &str) -> Result<HttpResponse, TransportError> {
        Ok(HttpResponse {
            status: code,
            body: body.into(),
        })
    }

    const OK: &str = r#"{"choices":[{"message":{"role":"assistant","content":"hi"}}]}"#;

    fn gateway(t: Arc<Scripted>, retries: usize) -> HttpGateway {
        let cfg = GatewayConfig {
            max_retries: retries,
            ..GatewayConfig::default()
        };
        HttpGateway::with_key(&cfg, "k".into(), t).with_sleeper(Arc::new(|_| {}))
    }

    #[test]
    fn retries_transient_failures() {
        let t = Scripted::new(vec![status(500, ""), status(503, ""), status(200, OK)]);
        let g = gateway(t.clone(), 3);
        assert_eq!(g.chat(&ChatRequest::user("q")).unwrap(), "hi");
        assert_eq!(t.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn timeouts_and_429_are_transient() {
        let t = Scripted::new(vec![Err(TransportError::Timeout), status(429, ""), status(200, OK)]);
        assert_eq!(gateway(t, 2).chat(&ChatRequest::user("q")).unwrap(), "hi");
    }

    #[test]
    fn gives_up_after_cap() {
        let t = Scripted::new(vec![status(500, ""), status(500, ""), status(500, "")]);
        let err = gateway(t.clone(), 2).chat(&ChatRequest::user("q")).unwrap_err();
        assert!(matches!(err, GatewayError::Exhausted { attempts: 3, .. }));
        assert_eq!(t.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let t = Scripted::new(vec![status(400, "nope")]);
        let err = gateway(t.clone(), 3).chat(&ChatRequest::user("q")).unwrap_err();
        assert!(matches!(err, GatewayError::Http { status: 400, .. }));
        let t = Scripted::new(vec![status(401, "")]);
        assert!(matches!(
            gateway(t, 3).chat(&ChatRequest::user("q")),
            Err(GatewayError::Auth(_))
        ));
    }

    #[test]
    fn missing_content_is_bad_response() {
        let t = Scripted::new(vec![status(200, r#"{"choices":[]}"#)]);
        assert!(matches!(
            gateway(t, 0).chat(&ChatRequest::user("q")),
            Err(GatewayError::BadResponse(_))
        ));
    }

    #[test]
    fn missing_credential_fails_before_network() {
        let cfg = GatewayConfig {
            api_key_env: "COOPRAG_TEST_KEY_THAT_IS_NOT_SET".into(),
            ..GatewayConfig::default()
        };
        let t = Scripted::new(vec![]);
        let err = HttpGateway::with_transport(&cfg, t.clone()).err().unwrap();
        assert!(matches!(err, GatewayError::Auth(_)));
        assert_eq!(t.calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let cfg = GatewayConfig {
            backoff_base_ms: 100,
            backoff_max_ms: 350,
            ..GatewayConfig::default()
        };
        let g = HttpGateway::with_key(&cfg, "k".into(), Scripted::new(vec![]));
        assert_eq!(g.backoff(0), Duration::from_millis(100));
        assert_eq!(g.backoff(1), Duration::from_millis(200));
        assert_eq!(g.backoff(2), Duration::from_millis(350));
    }

    #[test]
    fn mock_looks_up_by_content_hash() {
        let mut m = MockGateway::new();
        m.insert_prompt("hello", "world");
        let mut req = ChatRequest::user("hello");
        req.model = "anything".into();
        req.temperature = 0.7;
        assert_eq!(m.chat(&req).unwrap(), "world");
        assert!(matches!(
            m.chat(&ChatRequest::user("other")),
            Err(GatewayError::MissingFixture(_))
        ));
        assert_eq!(m.calls(), 2);
    }

    #[test]
    fn mock_reads_fixture_dir() {
        let dir = tempfile::tempdir().unwrap();
        MockGateway::write_fixture(dir.path(), "p", "from disk").unwrap();
        let m = MockGateway::from_dir(dir.path());
        assert_eq!(m.chat(&ChatRequest::user("p")).unwrap(), "from disk");
    }

    #[test]
    fn request_validation() {
        let mut req = ChatRequest::user("x");
        req.messages[0].role = Role::Assistant;
        assert!(req.validate().is_err());
        let mut req = ChatRequest::user("x");
        req.max_tokens = 0;
        assert!(req.validate().is_err());
        assert!(ChatRequest {
            messages: vec![],
            ..ChatRequest::user("x")
        }
        .validate()
        .is_err());
    }
}
