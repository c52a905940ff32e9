//! Model backends.
//!
//! Wire contract for the HTTP backend: `POST endpoint_url` with body
//! `{"prompt": "<text>"}` and `Authorization: Bearer <token>` (token read from
//! the environment variable named in the config); the response body must be
//! `{"text": "<completion>"}`. Prompt text and tokens are never logged.

use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;
use tracing::{debug, warn};

use crate::corpus::Label;
use crate::profiler::normalize_text;
use crate::promptkit::RenderedPrompt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BackendKind {
    #[serde(alias = "http")]
    Http,
    #[serde(alias = "mock")]
    Mock,
}

impl BackendKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::Http => "HTTP",
            BackendKind::Mock => "MOCK",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    pub lexicon: Vec<String>,
    #[serde(default = "default_match_decision")]
    pub decision_if_match: Label,
}

fn default_match_decision() -> Label {
    Label::Violating
}

impl MockRule {
    pub fn default_decision(&self) -> Label {
        self.decision_if_match.other()
    }
}

impl Default for MockRule {
    fn default() -> Self {
        Self {
            lexicon: Vec::new(),
            decision_if_match: Label::Violating,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint_url: Option<String>,
    pub auth_token_env_var: Option<String>,
    /// Per-attempt timeout.
    pub timeout_ms: u64,
    pub max_retries: u32,
    /// Base delay before the first retry; doubles on each further retry.
    pub retry_backoff_ms: u64,
    pub max_in_flight: usize,
    pub mock: MockRule,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint_url: None,
            auth_token_env_var: None,
            timeout_ms: 60_000,
            max_retries: 2,
            retry_backoff_ms: 500,
            max_in_flight: 8,
            mock: MockRule::default(),
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.kind == BackendKind::Http && self.endpoint_url.as_deref().is_none_or(str::is_empty) {
            return Err(GatewayError::Config("HTTP backend requires endpoint_url".into()));
        }
        if self.max_in_flight == 0 {
            return Err(GatewayError::Config("max_in_flight must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum GatewayError {
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("backend returned HTTP {status}")]
    Http { status: u16 },
    #[error("backend request timed out")]
    Timeout,
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: Box<GatewayError> },
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("backend misconfigured: {0}")]
    Config(String),
}

impl GatewayError {
    pub fn code(&self) -> &'static str {
        match self {
            GatewayError::Unreachable(_) => "BackendUnreachable",
            GatewayError::Http { .. } => "BackendHttpError",
            GatewayError::Timeout => "Timeout",
            GatewayError::RetriesExhausted { .. } => "RetriesExhausted",
            GatewayError::MalformedResponse(_) => "MalformedResponse",
            GatewayError::Config(_) => "BackendConfig",
        }
    }

    fn is_transient(&self) -> bool {
        match self {
            GatewayError::Unreachable(_) | GatewayError::Timeout => true,
            GatewayError::Http { status } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// Serializable form of a [`GatewayError`] for run logs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendFailure {
    pub code: String,
    pub message: String,
}

impl From<&GatewayError> for BackendFailure {
    fn from(e: &GatewayError) -> Self {
        Self {
            code: e.code().to_string(),
            message: e.to_string(),
        }
    }
}

#[async_trait]
pub trait Backend: Send + Sync {
    fn kind(&self) -> BackendKind;

    /// One logical completion, including any retries.
    async fn complete(&self, prompt: &RenderedPrompt) -> Result<String, GatewayError>;
}

fn tokens(s: &str) -> Vec<String> {
    normalize_text(s)
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Keyword mock. A lexicon entry matches when its tokens occur as a
/// contiguous run of tokens in the normalized prompt text.
#[derive(Debug, Clone)]
pub struct MockBackend {
    rule: MockRule,
    lexicon: Vec<(String, Vec<String>)>,
}

impl MockBackend {
    pub fn new(rule: MockRule) -> Self {
        let lexicon = rule
            .lexicon
            .iter()
            .map(|entry| (normalize_text(entry), tokens(entry)))
            .filter(|(_, t)| !t.is_empty())
            .collect();
        Self { rule, lexicon }
    }

    pub fn matched_term(&self, text: &str) -> Option<&str> {
        let prompt = tokens(text);
        self.lexicon
            .iter()
            .find(|(_, needle)| prompt.windows(needle.len()).any(|w| w == needle.as_slice()))
            .map(|(entry, _)| entry.as_str())
    }

    pub fn respond(&self, text: &str) -> String {
        let matched = self.matched_term(text);
        let decision = match matched {
            Some(_) => self.rule.decision_if_match,
            None => self.rule.default_decision(),
        };
        let rationale = match matched {
            Some(term) => format!("Matched lexicon term {term:?}."),
            None => "No lexicon term matched.".to_string(),
        };
        format!(
            "SUMMARY: Mock summary of a {}-character advertiser prompt.\n\
             PRODUCTS: Not determined by the mock backend.\n\
             DECISION: {decision}\n\
             RATIONALE: {rationale}\n",
            text.chars().count()
        )
    }
}

#[async_trait]
impl Backend for MockBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Mock
    }

    async fn complete(&self, prompt: &RenderedPrompt) -> Result<String, GatewayError> {
        Ok(self.respond(&prompt.text))
    }
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct CompletionResponse {
    text: String,
}

pub struct HttpBackend {
    client: reqwest::Client,
    endpoint: String,
    token: Option<String>,
    max_retries: u32,
    backoff: Duration,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("endpoint", &self.endpoint)
            .field("max_retries", &self.max_retries)
            .finish_non_exhaustive()
    }
}

impl HttpBackend {
    pub fn new(config: &BackendConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let endpoint = config.endpoint_url.clone().unwrap_or_default();
        let token = match &config.auth_token_env_var {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| GatewayError::Config(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let client = reqwest::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        Ok(Self {
            client,
            endpoint,
            token,
            max_retries: config.max_retries,
            backoff: Duration::from_millis(config.retry_backoff_ms),
        })
    }

    async fn attempt(&self, text: &str) -> Result<String, GatewayError> {
        let mut req = self
            .client
            .post(&self.endpoint)
            .json(&CompletionRequest { prompt: text });
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().await.map_err(classify_reqwest)?;
        let status = resp.status();
        if !status.is_success() {
            return Err(GatewayError::Http {
                status: status.as_u16(),
            });
        }
        let body: CompletionResponse = resp.json().await.map_err(|e| {
            if e.is_timeout() {
                GatewayError::Timeout
            } else {
                GatewayError::MalformedResponse("expected {\"text\": string}".into())
            }
        })?;
        Ok(body.text)
    }
}

fn classify_reqwest(e: reqwest::Error) -> GatewayError {
    if e.is_timeout() {
        GatewayError::Timeout
    } else {
        // reqwest errors do not carry the request body, so this is safe to surface.
        GatewayError::Unreachable(e.without_url().to_string())
    }
}

#[async_trait]
impl Backend for HttpBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Http
    }

    async fn complete(&self, prompt: &RenderedPrompt) -> Result<String, GatewayError> {
        let mut attempt = 0u32;
        loop {
            debug!(advertiser_id = %prompt.advertiser_id, chars = prompt.char_budget_used, attempt, "backend request");
            match self.attempt(&prompt.text).await {
                Ok(text) => return Ok(text),
                Err(e) if e.is_transient() && attempt < self.max_retries => {
                    warn!(advertiser_id = %prompt.advertiser_id, code = e.code(), attempt, "transient backend failure, retrying");
                    tokio::time::sleep(self.backoff * 2u32.saturating_pow(attempt)).await;
                    attempt += 1;
                }
                Err(e) if e.is_transient() && self.max_retries > 0 => {
                    return Err(GatewayError::RetriesExhausted {
                        attempts: attempt + 1,
                        last: Box::new(e),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// A backend behind a max-in-flight bound.
#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn Backend>,
    permits: Arc<Semaphore>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, max_in_flight: usize) -> Self {
        Self {
            backend,
            permits: Arc::new(Semaphore::new(max_in_flight.max(1))),
        }
    }

    pub fn from_config(config: &BackendConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let backend: Arc<dyn Backend> = match config.kind {
            BackendKind::Mock => Arc::new(MockBackend::new(config.mock.clone())),
            BackendKind::Http => Arc::new(HttpBackend::new(config)?),
        };
        Ok(Self::new(backend, config.max_in_flight))
    }

    pub fn kind(&self) -> BackendKind {
        self.backend.kind()
    }

    pub async fn complete(&self, prompt: &RenderedPrompt) -> Result<String, GatewayError> {
        let _permit = self.permits.acquire().await.expect("semaphore never closed");
        self.backend.complete(prompt).await
    }
}

/// One-shot completion against a freshly built backend.
pub async fn complete(prompt: &RenderedPrompt, config: &BackendConfig) -> Result<String, GatewayError> {
    Gateway::from_config(config)?.complete(prompt).await
}
