//! Chat-completion client for layout generation, with retry, a JSON-lines
//! capture log and offline replay from that log.

use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompt::{PromptBundle, PromptConfig};

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("provider unreachable after {attempts} attempts: {last_error}")]
    ProviderUnreachable { attempts: u32, last_error: String },
    #[error("provider rejected credentials: {0}")]
    AuthFailure(String),
    #[error("provider returned no completion text")]
    EmptyCompletion,
    #[error("provider rejected the request with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("invalid provider configuration: {0}")]
    InvalidConfig(String),
    #[error("no captured response for prompt {0}")]
    ReplayMiss(String),
    #[error("capture log: {0}")]
    Capture(#[from] io::Error),
}

/// API key wrapper that never prints its contents.
#[derive(Clone, PartialEq, Eq)]
pub struct ApiKey(String);

impl ApiKey {
    pub fn new(key: impl Into<String>) -> Self {
        Self(key.into())
    }

    pub fn expose(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for ApiKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ApiKey(***)")
    }
}

#[derive(Debug, Clone)]
pub struct ProviderConfig {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    pub model_name: String,
    pub api_key: ApiKey,
    pub max_retries: u32,
    pub timeout: Duration,
    pub temperature: f64,
}

impl ProviderConfig {
    pub fn new(endpoint: impl Into<String>, model_name: impl Into<String>, api_key: ApiKey) -> Self {
        Self {
            endpoint: endpoint.into(),
            model_name: model_name.into(),
            api_key,
            max_retries: 3,
            timeout: Duration::from_secs(60),
            temperature: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if !(self.endpoint.starts_with("http://") || self.endpoint.starts_with("https://")) {
            return Err(ProviderError::InvalidConfig(format!(
                "endpoint must be an http(s) URL, got '{}'",
                self.endpoint
            )));
        }
        if self.timeout.is_zero() {
            return Err(ProviderError::InvalidConfig("timeout must be positive".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(ProviderError::InvalidConfig("temperature must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// OpenAI-compatible request body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

impl ChatRequest {
    pub fn from_bundle(bundle: &PromptBundle, provider: &ProviderConfig) -> Self {
        Self {
            model: provider.model_name.clone(),
            messages: vec![
                ChatMessage {
                    role: "system".into(),
                    content: bundle.system_text.clone(),
                },
                ChatMessage {
                    role: "user".into(),
                    content: bundle.user_text(),
                },
            ],
            temperature: provider.temperature,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
pub struct ChatResponse {
    #[serde(default)]
    pub choices: Vec<ChatChoice>,
    #[serde(default)]
    pub usage: Option<Usage>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ChatChoice {
    pub message: ChoiceMessage,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ChoiceMessage {
    #[serde(default)]
    pub content: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
pub struct Usage {
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    /// Connection failures, timeouts, 408/429 and 5xx responses.
    #[error("transient: {0}")]
    Transient(String),
    #[error("authentication: {0}")]
    Auth(String),
    #[error("status {status}: {body}")]
    Rejected { status: u16, body: String },
}

/// One chat-completion round trip.
pub trait ChatTransport: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, TransportError>;
}

/// Map an HTTP status and body onto a transport outcome.
pub fn classify_response(status: u16, body: &str) -> Result<ChatResponse, TransportError> {
    match status {
        200..=299 => serde_json::from_str(body)
            .map_err(|e| TransportError::Rejected {
                status,
                body: format!("undecodable completion: {e}"),
            }),
        401 | 403 => Err(TransportError::Auth(format!("status {status}"))),
        408 | 429 | 500..=599 => Err(TransportError::Transient(format!("status {status}"))),
        _ => Err(TransportError::Rejected {
            status,
            body: body.chars().take(500).collect(),
        }),
    }
}

pub struct HttpTransport {
    agent: ureq::Agent,
    endpoint: String,
    api_key: ApiKey,
}

impl HttpTransport {
    pub fn new(provider: &ProviderConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(provider.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            endpoint: provider.endpoint.clone(),
            api_key: provider.api_key.clone(),
        }
    }
}

impl ChatTransport for HttpTransport {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, TransportError> {
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key.expose()))
            .send_json(request)
            .map_err(|e| TransportError::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError::Transient(e.to_string()))?;
        classify_response(status, &body)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawResponse {
    pub text: String,
    pub latency_ms: u64,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
    pub attempts: u32,
    pub retries: u32,
    pub replayed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureRecord {
    pub timestamp: String,
    pub config_hash: String,
    pub prompt_sha256: String,
    pub response_text: String,
}

/// Append-only JSON-lines log of request/response pairs.
#[derive(Debug)]
pub struct CaptureLog {
    path: PathBuf,
    lock: Mutex<()>,
}

impl CaptureLog {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            lock: Mutex::new(()),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, record: &CaptureRecord) -> io::Result<()> {
        let line = serde_json::to_string(record).map_err(io::Error::other)?;
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        let mut file = OpenOptions::new().create(true).append(true).open(&self.path)?;
        writeln!(file, "{line}")
    }

    pub fn records(&self) -> io::Result<Vec<CaptureRecord>> {
        read_capture_records(&self.path)
    }

    /// Latest captured response for this exact prompt, without touching the network.
    pub fn replay(&self, bundle: &PromptBundle) -> Result<RawResponse, ProviderError> {
        let sha = bundle.sha256();
        let record = self
            .records()?
            .into_iter()
            .rev()
            .find(|r| r.prompt_sha256 == sha)
            .ok_or(ProviderError::ReplayMiss(sha))?;
        Ok(RawResponse {
            text: record.response_text,
            latency_ms: 0,
            prompt_tokens: None,
            completion_tokens: None,
            attempts: 0,
            retries: 0,
            replayed: true,
        })
    }
}

pub fn read_capture_records(path: impl AsRef<Path>) -> io::Result<Vec<CaptureRecord>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?);
    }
    Ok(out)
}

/// Hash of everything besides the prompt text that shapes a completion.
pub fn config_hash(config: &PromptConfig, provider: &ProviderConfig) -> String {
    let canonical = serde_json::json!({
        "prompt": config,
        "model": provider.model_name,
        "temperature": provider.temperature,
    });
    hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
}

pub struct LayoutClient {
    provider: ProviderConfig,
    transport: Box<dyn ChatTransport>,
    capture: Option<CaptureLog>,
    backoff_base: Duration,
    backoff_cap: Duration,
}

impl LayoutClient {
    pub fn new(provider: ProviderConfig) -> Result<Self, ProviderError> {
        provider.validate()?;
        let transport = Box::new(HttpTransport::new(&provider));
        Ok(Self::with_transport(provider, transport))
    }

    pub fn with_transport(provider: ProviderConfig, transport: Box<dyn ChatTransport>) -> Self {
        Self {
            provider,
            transport,
            capture: None,
            backoff_base: Duration::from_millis(500),
            backoff_cap: Duration::from_secs(30),
        }
    }

    pub fn with_capture(mut self, log: CaptureLog) -> Self {
        self.capture = Some(log);
        self
    }

    /// First retry waits `base`, each further retry doubles it up to `cap`.
    pub fn with_backoff(mut self, base: Duration, cap: Duration) -> Self {
        self.backoff_base = base;
        self.backoff_cap = cap;
        self
    }

    fn backoff(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry.min(20)).unwrap_or(u32::MAX);
        self.backoff_base.saturating_mul(factor).min(self.backoff_cap)
    }

    pub fn request_layout(&self, bundle: &PromptBundle) -> Result<RawResponse, ProviderError> {
        let request = ChatRequest::from_bundle(bundle, &self.provider);
        let started = Instant::now();
        let mut attempts = 0;
        let response = loop {
            attempts += 1;
            match self.transport.send(&request) {
                Ok(r) => break r,
                Err(TransportError::Auth(msg)) => return Err(ProviderError::AuthFailure(msg)),
                Err(TransportError::Rejected { status, body }) => {
                    return Err(ProviderError::Rejected { status, body })
                }
                Err(TransportError::Transient(msg)) => {
                    let retries_done = attempts - 1;
                    if retries_done >= self.provider.max_retries {
                        return Err(ProviderError::ProviderUnreachable {
                            attempts,
                            last_error: msg,
                        });
                    }
                    log::warn!("transient provider error (attempt {attempts}): {msg}");
                    thread::sleep(self.backoff(retries_done));
                }
            }
        };
        let text = response
            .choices
            .first()
            .and_then(|c| c.message.content.clone())
            .filter(|t| !t.trim().is_empty())
            .ok_or(ProviderError::EmptyCompletion)?;
        if let Some(log) = &self.capture {
            log.append(&CaptureRecord {
                timestamp: chrono::Utc::now().to_rfc3339(),
                config_hash: config_hash(&bundle.config, &self.provider),
                prompt_sha256: bundle.sha256(),
                response_text: text.clone(),
            })?;
        }
        Ok(RawResponse {
            text,
            latency_ms: started.elapsed().as_millis() as u64,
            prompt_tokens: response.usage.and_then(|u| u.prompt_tokens),
            completion_tokens: response.usage.and_then(|u| u.completion_tokens),
            attempts,
            retries: attempts - 1,
            replayed: false,
        })
    }
}
