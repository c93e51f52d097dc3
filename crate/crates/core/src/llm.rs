//! Chat-completion clients: a remote HTTP backend speaking the de-facto
//! chat-completions JSON protocol, a deterministic scripted mock for offline
//! runs, and a content-addressed response cache that wraps either.

use std::fs;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::types::Role;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    pub role: String,
    pub content: String,
}

impl WireMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role: role.as_str().to_string(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<WireMessage>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub model_name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub finish_reason: FinishReason,
    /// (prompt tokens, completion tokens), as reported or estimated.
    pub usage: (u64, u64),
}

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("provider error (status {status}): {body}")]
    Provider { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("mock script exhausted")]
    MockExhausted,
    #[error("no mock matcher applies to the request")]
    MockMismatch,
    #[error("cache entry corrupt: {0}")]
    CacheCorrupt(String),
}

/// Anything that can answer a chat request. Implementations are shareable
/// across worker threads.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError>;
}

// ---------------------------------------------------------------------------
// Remote backend
// ---------------------------------------------------------------------------

/// Remote chat-completions backend: `POST {base_url}/v1/chat/completions`
/// with bearer auth, 3 attempts, exponential backoff (1s/2s/4s) on transport
/// failures and 429/5xx.
pub struct HttpBackend {
    base_url: String,
    api_key: String,
    agent: ureq::Agent,
    /// Overridable backoff schedule so tests run fast.
    backoff: Vec<Duration>,
}

pub const ENV_API_KEY: &str = "QUORUM_SQL_API_KEY";
pub const ENV_BASE_URL: &str = "QUORUM_SQL_BASE_URL";
pub const ENV_MODEL: &str = "QUORUM_SQL_MODEL";

impl HttpBackend {
    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: api_key.into(),
            agent: ureq::AgentBuilder::new()
                .timeout(Duration::from_secs(120))
                .build(),
            backoff: vec![
                Duration::from_secs(1),
                Duration::from_secs(2),
                Duration::from_secs(4),
            ],
        }
    }

    /// Read base URL and API key from the environment.
    pub fn from_env() -> Option<Self> {
        let base = std::env::var(ENV_BASE_URL).ok()?;
        let key = std::env::var(ENV_API_KEY).unwrap_or_default();
        Some(Self::new(base, key))
    }

    pub fn with_backoff(mut self, backoff: Vec<Duration>) -> Self {
        self.backoff = backoff;
        self
    }

    fn attempt(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let url = format!("{}/v1/chat/completions", self.base_url);
        let body = serde_json::json!({
            "model": request.model_name,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
            "messages": request.messages,
        });
        let resp = self
            .agent
            .post(&url)
            .set("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(body);
        match resp {
            Ok(resp) => parse_completion(resp),
            Err(ureq::Error::Status(status, resp)) => Err(LlmError::Provider {
                status,
                body: resp.into_string().unwrap_or_default(),
            }),
            Err(ureq::Error::Transport(t)) => Err(LlmError::Transport(t.to_string())),
        }
    }
}

fn parse_completion(resp: ureq::Response) -> Result<ChatResponse, LlmError> {
    let v: serde_json::Value = resp
        .into_json()
        .map_err(|e| LlmError::Transport(e.to_string()))?;
    let choice = v
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| LlmError::Transport("response has no choices".into()))?;
    let content = choice
        .pointer("/message/content")
        .and_then(|c| c.as_str())
        .unwrap_or_default()
        .to_string();
    let finish_reason = match choice.get("finish_reason").and_then(|f| f.as_str()) {
        Some("length") => FinishReason::Length,
        Some("stop") | None => FinishReason::Stop,
        Some(_) => FinishReason::Error,
    };
    let usage = (
        v.pointer("/usage/prompt_tokens")
            .and_then(|u| u.as_u64())
            .unwrap_or(0),
        v.pointer("/usage/completion_tokens")
            .and_then(|u| u.as_u64())
            .unwrap_or_else(|| crate::types::estimate_tokens(&content) as u64),
    );
    Ok(ChatResponse {
        content,
        finish_reason,
        usage,
    })
}

fn retryable(err: &LlmError) -> bool {
    match err {
        LlmError::Transport(_) => true,
        LlmError::Provider { status, .. } => *status == 429 || *status >= 500,
        _ => false,
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let mut last = None;
        for (i, wait) in std::iter::once(None)
            .chain(self.backoff.iter().map(Some))
            .enumerate()
        {
            if let Some(wait) = wait {
                std::thread::sleep(*wait);
            }
            match self.attempt(request) {
                Ok(resp) => {
                    if i > 0 {
                        log::debug!("request succeeded after {i} retries");
                    }
                    return Ok(resp);
                }
                Err(e) if retryable(&e) => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

// ---------------------------------------------------------------------------
// Scripted mock backend
// ---------------------------------------------------------------------------

/// One scripted entry: `matcher` is either `"*"` or a substring that must
/// occur somewhere in the request's message contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(rename = "match")]
    pub matcher: String,
    pub response: String,
}

/// Deterministic scripted backend. Entries are consumed strictly in order;
/// running out is an error, and a non-matching entry is an error.
pub struct MockScript {
    entries: Vec<ScriptEntry>,
    cursor: Mutex<usize>,
}

impl MockScript {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        Self {
            entries,
            cursor: Mutex::new(0),
        }
    }

    pub fn from_pairs(pairs: &[(&str, &str)]) -> Self {
        Self::new(
            pairs
                .iter()
                .map(|(m, r)| ScriptEntry {
                    matcher: m.to_string(),
                    response: r.to_string(),
                })
                .collect(),
        )
    }

    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        Ok(Self::new(serde_json::from_str(json)?))
    }

    /// Number of entries consumed so far.
    pub fn consumed(&self) -> usize {
        *self.cursor.lock().unwrap()
    }
}

impl ChatBackend for MockScript {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let mut cursor = self.cursor.lock().unwrap();
        let entry = self.entries.get(*cursor).ok_or(LlmError::MockExhausted)?;
        let haystack: String = request
            .messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        if entry.matcher != "*" && !haystack.contains(&entry.matcher) {
            return Err(LlmError::MockMismatch);
        }
        *cursor += 1;
        Ok(ChatResponse {
            content: entry.response.clone(),
            finish_reason: FinishReason::Stop,
            usage: (
                crate::types::estimate_tokens(&haystack) as u64,
                crate::types::estimate_tokens(&entry.response) as u64,
            ),
        })
    }
}

// ---------------------------------------------------------------------------
// Persistent cache
// ---------------------------------------------------------------------------

/// Content-addressed response cache: one JSON file per request key.
///
/// The key hashes (model, temperature, serialized messages). A corrupt entry
/// is treated as a miss and overwritten. Concurrent writers target distinct
/// files per key; a same-key race is last-writer-wins, which is harmless
/// under a deterministic backend.
pub struct CachedBackend<B> {
    inner: B,
    dir: PathBuf,
}

impl<B: ChatBackend> CachedBackend<B> {
    pub fn new(inner: B, dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { inner, dir })
    }

    pub fn cache_key(request: &ChatRequest) -> String {
        let mut hasher = Sha256::new();
        hasher.update(request.model_name.as_bytes());
        hasher.update(request.temperature.to_le_bytes());
        hasher.update(serde_json::to_vec(&request.messages).expect("messages serialize"));
        hex::encode(hasher.finalize())
    }

    fn entry_path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    /// Look up the request in the cache; on a miss (or corrupt entry)
    /// delegate to the inner backend and store the result.
    pub fn cached_complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let key = Self::cache_key(request);
        let path = self.entry_path(&key);
        if let Ok(bytes) = fs::read(&path) {
            match serde_json::from_slice::<ChatResponse>(&bytes) {
                Ok(resp) => return Ok(resp),
                Err(e) => log::warn!("cache entry {key} corrupt ({e}); refetching"),
            }
        }
        let resp = self.inner.complete(request)?;
        let tmp = self.dir.join(format!("{key}.tmp.{}", std::process::id()));
        if let Ok(bytes) = serde_json::to_vec(&resp) {
            let _ = fs::write(&tmp, bytes).and_then(|_| fs::rename(&tmp, &path));
        }
        Ok(resp)
    }
}

impl<B: ChatBackend> ChatBackend for CachedBackend<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        self.cached_complete(request)
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<T> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).complete(request)
    }
}
