//! Chat-completion gateway: one trait for live and offline backends, a
//! content-addressed response cache and a bound on in-flight requests.

mod cache;
mod mock;

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::corpus::{TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::http::{JsonClient, RetryPolicy};

pub use cache::ResponseCache;
pub use mock::{CopyNearestExemplar, DryRun, EchoGold, MockKind, Scripted};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmParams {
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    /// Unset means the task default: 1024 for tagging, 15 for NLI.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    #[serde(default = "default_url")]
    pub url: String,
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
}

fn default_model() -> String {
    "gpt-4".into()
}
fn default_url() -> String {
    "https://api.openai.com/v1/chat/completions".into()
}
fn default_key_env() -> String {
    "OPENAI_API_KEY".into()
}
fn default_timeout() -> u64 {
    120
}
fn default_concurrency() -> usize {
    4
}

impl Default for LlmParams {
    fn default() -> Self {
        LlmParams {
            model: default_model(),
            temperature: 0.0,
            max_tokens: None,
            url: default_url(),
            api_key_env: default_key_env(),
            timeout_secs: default_timeout(),
            retry: RetryPolicy::default(),
            max_concurrency: default_concurrency(),
        }
    }
}

impl LlmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == Some(0) {
            return Err(Error::Config("max_tokens must be >= 1".into()));
        }
        if self.max_concurrency == 0 {
            return Err(Error::Config("max_concurrency must be >= 1".into()));
        }
        Ok(())
    }

    pub fn max_tokens_for(&self, task: &TaskSpec) -> u32 {
        self.max_tokens.unwrap_or(match task.kind {
            TaskKind::SequenceLabelling => 1024,
            TaskKind::PairClassification => 15,
        })
    }

    /// Copy with `max_tokens` pinned for `task`.
    pub fn resolved(&self, task: &TaskSpec) -> LlmParams {
        LlmParams {
            max_tokens: Some(self.max_tokens_for(task)),
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub usage: Option<Usage>,
}

impl Completion {
    pub fn text(text: impl Into<String>) -> Self {
        Completion {
            text: text.into(),
            usage: None,
        }
    }
}

pub trait Backend: Send + Sync {
    /// `live` for a real endpoint, the mock name otherwise. Part of the cache key.
    fn tag(&self) -> &str;

    fn complete(&self, prompt: &str, params: &LlmParams) -> Result<Completion>;

    /// Whether responses may be cached.
    fn cacheable(&self) -> bool {
        true
    }
}

/// OpenAI-compatible chat completions with a single user message.
pub struct ChatBackend {
    http: JsonClient,
    url: String,
}

impl ChatBackend {
    pub fn new(params: &LlmParams, api_key: Option<String>) -> Self {
        ChatBackend {
            http: JsonClient::new(Duration::from_secs(params.timeout_secs), api_key, params.retry.clone()),
            url: params.url.clone(),
        }
    }

    /// Reads the API key from the variable named in `params`.
    pub fn from_env(params: &LlmParams) -> Self {
        Self::new(params, std::env::var(&params.api_key_env).ok())
    }

    /// HTTP requests issued, retries included.
    pub fn request_count(&self) -> usize {
        self.http.request_count()
    }
}

impl Backend for ChatBackend {
    fn tag(&self) -> &str {
        "live"
    }

    fn complete(&self, prompt: &str, params: &LlmParams) -> Result<Completion> {
        let body = json!({
            "model": params.model,
            "messages": [{ "role": "user", "content": prompt }],
            "temperature": params.temperature,
            "max_tokens": params.max_tokens.unwrap_or(1024),
        });
        let resp = self.http.post_json(&self.url, &body)?;
        let text = resp
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Protocol("response lacks choices[0].message.content".into()))?;
        let usage = resp
            .get("usage")
            .and_then(|u| serde_json::from_value::<Usage>(u.clone()).ok());
        Ok(Completion {
            text: text.to_string(),
            usage,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub cache_key: String,
    pub backend: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
    pub prompt: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of everything that determines a response.
pub fn cache_key(backend: &str, params: &LlmParams, prompt: &str) -> String {
    let mut h = Sha256::new();
    for part in [
        backend.as_bytes(),
        params.model.as_bytes(),
        &params.temperature.to_bits().to_be_bytes(),
        &params.max_tokens.unwrap_or(0).to_be_bytes(),
    ] {
        h.update((part.len() as u64).to_be_bytes());
        h.update(part);
    }
    h.update(prompt.as_bytes());
    hex::encode(h.finalize())
}

struct Limiter {
    in_flight: Mutex<usize>,
    freed: Condvar,
    limit: usize,
}

impl Limiter {
    fn acquire(&self) -> LimiterGuard<'_> {
        let mut n = self.in_flight.lock().expect("poisoned");
        while *n >= self.limit {
            n = self.freed.wait(n).expect("poisoned");
        }
        *n += 1;
        LimiterGuard(self)
    }
}

struct LimiterGuard<'a>(&'a Limiter);

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().expect("poisoned") -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct GatewayStats {
    pub cache_hits: usize,
    pub backend_calls: usize,
}

pub struct Gateway {
    backend: Box<dyn Backend>,
    cache: Option<ResponseCache>,
    limiter: Limiter,
    hits: AtomicUsize,
    calls: AtomicUsize,
}

impl Gateway {
    pub fn new(backend: Box<dyn Backend>, cache_dir: Option<PathBuf>, max_concurrency: usize) -> Self {
        Gateway {
            backend,
            cache: cache_dir.map(ResponseCache::new),
            limiter: Limiter {
                in_flight: Mutex::new(0),
                freed: Condvar::new(),
                limit: max_concurrency.max(1),
            },
            hits: AtomicUsize::new(0),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn backend_tag(&self) -> &str {
        self.backend.tag()
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            cache_hits: self.hits.load(Ordering::SeqCst),
            backend_calls: self.calls.load(Ordering::SeqCst),
        }
    }

    pub fn complete(&self, prompt: &str, params: &LlmParams) -> Result<String> {
        Ok(self.complete_record(prompt, params)?.response)
    }

    /// Cache first; on a miss, calls the backend and stores the record.
    pub fn complete_record(&self, prompt: &str, params: &LlmParams) -> Result<PromptRecord> {
        params.validate()?;
        let tag = self.backend.tag().to_string();
        let key = cache_key(&tag, params, prompt);
        let cache = self.cache.as_ref().filter(|_| self.backend.cacheable());
        if let Some(cache) = cache {
            if let Some(rec) = cache.get(&key)? {
                self.hits.fetch_add(1, Ordering::SeqCst);
                return Ok(rec);
            }
        }
        let completion = {
            let _slot = self.limiter.acquire();
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.backend.complete(prompt, params)?
        };
        let record = PromptRecord {
            cache_key: key,
            backend: tag,
            model: params.model.clone(),
            temperature: params.temperature,
            max_tokens: params.max_tokens,
            prompt: prompt.to_string(),
            response: completion.text,
            usage: completion.usage,
        };
        if let Some(cache) = cache {
            cache.put(&record)?;
        }
        Ok(record)
    }
}
