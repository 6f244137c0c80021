//! Blocking JSON-over-HTTP with bounded exponential backoff, shared by the
//! chat-completion and embedding clients.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_initial_backoff_ms")]
    pub initial_backoff_ms: u64,
    #[serde(default = "default_max_backoff_ms")]
    pub max_backoff_ms: u64,
}

fn default_max_retries() -> u32 {
    5
}
fn default_initial_backoff_ms() -> u64 {
    500
}
fn default_max_backoff_ms() -> u64 {
    30_000
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: default_max_retries(),
            initial_backoff_ms: default_initial_backoff_ms(),
            max_backoff_ms: default_max_backoff_ms(),
        }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, attempt: u32) -> Duration {
        let ms = self
            .initial_backoff_ms
            .saturating_mul(1u64 << attempt.min(32))
            .min(self.max_backoff_ms);
        Duration::from_millis(ms)
    }
}

fn retryable(status: u16) -> bool {
    status == 429 || (500..600).contains(&status)
}

pub struct JsonClient {
    agent: ureq::Agent,
    api_key: Option<String>,
    retry: RetryPolicy,
    requests: AtomicUsize,
}

impl JsonClient {
    pub fn new(timeout: Duration, api_key: Option<String>, retry: RetryPolicy) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        JsonClient {
            agent,
            api_key,
            retry,
            requests: AtomicUsize::new(0),
        }
    }

    /// HTTP requests issued so far, retries included.
    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn post_json(&self, url: &str, body: &Value) -> Result<Value> {
        let mut attempt = 0;
        loop {
            self.requests.fetch_add(1, Ordering::SeqCst);
            let mut req = self.agent.post(url).header("Content-Type", "application/json");
            if let Some(key) = &self.api_key {
                req = req.header("Authorization", &format!("Bearer {key}"));
            }
            let (status, message) = match req.send_json(body) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    let text = resp.body_mut().read_to_string().map_err(|e| Error::Transport {
                        status: Some(status),
                        message: e.to_string(),
                    })?;
                    if (200..300).contains(&status) {
                        return serde_json::from_str(&text)
                            .map_err(|e| Error::Protocol(format!("response is not JSON: {e}")));
                    }
                    if !retryable(status) {
                        return Err(Error::Transport {
                            status: Some(status),
                            message: text,
                        });
                    }
                    (Some(status), text)
                }
                Err(e) => (None, e.to_string()),
            };
            if attempt >= self.retry.max_retries {
                return Err(Error::Transport {
                    status,
                    message: format!("giving up after {} attempts: {message}", attempt + 1),
                });
            }
            let wait = self.retry.backoff(attempt);
            log::warn!("POST {url} failed ({status:?}), retrying in {wait:?}");
            std::thread::sleep(wait);
            attempt += 1;
        }
    }
}
