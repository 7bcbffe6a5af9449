//! Blocking JSON-over-HTTP client shared by the remote embedder and the LLM
//! planner: bearer auth, bounded in-flight requests, retry with exponential
//! backoff.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde_json::Value;

pub const ENV_API_BASE: &str = "DAMR_API_BASE";
pub const ENV_API_KEY: &str = "DAMR_API_KEY";

#[derive(Clone, Debug)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            initial_backoff: Duration::from_millis(500),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RemoteError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Body(String),
    #[error("missing configuration: {0}")]
    Config(String),
}

impl RemoteError {
    fn retryable(&self) -> bool {
        match self {
            RemoteError::Transport(_) => true,
            RemoteError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Limiter {
    fn new(n: usize) -> Self {
        Limiter {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Limiter);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug)]
pub struct RemoteClient {
    base_url: String,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
    retry: RetryPolicy,
    limiter: Limiter,
}

impl RemoteClient {
    pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

    pub fn new(base_url: impl Into<String>, api_key: Option<String>) -> Self {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .expect("http client construction");
        RemoteClient {
            base_url: base_url.into().trim_end_matches('/').to_owned(),
            api_key,
            http,
            retry: RetryPolicy::default(),
            limiter: Limiter::new(Self::DEFAULT_MAX_IN_FLIGHT),
        }
    }

    /// Reads the base URL and bearer token from the environment.
    pub fn from_env() -> Result<Self, RemoteError> {
        let base =
            std::env::var(ENV_API_BASE).map_err(|_| RemoteError::Config(format!("{ENV_API_BASE} is not set")))?;
        Ok(Self::new(base, std::env::var(ENV_API_KEY).ok()))
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.limiter = Limiter::new(n);
        self
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    /// POSTs `body` to `<base_url>/<endpoint>` and parses the JSON reply.
    pub fn post_json(&self, endpoint: &str, body: &Value) -> Result<Value, RemoteError> {
        let url = format!("{}/{}", self.base_url, endpoint.trim_start_matches('/'));
        let mut backoff = self.retry.initial_backoff;
        let mut last = RemoteError::Transport("no attempts made".into());
        for attempt in 0..self.retry.attempts.max(1) {
            if attempt > 0 {
                std::thread::sleep(backoff);
                backoff *= 2;
            }
            match self.attempt(&url, body) {
                Ok(v) => return Ok(v),
                Err(e) if e.retryable() => {
                    log::warn!("request to {url} failed (attempt {}): {e}", attempt + 1);
                    last = e;
                }
                Err(e) => return Err(e),
            }
        }
        Err(last)
    }

    fn attempt(&self, url: &str, body: &Value) -> Result<Value, RemoteError> {
        let _permit = self.limiter.acquire();
        let mut req = self.http.post(url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| RemoteError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| RemoteError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(RemoteError::Status {
                status: status.as_u16(),
                body: text,
            });
        }
        serde_json::from_str(&text).map_err(|e| RemoteError::Body(e.to_string()))
    }
}
