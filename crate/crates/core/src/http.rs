//! Blocking JSON-over-HTTP client with exponential backoff, shared by the
//! remote agent and embedding adapters.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HttpError {
    #[error("http status {0}")]
    Status(u16),
    #[error("transport: {0}")]
    Transport(String),
    #[error("undecodable response: {0}")]
    Decode(String),
}

impl HttpError {
    fn retryable(&self) -> bool {
        match self {
            HttpError::Status(code) => *code == 408 || *code == 429 || *code >= 500,
            HttpError::Transport(_) => true,
            HttpError::Decode(_) => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub url: String,
    /// Sent as `Authorization: Bearer <token>` when present.
    #[serde(skip_serializing)]
    pub auth_token: Option<String>,
    pub timeout_secs: u64,
    /// Total attempts, including the first one.
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
    pub concurrency: usize,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            url: String::new(),
            auth_token: None,
            timeout_secs: 120,
            max_attempts: 3,
            backoff_base_ms: 500,
            concurrency: 4,
        }
    }
}

/// Counting semaphore bounding in-flight requests.
struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Permits {
    fn acquire(&self) -> PermitGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        PermitGuard(self)
    }
}

struct PermitGuard<'a>(&'a Permits);

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

pub struct JsonClient {
    agent: ureq::Agent,
    config: EndpointConfig,
    permits: Permits,
}

impl JsonClient {
    pub fn new(config: EndpointConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .build()
            .into();
        let permits = Permits {
            free: Mutex::new(config.concurrency.max(1)),
            cv: Condvar::new(),
        };
        Self {
            agent,
            config,
            permits,
        }
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    fn post_once<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        body: &Req,
    ) -> Result<Resp, HttpError> {
        let mut request = self.agent.post(&self.config.url);
        if let Some(token) = &self.config.auth_token {
            request = request.header("Authorization", &format!("Bearer {token}"));
        }
        let mut response = request.send_json(body).map_err(|e| match e {
            ureq::Error::StatusCode(code) => HttpError::Status(code),
            other => HttpError::Transport(other.to_string()),
        })?;
        response
            .body_mut()
            .read_json::<Resp>()
            .map_err(|e| HttpError::Decode(e.to_string()))
    }

    /// POSTs `body`, retrying transport errors, 408/429 and 5xx with
    /// doubling delays.
    pub fn post_json<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        body: &Req,
    ) -> Result<Resp, HttpError> {
        let _permit = self.permits.acquire();
        let attempts = self.config.max_attempts.max(1);
        let mut delay = Duration::from_millis(self.config.backoff_base_ms);
        let mut attempt = 1;
        loop {
            match self.post_once(body) {
                Ok(resp) => return Ok(resp),
                Err(err) if attempt < attempts && err.retryable() => {
                    tracing::warn!(url = %self.config.url, attempt, error = %err, "retrying request");
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                Err(err) => return Err(err),
            }
        }
    }
}
