//! Shared HTTP plumbing: configuration, bearer auth, bounded in-flight
//! requests and retry with exponential backoff.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use reqwest::blocking::{Client, RequestBuilder};
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const DEFAULT_TOKEN_ENV: &str = "REVIEWTUNE_API_TOKEN";
pub const IDEMPOTENCY_HEADER: &str = "Idempotency-Key";

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("{endpoint}: HTTP {status}: {message}")]
    Status { endpoint: String, status: u16, message: String },
    #[error("{endpoint}: transport error: {message}")]
    Transport { endpoint: String, message: String },
    #[error("{endpoint}: gave up after {attempts} attempts: {last}")]
    RetriesExhausted { endpoint: String, attempts: u32, last: String },
    #[error("{endpoint}: unexpected response: {message}")]
    Protocol { endpoint: String, message: String },
    #[error("refusing request: {0}")]
    Validation(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl ApiError {
    /// Status code of a permanent HTTP failure, if that is what this is.
    pub fn status(&self) -> Option<u16> {
        match self {
            ApiError::Status { status, .. } => Some(*status),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 5, base_delay_ms: 200, max_delay_ms: 10_000 }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based): base * 2^(retry-1), capped.
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u64.checked_shl(retry.saturating_sub(1)).unwrap_or(u64::MAX);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ApiConfig {
    pub base_url: String,
    pub path_prefix: String,
    /// Name of the environment variable holding the bearer token.
    pub token_env: String,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

impl Default for ApiConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8089".into(),
            path_prefix: "/v1".into(),
            token_env: DEFAULT_TOKEN_ENV.into(),
            timeout_ms: 30_000,
            max_in_flight: 4,
            retry: RetryPolicy::default(),
        }
    }
}

/// One attempt made by the retry layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttemptRecord {
    pub endpoint: String,
    pub attempt: u32,
    pub outcome: String,
}

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self { permits: Mutex::new(n.max(1)), cv: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock().unwrap();
        while *p == 0 {
            p = self.cv.wait(p).unwrap();
        }
        *p -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

/// Blocking JSON-over-HTTP client used by every remote component.
pub struct ApiClient {
    config: ApiConfig,
    http: Client,
    token: Option<String>,
    in_flight: Semaphore,
    attempts: Mutex<Vec<AttemptRecord>>,
}

enum Outcome {
    Done(Value),
    Retry(String),
    Fail(ApiError),
}

impl ApiClient {
    /// Builds a client, reading the token from the configured variable.
    pub fn new(config: ApiConfig) -> Result<Self, ApiError> {
        let token = std::env::var(&config.token_env).ok().filter(|t| !t.is_empty());
        Self::with_token(config, token)
    }

    pub fn with_token(config: ApiConfig, token: Option<String>) -> Result<Self, ApiError> {
        let http = Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| ApiError::Transport { endpoint: "client".into(), message: e.to_string() })?;
        let in_flight = Semaphore::new(config.max_in_flight);
        Ok(Self { config, http, token, in_flight, attempts: Mutex::new(Vec::new()) })
    }

    pub fn config(&self) -> &ApiConfig {
        &self.config
    }

    pub fn url(&self, path: &str) -> String {
        format!(
            "{}{}{}",
            self.config.base_url.trim_end_matches('/'),
            self.config.path_prefix.trim_end_matches('/'),
            path
        )
    }

    pub fn http(&self) -> &Client {
        &self.http
    }

    pub fn attempts(&self) -> Vec<AttemptRecord> {
        self.attempts.lock().unwrap().clone()
    }

    fn record(&self, endpoint: &str, attempt: u32, outcome: String) {
        log::debug!("{endpoint} attempt {attempt}: {outcome}");
        self.attempts.lock().unwrap().push(AttemptRecord { endpoint: endpoint.to_owned(), attempt, outcome });
    }

    fn attempt(&self, endpoint: &str, request: RequestBuilder) -> Outcome {
        let request = match &self.token {
            Some(t) => request.bearer_auth(t),
            None => request,
        };
        let _permit = self.in_flight.acquire();
        let response = match request.send() {
            Ok(r) => r,
            Err(e) => return Outcome::Retry(format!("transport: {e}")),
        };
        let status = response.status();
        let text = match response.text() {
            Ok(t) => t,
            Err(e) => return Outcome::Retry(format!("reading body: {e}")),
        };
        if status.is_success() {
            return match serde_json::from_str(&text) {
                Ok(v) => Outcome::Done(v),
                Err(e) => Outcome::Fail(ApiError::Protocol {
                    endpoint: endpoint.to_owned(),
                    message: format!("invalid JSON body: {e}"),
                }),
            };
        }
        let message = serde_json::from_str::<Value>(&text)
            .ok()
            .and_then(|v| v.pointer("/error/message").and_then(Value::as_str).map(str::to_owned))
            .unwrap_or(text);
        if status.is_server_error() || status == StatusCode::TOO_MANY_REQUESTS {
            Outcome::Retry(format!("HTTP {}: {message}", status.as_u16()))
        } else {
            Outcome::Fail(ApiError::Status { endpoint: endpoint.to_owned(), status: status.as_u16(), message })
        }
    }

    /// Sends the request built by `build` until it succeeds, fails
    /// permanently or the retry budget runs out. `build` is called once per
    /// attempt.
    pub fn send_json<F>(&self, endpoint: &str, build: F) -> Result<Value, ApiError>
    where
        F: Fn(&Client) -> Result<RequestBuilder, ApiError>,
    {
        let policy = &self.config.retry;
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.attempt(endpoint, build(&self.http)?) {
                Outcome::Done(v) => {
                    self.record(endpoint, attempt, "ok".into());
                    return Ok(v);
                }
                Outcome::Fail(e) => {
                    self.record(endpoint, attempt, e.to_string());
                    return Err(e);
                }
                Outcome::Retry(reason) => {
                    self.record(endpoint, attempt, reason.clone());
                    if attempt > policy.max_retries {
                        return Err(ApiError::RetriesExhausted {
                            endpoint: endpoint.to_owned(),
                            attempts: attempt,
                            last: reason,
                        });
                    }
                    let delay = policy.delay(attempt);
                    log::warn!("{endpoint}: {reason}; retrying in {delay:?}");
                    std::thread::sleep(delay);
                }
            }
        }
    }
}

pub(crate) fn now_ms() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy { max_retries: 10, base_delay_ms: 100, max_delay_ms: 1000 };
        let ms: Vec<u128> = (1..=6).map(|r| p.delay(r).as_millis()).collect();
        assert_eq!(ms, [100, 200, 400, 800, 1000, 1000]);
        assert_eq!(p.delay(200).as_millis(), 1000);
    }

    #[test]
    fn url_joining() {
        let c = ApiClient::with_token(
            ApiConfig { base_url: "http://h:1/".into(), path_prefix: "/api/v1/".into(), ..Default::default() },
            None,
        )
        .unwrap();
        assert_eq!(c.url("/files"), "http://h:1/api/v1/files");
    }
}
