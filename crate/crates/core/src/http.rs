//! Minimal JSON-over-HTTP transport shared by the embedding and chat clients.
//!
//! The [`HttpTransport`] trait is the only place the crate touches the network,
//! so tests can swap in scripted transports (or one that fails on any call).

use std::time::Duration;

use rand::Rng;
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum TransportError {
    #[error("request timed out")]
    Timeout,
    #[error("connection failed: {0}")]
    Connect(String),
}

pub trait HttpTransport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> Result<HttpReply, TransportError>;
}

/// Refuses every request and counts the attempts. Used where no network
/// access is expected.
#[derive(Debug, Default)]
pub struct DenyTransport {
    calls: std::sync::atomic::AtomicUsize,
}

impl DenyTransport {
    pub fn calls(&self) -> usize {
        self.calls.load(std::sync::atomic::Ordering::SeqCst)
    }
}

impl HttpTransport for DenyTransport {
    fn post_json(&self, url: &str, _: Option<&str>, _: &Value, _: Duration) -> Result<HttpReply, TransportError> {
        self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        Err(TransportError::Connect(format!("network access is disabled (request to {url})")))
    }
}

/// Blocking `reqwest` transport used for live endpoints.
pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new() -> Self {
        Self {
            client: reqwest::blocking::Client::new(),
        }
    }
}

impl Default for ReqwestTransport {
    fn default() -> Self {
        Self::new()
    }
}

impl HttpTransport for ReqwestTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> Result<HttpReply, TransportError> {
        let mut req = self.client.post(url).json(body).timeout(timeout);
        if let Some(token) = bearer {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Connect(e.to_string())
            }
        })?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Connect(e.to_string())
            }
        })?;
        Ok(HttpReply { status, body })
    }
}

/// Retry schedule for transport and rate-limit failures.
#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
    pub timeout: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(20),
            timeout: Duration::from_secs(60),
        }
    }
}

impl RetryPolicy {
    /// Policy that never sleeps between attempts.
    pub fn immediate(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
            timeout: Duration::from_secs(5),
        }
    }

    /// Backoff before retry number `retry` (1-based): exponential with full jitter.
    pub fn delay_for(&self, retry: u32) -> Duration {
        if self.base_delay.is_zero() {
            return Duration::ZERO;
        }
        let exp = self
            .base_delay
            .saturating_mul(1u32 << retry.saturating_sub(1).min(16));
        let cap = exp.min(self.max_delay);
        let jitter: f64 = rand::thread_rng().gen_range(0.5..=1.0);
        cap.mul_f64(jitter)
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum RequestError {
    #[error("timed out after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("provider returned HTTP {status} after {attempts} attempts: {body}")]
    Status {
        status: u16,
        body: String,
        attempts: u32,
    },
}

fn retryable_status(status: u16) -> bool {
    matches!(status, 408 | 429 | 500 | 502 | 503 | 504)
}

/// Successful reply plus how many retries it took.
#[derive(Debug, Clone)]
pub struct RetriedReply {
    pub reply: HttpReply,
    pub retries: u32,
}

/// POSTs `body`, retrying transport errors, 429 and transient 5xx responses.
/// Other non-2xx statuses are terminal.
pub fn post_with_retry(
    transport: &dyn HttpTransport,
    url: &str,
    bearer: Option<&str>,
    body: &Value,
    policy: &RetryPolicy,
) -> Result<RetriedReply, RequestError> {
    let max_attempts = policy.max_attempts.max(1);
    let mut last_err = None;
    for attempt in 1..=max_attempts {
        if attempt > 1 {
            std::thread::sleep(policy.delay_for(attempt - 1));
        }
        match transport.post_json(url, bearer, body, policy.timeout) {
            Ok(reply) if (200..300).contains(&reply.status) => {
                return Ok(RetriedReply {
                    reply,
                    retries: attempt - 1,
                })
            }
            Ok(reply) if retryable_status(reply.status) => {
                tracing::warn!(status = reply.status, attempt, "retryable HTTP status");
                last_err = Some(if reply.status == 429 {
                    RequestError::RateLimited { attempts: attempt }
                } else {
                    RequestError::Status {
                        status: reply.status,
                        body: reply.body,
                        attempts: attempt,
                    }
                });
            }
            Ok(reply) => {
                return Err(RequestError::Status {
                    status: reply.status,
                    body: reply.body,
                    attempts: attempt,
                })
            }
            Err(TransportError::Timeout) => {
                tracing::warn!(attempt, "request timed out");
                last_err = Some(RequestError::Timeout { attempts: attempt });
            }
            Err(TransportError::Connect(message)) => {
                tracing::warn!(attempt, %message, "transport error");
                last_err = Some(RequestError::Transport {
                    attempts: attempt,
                    message,
                });
            }
        }
    }
    Err(last_err.expect("at least one attempt"))
}
