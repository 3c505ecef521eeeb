//! Blocking JSON-over-HTTP with bounded retries, shared by the remote
//! embedder and responder.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("request to {url} failed after {attempts} attempt(s): HTTP {status}: {body}")]
    Status {
        url: String,
        status: u16,
        attempts: u32,
        body: String,
    },
    #[error("request to {url} failed after {attempts} attempt(s): {message}")]
    Network {
        url: String,
        attempts: u32,
        message: String,
    },
    #[error("invalid response from {url}: {message}")]
    Decode { url: String, message: String },
}

impl TransportError {
    /// HTTP status of the final attempt, when the server answered.
    pub fn status(&self) -> Option<u16> {
        match self {
            TransportError::Status { status, .. } => Some(*status),
            _ => None,
        }
    }
}

/// Retries happen on 429, on 5xx and on connection failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based): base * 2^retry.
    pub fn delay(&self, retry: u32) -> Duration {
        self.base_delay.saturating_mul(1u32 << retry.min(16))
    }
}

fn is_retryable(status: u16) -> bool {
    status == 429 || (500..600).contains(&status)
}

#[derive(Debug, Clone)]
pub struct JsonClient {
    client: reqwest::blocking::Client,
    api_key: Option<String>,
    retry: RetryPolicy,
}

impl JsonClient {
    pub fn new(api_key: Option<String>, retry: RetryPolicy, timeout: Duration) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .expect("http client builds");
        Self {
            client,
            api_key,
            retry,
        }
    }

    pub fn post<Req: Serialize, Resp: DeserializeOwned>(&self, url: &str, body: &Req) -> Result<Resp, TransportError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            let mut req = self.client.post(url).json(body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            let retry_left = attempt <= self.retry.max_retries;
            match req.send() {
                Ok(resp) => {
                    let status = resp.status().as_u16();
                    if resp.status().is_success() {
                        let text = resp.text().map_err(|e| TransportError::Decode {
                            url: url.to_string(),
                            message: e.to_string(),
                        })?;
                        return serde_json::from_str(&text).map_err(|e| TransportError::Decode {
                            url: url.to_string(),
                            message: e.to_string(),
                        });
                    }
                    let body = resp.text().unwrap_or_default();
                    if !(retry_left && is_retryable(status)) {
                        return Err(TransportError::Status {
                            url: url.to_string(),
                            status,
                            attempts: attempt,
                            body,
                        });
                    }
                    tracing::warn!(url, status, attempt, "retrying request");
                }
                Err(e) => {
                    if !retry_left {
                        return Err(TransportError::Network {
                            url: url.to_string(),
                            attempts: attempt,
                            message: e.to_string(),
                        });
                    }
                    tracing::warn!(url, attempt, error = %e, "retrying request");
                }
            }
            std::thread::sleep(self.retry.delay(attempt - 1));
        }
    }
}
