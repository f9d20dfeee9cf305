//! Blocking JSON-over-HTTP client shared by the remote embedder, reranker
//! and chat handles.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;
use tracing::{debug, warn};

pub const ENV_EMBED_ENDPOINT: &str = "BIGRAPH_EMBED_ENDPOINT";
pub const ENV_RERANK_ENDPOINT: &str = "BIGRAPH_RERANK_ENDPOINT";
pub const ENV_CHAT_ENDPOINT: &str = "BIGRAPH_CHAT_ENDPOINT";

#[derive(Debug, Error)]
pub enum RemoteError {
    #[error("{url}: transport failure after {attempts} attempt(s): {message}")]
    Transport {
        url: String,
        attempts: u32,
        message: String,
    },
    #[error("{url}: HTTP {status}: {body}")]
    Status {
        url: String,
        status: u16,
        body: String,
    },
    #[error("{url}: response does not match protocol: {message}")]
    Protocol { url: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff: Duration,
    pub timeout: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff: Duration::from_millis(200),
            timeout: Duration::from_secs(60),
        }
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct InFlight {
    limit: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

impl InFlight {
    fn acquire(&self) -> InFlightGuard<'_> {
        let mut used = self.used.lock().unwrap_or_else(|e| e.into_inner());
        while *used >= self.limit {
            used = self.freed.wait(used).unwrap_or_else(|e| e.into_inner());
        }
        *used += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut used = self.0.used.lock().unwrap_or_else(|e| e.into_inner());
        *used -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug)]
pub struct ServiceClient {
    base_url: String,
    http: reqwest::blocking::Client,
    retry: RetryPolicy,
    in_flight: InFlight,
}

impl ServiceClient {
    pub fn new(base_url: &str, retry: RetryPolicy, max_in_flight: usize) -> Self {
        let http = reqwest::blocking::Client::builder()
            .timeout(retry.timeout)
            .build()
            .expect("HTTP client without TLS always builds");
        Self {
            base_url: base_url.trim_end_matches('/').to_owned(),
            http,
            retry,
            in_flight: InFlight {
                limit: max_in_flight.max(1),
                used: Mutex::new(0),
                freed: Condvar::new(),
            },
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    /// POSTs `body` to `path`, retrying transport errors and 5xx responses.
    /// Requests are idempotent, so a retry never changes the outcome.
    pub fn post_json<Req, Resp>(&self, path: &str, body: &Req) -> Result<Resp, RemoteError>
    where
        Req: Serialize + ?Sized,
        Resp: DeserializeOwned,
    {
        let url = format!("{}{}", self.base_url, path);
        let _slot = self.in_flight.acquire();
        let attempts = self.retry.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            if attempt > 1 {
                std::thread::sleep(self.retry.backoff * (attempt - 1));
            }
            debug!(%url, attempt, "POST");
            match self.http.post(&url).json(body).send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        return resp.json::<Resp>().map_err(|e| RemoteError::Protocol {
                            url: url.clone(),
                            message: e.to_string(),
                        });
                    }
                    let text = resp.text().unwrap_or_default();
                    if status.is_server_error() {
                        warn!(%url, status = status.as_u16(), attempt, "server error, retrying");
                        last = format!("HTTP {status}: {text}");
                        continue;
                    }
                    return Err(RemoteError::Status {
                        url,
                        status: status.as_u16(),
                        body: text,
                    });
                }
                Err(e) => {
                    warn!(%url, attempt, error = %e, "request failed");
                    last = e.to_string();
                }
            }
        }
        Err(RemoteError::Transport {
            url,
            attempts,
            message: last,
        })
    }
}
