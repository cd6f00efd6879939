//! Blocking JSON-over-HTTP with bounded retries, shared by the embedding, completion
//! and trainer clients.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Total attempts, including the first.
    pub max_attempts: u32,
    /// Delay before the second attempt; doubles after each failure.
    pub base_delay_ms: u64,
    pub timeout_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay_ms: 500,
            timeout_ms: 60_000,
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.base_delay_ms.saturating_mul(1u64 << attempt.min(16)))
    }

    fn agent(&self) -> ureq::Agent {
        ureq::AgentBuilder::new()
            .timeout(Duration::from_millis(self.timeout_ms))
            .build()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RemoteError {
    /// Server errors or transport failures on every attempt.
    #[error("unavailable after {attempts} attempt(s): {last}")]
    Unavailable { attempts: u32, last: String },
    /// A 4xx response; not retried.
    #[error("http {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed response: {0}")]
    Decode(String),
}

fn call(
    policy: &RetryPolicy,
    send: impl Fn(&ureq::Agent) -> Result<ureq::Response, ureq::Error>,
) -> Result<Value, RemoteError> {
    let agent = policy.agent();
    let attempts = policy.max_attempts.max(1);
    let mut last = String::new();
    for attempt in 0..attempts {
        if attempt > 0 {
            std::thread::sleep(policy.delay(attempt - 1));
        }
        match send(&agent) {
            Ok(resp) => {
                return resp
                    .into_json::<Value>()
                    .map_err(|e| RemoteError::Decode(e.to_string()));
            }
            Err(ureq::Error::Status(status, resp)) if status < 500 => {
                let body = resp.into_string().unwrap_or_default();
                return Err(RemoteError::Rejected { status, body });
            }
            Err(ureq::Error::Status(status, resp)) => {
                last = format!("http {status}: {}", resp.into_string().unwrap_or_default());
            }
            Err(e) => last = e.to_string(),
        }
    }
    Err(RemoteError::Unavailable { attempts, last })
}

pub fn post_json<B: Serialize>(
    policy: &RetryPolicy,
    url: &str,
    body: &B,
) -> Result<Value, RemoteError> {
    let body = serde_json::to_value(body).map_err(|e| RemoteError::Decode(e.to_string()))?;
    call(policy, |agent| agent.post(url).send_json(body.clone()))
}

pub fn get_json(policy: &RetryPolicy, url: &str) -> Result<Value, RemoteError> {
    call(policy, |agent| agent.get(url).call())
}
