//! Blocking JSON-over-HTTP helper shared by the remote providers.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Connection settings for one remote endpoint. The API key is read from the
/// environment variable named here at request time and never stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endpoint {
    pub url: String,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
}

fn default_timeout() -> u64 {
    60
}

fn default_retries() -> u32 {
    3
}

impl Endpoint {
    pub fn new(url: impl Into<String>) -> Self {
        Endpoint {
            url: url.into(),
            api_key_env: None,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
        }
    }

    fn api_key(&self, provider: &str) -> Result<Option<String>> {
        match &self.api_key_env {
            None => Ok(None),
            Some(var) => std::env::var(var).map(Some).map_err(|_| Error::Provider {
                provider: provider.to_string(),
                message: format!("environment variable {var} is not set"),
            }),
        }
    }

    /// POSTs `body` and returns the parsed JSON response. Transport errors,
    /// 429 and 5xx responses are retried up to `max_retries` times with
    /// exponential backoff.
    pub fn post_json(&self, provider: &str, body: &Value) -> Result<Value> {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(self.timeout_secs))
            .build();
        let key = self.api_key(provider)?;
        let fail = |message: String| Error::Provider {
            provider: provider.to_string(),
            message,
        };

        let mut attempt = 0;
        loop {
            let mut request = agent.post(&self.url).set("Content-Type", "application/json");
            if let Some(key) = &key {
                request = request.set("Authorization", &format!("Bearer {key}"));
            }
            let retryable = match request.send_json(body.clone()) {
                Ok(response) => {
                    return response
                        .into_json::<Value>()
                        .map_err(|e| fail(format!("invalid JSON response: {e}")))
                }
                Err(ureq::Error::Status(code, _)) if code == 429 || code >= 500 => {
                    format!("HTTP status {code}")
                }
                Err(ureq::Error::Status(code, _)) => return Err(fail(format!("HTTP status {code}"))),
                Err(ureq::Error::Transport(t)) => format!("transport error: {}", t.kind()),
            };
            if attempt >= self.max_retries {
                return Err(fail(format!("{retryable} after {} attempt(s)", attempt + 1)));
            }
            thread::sleep(Duration::from_millis(100 << attempt.min(6)));
            attempt += 1;
        }
    }
}
