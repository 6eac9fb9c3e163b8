use std::collections::BTreeMap;
use std::thread;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ChatModel, ChatRequest, ChatResponse, GatewayError, Semaphore, Usage};

/// Where and how to reach one chat-completions provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    /// Base URL up to and excluding `/chat/completions`.
    pub base_url: String,
    /// Provider-side model name; defaults to the request's `model_id`.
    #[serde(default)]
    pub model: Option<String>,
    /// Environment variable holding the bearer token. `None` sends no
    /// `Authorization` header (local servers).
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_concurrency")]
    pub max_in_flight: usize,
    #[serde(default = "default_request_timeout")]
    pub request_timeout_secs: u64,
}

fn default_concurrency() -> usize {
    8
}

fn default_request_timeout() -> u64 {
    120
}

/// Exponential backoff: attempt `i` (0-based) waits `base * 2^i`, scaled by
/// a random factor in `[1 - jitter, 1 + jitter]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 5, base_delay: Duration::from_secs(1), jitter: 0.25 }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        let base = self.base_delay.as_secs_f64() * 2f64.powi(attempt as i32);
        let factor = if self.jitter > 0.0 { rand::thread_rng().gen_range(1.0 - self.jitter..=1.0 + self.jitter) } else { 1.0 };
        Duration::from_secs_f64((base * factor).max(0.0))
    }
}

/// Blocking client for OpenAI-style `POST /chat/completions` endpoints.
pub struct HttpChatClient {
    config: ProviderConfig,
    api_key: Option<String>,
    retry: RetryPolicy,
    client: reqwest::blocking::Client,
    in_flight: Semaphore,
}

enum Failure {
    Retry(String, bool),
    Fatal(GatewayError),
}

impl HttpChatClient {
    /// Reads credentials from the environment; fails early when the
    /// configured variable is unset.
    pub fn new(config: ProviderConfig) -> Result<Self, GatewayError> {
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| GatewayError::MissingCredentials(var.clone()))?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.request_timeout_secs))
            .build()
            .map_err(|e| GatewayError::Transport { attempts: 0, message: e.to_string() })?;
        let in_flight = Semaphore::new(config.max_in_flight);
        Ok(HttpChatClient { config, api_key, retry: RetryPolicy::default(), client, in_flight })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn body(&self, req: &ChatRequest, n: u32) -> Value {
        let mut body = json!({
            "model": self.config.model.as_deref().unwrap_or(&req.model_id),
            "messages": req.messages,
            "temperature": req.temperature,
            "top_p": req.top_p,
            "n": n,
        });
        if let Some(m) = req.max_tokens {
            body["max_tokens"] = json!(m);
        }
        if let Some(stop) = &req.stop {
            body["stop"] = json!(stop);
        }
        body
    }

    fn attempt(&self, body: &Value) -> Result<(Vec<Option<String>>, Usage, BTreeMap<String, String>), Failure> {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let mut rb = self.client.post(&url).header("content-type", "application/json").body(body.to_string());
        if let Some(key) = &self.api_key {
            rb = rb.bearer_auth(key);
        }
        let resp = {
            let _permit = self.in_flight.acquire();
            rb.send()
        };
        let resp = resp.map_err(|e| Failure::Retry(e.to_string(), false))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Failure::Retry(e.to_string(), false))?;
        match status.as_u16() {
            200..=299 => {}
            401 | 403 => return Err(Failure::Fatal(GatewayError::Auth(format!("HTTP {status}")))),
            429 => return Err(Failure::Retry(format!("HTTP {status}"), true)),
            500..=599 => return Err(Failure::Retry(format!("HTTP {status}: {}", snippet(&text)), false)),
            _ => return Err(Failure::Fatal(GatewayError::Provider(format!("HTTP {status}: {}", snippet(&text))))),
        }
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| Failure::Fatal(GatewayError::Provider(format!("malformed response body: {e}"))))?;
        let choices = v["choices"]
            .as_array()
            .ok_or_else(|| Failure::Fatal(GatewayError::Provider("response has no `choices`".into())))?;
        let samples = choices.iter().map(|c| c["message"]["content"].as_str().map(str::to_string)).collect();
        let usage = Usage {
            prompt_tokens: v["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
            completion_tokens: v["usage"]["completion_tokens"].as_u64().unwrap_or(0),
        };
        let mut meta = BTreeMap::new();
        for key in ["id", "model", "system_fingerprint"] {
            if let Some(s) = v[key].as_str() {
                meta.insert(key.to_string(), s.to_string());
            }
        }
        Ok((samples, usage, meta))
    }
}

fn snippet(s: &str) -> &str {
    let end = s.char_indices().nth(200).map_or(s.len(), |(i, _)| i);
    &s[..end]
}

impl ChatModel for HttpChatClient {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        req.validate()?;
        let want = req.n_samples as usize;
        let mut samples: Vec<String> = Vec::with_capacity(want);
        let mut usage = Usage::default();
        let mut meta = BTreeMap::new();
        let mut attempts = 0u32;
        // Providers may return fewer choices than asked; top up with further
        // calls, sharing one attempt budget.
        while samples.len() < want {
            let body = self.body(req, (want - samples.len()) as u32);
            attempts += 1;
            match self.attempt(&body) {
                Ok((got, u, m)) => {
                    usage.prompt_tokens += u.prompt_tokens;
                    usage.completion_tokens += u.completion_tokens;
                    meta = m;
                    if got.is_empty() {
                        return Err(GatewayError::Refusal);
                    }
                    samples.extend(got.into_iter().map(Option::unwrap_or_default).take(want - samples.len()));
                }
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retry(message, rate_limited)) => {
                    if attempts >= self.retry.max_attempts {
                        return Err(if rate_limited {
                            GatewayError::RateLimited { attempts }
                        } else {
                            GatewayError::Transport { attempts, message }
                        });
                    }
                    log::warn!("provider call failed ({message}); retry {attempts}/{}", self.retry.max_attempts);
                    thread::sleep(self.retry.delay(attempts - 1));
                    continue;
                }
            }
            if samples.len() < want && attempts >= self.retry.max_attempts {
                return Err(GatewayError::Provider(format!("provider returned {} of {want} samples", samples.len())));
            }
        }
        if samples.iter().all(|s| s.trim().is_empty()) {
            return Err(GatewayError::Refusal);
        }
        Ok(ChatResponse { samples, usage, provider_meta: meta })
    }
}
