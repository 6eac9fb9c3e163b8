//! Chat-model access shared by every pipeline stage and the evaluation
//! harness.
//!
//! Stages talk to a [`ChatModel`]. The concrete model is either the HTTP
//! client for chat-completions providers, a [`ScriptedModel`] used for
//! fixtures, or either of those wrapped in a [`Gateway`] that records
//! requests to a transcript or replays them from one.

mod fence;
mod http;
mod scripted;
mod transcript;

pub use fence::{extract_code_block, extract_code_blocks, CodeBlock};
pub use http::{HttpChatClient, ProviderConfig, RetryPolicy};
pub use scripted::{ScriptRule, ScriptedModel};
pub use transcript::{Gateway, ReplayMode, Transcript, TranscriptEntry};

use std::collections::BTreeMap;

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Message { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Message { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub top_p: f64,
    pub n_samples: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<Vec<String>>,
}

/// Sampling settings used to build a request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub temperature: f64,
    pub top_p: f64,
    pub n: u32,
}

impl Sampling {
    pub const fn new(temperature: f64, top_p: f64, n: u32) -> Self {
        Sampling { temperature, top_p, n }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RequestError {
    #[error("request has no messages")]
    NoMessages,
    #[error("first non-system message must come from the user")]
    FirstNotUser,
    #[error("temperature {0} outside [0, 2]")]
    Temperature(String),
    #[error("top_p {0} outside (0, 1]")]
    TopP(String),
    #[error("n_samples must be positive")]
    NoSamples,
}

impl ChatRequest {
    pub fn new(model_id: impl Into<String>, messages: Vec<Message>, sampling: Sampling) -> Self {
        ChatRequest {
            model_id: model_id.into(),
            messages,
            temperature: sampling.temperature,
            top_p: sampling.top_p,
            n_samples: sampling.n,
            max_tokens: None,
            stop: None,
        }
    }

    pub fn validate(&self) -> Result<(), RequestError> {
        if self.messages.is_empty() {
            return Err(RequestError::NoMessages);
        }
        if self.messages.iter().find(|m| m.role != Role::System).is_none_or(|m| m.role != Role::User) {
            return Err(RequestError::FirstNotUser);
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(RequestError::Temperature(self.temperature.to_string()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(RequestError::TopP(self.top_p.to_string()));
        }
        if self.n_samples == 0 {
            return Err(RequestError::NoSamples);
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON serialization (fields in declaration
    /// order, no whitespace).
    pub fn content_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("request serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub samples: Vec<String>,
    #[serde(default)]
    pub usage: Usage,
    #[serde(default)]
    pub provider_meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(#[from] RequestError),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("provider returned no usable completion")]
    Refusal,
    #[error("transport failed after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("provider error: {0}")]
    Provider(String),
    #[error("fixture miss for request {0}")]
    FixtureMiss(String),
    #[error("missing credentials: environment variable `{0}` is not set")]
    MissingCredentials(String),
    #[error("transcript I/O error: {0}")]
    Transcript(String),
}

impl GatewayError {
    /// Refusals are content failures that callers may regenerate after; all
    /// other errors are infrastructure failures.
    pub fn is_refusal(&self) -> bool {
        matches!(self, GatewayError::Refusal)
    }
}

/// Anything that answers chat requests.
pub trait ChatModel: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError>;
}

impl<T: ChatModel + ?Sized> ChatModel for std::sync::Arc<T> {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (**self).complete(req)
    }
}

/// Counting semaphore bounding in-flight provider requests.
#[derive(Debug)]
pub struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Semaphore { permits: Mutex::new(permits.max(1)), cv: Condvar::new() }
    }

    pub fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut p = self.permits.lock();
        while *p == 0 {
            self.cv.wait(&mut p);
        }
        *p -= 1;
        SemaphoreGuard { sem: self }
    }
}

pub struct SemaphoreGuard<'a> {
    sem: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.sem.permits.lock() += 1;
        self.sem.cv.notify_one();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req() -> ChatRequest {
        ChatRequest::new("m", vec![Message::system("s"), Message::user("u")], Sampling::new(0.3, 0.95, 1))
    }

    #[test]
    fn validation() {
        assert!(req().validate().is_ok());
        let mut r = req();
        r.messages = vec![Message::system("s"), Message::assistant("a")];
        assert_eq!(r.validate(), Err(RequestError::FirstNotUser));
        let mut r = req();
        r.messages.clear();
        assert_eq!(r.validate(), Err(RequestError::NoMessages));
        let mut r = req();
        r.top_p = 0.0;
        assert!(r.validate().is_err());
        let mut r = req();
        r.temperature = 2.5;
        assert!(r.validate().is_err());
        let mut r = req();
        r.n_samples = 0;
        assert_eq!(r.validate(), Err(RequestError::NoSamples));
    }

    #[test]
    fn hash_is_content_addressed() {
        assert_eq!(req().content_hash(), req().content_hash());
        let mut other = req();
        other.temperature = 0.31;
        assert_ne!(req().content_hash(), other.content_hash());
    }

    #[test]
    fn semaphore_bounds_concurrency() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        use std::sync::Arc;
        let sem = Arc::new(Semaphore::new(2));
        let live = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let (sem, live, peak) = (sem.clone(), live.clone(), peak.clone());
                std::thread::spawn(move || {
                    let _g = sem.acquire();
                    let now = live.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(std::time::Duration::from_millis(10));
                    live.fetch_sub(1, Ordering::SeqCst);
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
