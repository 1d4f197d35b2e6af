//! Chat-completion transport with token logprobs: request/response types,
//! the HTTP client, an on-disk response cache, a fixture-backed mock, and the
//! reflection call built on top.

mod cache;
mod http;
mod mock;
mod reflect;

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::CachedClient;
pub use http::HttpClient;
pub use mock::{MockClient, MockFixture};
pub use reflect::{reflection_prompt, LlmReflector, REFLECTION_TEMPLATE};

/// Prefix marking text cut from the front by [`truncate`].
pub const TRUNCATION_MARKER: &str = "[...truncated]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub want_logprobs: bool,
    pub top_logprobs: u8,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), LlmError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.want_logprobs && !(1..=20).contains(&self.top_logprobs) {
            return Err(LlmError::InvalidRequest(format!(
                "top_logprobs {} outside [1, 20]",
                self.top_logprobs
            )));
        }
        if self.messages.is_empty() {
            return Err(LlmError::InvalidRequest("no messages".into()));
        }
        Ok(())
    }

    /// Content address of the request: model, messages, temperature, and
    /// the requested number of top logprobs.
    pub fn cache_key(&self) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            model: &'a str,
            messages: &'a [ChatMessage],
            temperature: f64,
            top_logprobs: Option<u8>,
        }
        let key = Key {
            model: &self.model,
            messages: &self.messages,
            temperature: self.temperature,
            top_logprobs: self.want_logprobs.then_some(self.top_logprobs),
        };
        let bytes = serde_json::to_vec(&key).expect("key serializes");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Log probabilities at one generated position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprobs {
    pub token: String,
    pub logprob: f64,
    /// Most likely alternatives at this position, best first.
    #[serde(default)]
    pub top_logprobs: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    #[serde(default)]
    pub token_logprobs: Option<Vec<TokenLogprobs>>,
}

impl ChatResponse {
    pub fn text(content: impl Into<String>) -> Self {
        Self {
            content: content.into(),
            token_logprobs: None,
        }
    }

    /// A one-token answer with the given alternatives at that position.
    pub fn single_token(content: &str, top: &[(&str, f64)]) -> Self {
        let logprob = top
            .iter()
            .find(|(t, _)| *t == content)
            .map(|&(_, lp)| lp)
            .unwrap_or(0.0);
        Self {
            content: content.to_string(),
            token_logprobs: Some(vec![TokenLogprobs {
                token: content.to_string(),
                logprob,
                top_logprobs: top.iter().map(|&(t, lp)| (t.to_string(), lp)).collect(),
            }]),
        }
    }
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("authentication rejected (HTTP {0})")]
    Auth(u16),
    #[error("rate limited")]
    RateLimited,
    #[error("server error (HTTP {0})")]
    Server(u16),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("transport: {0}")]
    Transport(String),
    #[error("could not decode response: {0}")]
    Decode(String),
    #[error("no fixture response for request {0}")]
    FixtureGap(String),
    #[error("cache-only mode: no cached response for request {0}")]
    CacheMiss(String),
    #[error("missing API key: environment variable {0} is unset")]
    MissingKey(String),
    #[error("cache i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl LlmError {
    /// Worth another attempt after a pause.
    pub fn is_transient(&self) -> bool {
        matches!(
            self,
            LlmError::RateLimited | LlmError::Server(_) | LlmError::Timeout | LlmError::Transport(_)
        )
    }

    /// Offline-mode failures that must stop a run rather than degrade it.
    pub fn is_offline_gap(&self) -> bool {
        matches!(self, LlmError::FixtureGap(_) | LlmError::CacheMiss(_))
    }
}

/// Anything that can answer a chat-completion request. Shareable across
/// threads; calls block.
pub trait ChatClient: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError>;
}

impl<C: ChatClient + ?Sized> ChatClient for Arc<C> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).complete(request)
    }
}

impl<C: ChatClient + ?Sized> ChatClient for Box<C> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).complete(request)
    }
}

impl<C: ChatClient + ?Sized> ChatClient for &C {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).complete(request)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    #[serde(with = "secs")]
    pub timeout: Duration,
    pub retries: u32,
    #[serde(with = "secs")]
    pub backoff: Duration,
    pub cache_path: Option<std::path::PathBuf>,
    /// Prompt budget in characters.
    pub prompt_budget: usize,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-3.5-turbo-0125".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            timeout: Duration::from_secs(60),
            retries: 3,
            backoff: Duration::from_secs(1),
            cache_path: None,
            prompt_budget: 12_000,
        }
    }
}

impl ClientConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        if self.prompt_budget == 0 {
            return Err(LlmError::InvalidRequest("prompt budget must be > 0".into()));
        }
        Ok(())
    }
}

mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

/// Keeps the most recent `budget` characters, prefixing the marker when
/// anything was cut.
pub fn truncate(text: &str, budget: usize) -> String {
    let len = text.chars().count();
    if len <= budget {
        return text.to_string();
    }
    let marker_len = TRUNCATION_MARKER.chars().count();
    if budget <= marker_len {
        return text.chars().skip(len - budget).collect();
    }
    let keep = budget - marker_len;
    let mut out = String::with_capacity(budget + 8);
    out.push_str(TRUNCATION_MARKER);
    out.extend(text.chars().skip(len - keep));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn truncate_identity_under_budget() {
        assert_eq!(truncate("abc", 10), "abc");
    }

    #[test]
    fn truncate_keeps_suffix() {
        let text: String = (0..10_000).map(|i| char::from(b'a' + (i % 26) as u8)).collect();
        let out = truncate(&text, 4_000);
        assert_eq!(out.chars().count(), 4_000);
        assert!(out.starts_with(TRUNCATION_MARKER));
        assert!(text.ends_with(&out[TRUNCATION_MARKER.len()..]));
    }

    #[test]
    fn truncate_tiny_budget() {
        assert_eq!(truncate("abcdefghijklmnopqrstuvwxyz", 3), "xyz");
    }

    proptest! {
        #[test]
        fn truncate_bounded_and_idempotent(text in "\\PC{0,300}", budget in 1usize..200) {
            let once = truncate(&text, budget);
            prop_assert!(once.chars().count() <= budget);
            prop_assert_eq!(truncate(&once, budget), once.clone());
            let tail: String = text.chars().rev().take(once.chars().count().min(budget.saturating_sub(TRUNCATION_MARKER.len()))).collect::<Vec<_>>().into_iter().rev().collect();
            prop_assert!(once.ends_with(&tail));
        }
    }

    #[test]
    fn request_validation() {
        let mut r = ChatRequest {
            model: "m".into(),
            messages: vec![ChatMessage::user("hi")],
            temperature: 0.0,
            want_logprobs: true,
            top_logprobs: 20,
        };
        assert!(r.validate().is_ok());
        r.top_logprobs = 21;
        assert!(r.validate().is_err());
        r.top_logprobs = 20;
        r.temperature = 2.5;
        assert!(r.validate().is_err());
    }

    #[test]
    fn cache_key_ignores_nothing_relevant() {
        let r = ChatRequest {
            model: "m".into(),
            messages: vec![ChatMessage::user("hi")],
            temperature: 0.0,
            want_logprobs: true,
            top_logprobs: 20,
        };
        let mut other = r.clone();
        assert_eq!(r.cache_key(), other.cache_key());
        other.messages[0].content.push('!');
        assert_ne!(r.cache_key(), other.cache_key());
        let mut other = r.clone();
        other.model = "n".into();
        assert_ne!(r.cache_key(), other.cache_key());
        let mut other = r.clone();
        other.top_logprobs = 5;
        assert_ne!(r.cache_key(), other.cache_key());
        assert_eq!(r.cache_key().len(), 64);
    }
}
