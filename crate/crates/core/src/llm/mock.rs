use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{ChatClient, ChatRequest, ChatResponse, LlmError};

/// Canned responses: exact request hashes first, then substring rules in
/// order, then the default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockFixture {
    pub responses: BTreeMap<String, ChatResponse>,
    pub rules: Vec<MockRule>,
    pub default: Option<ChatResponse>,
}

/// Answers any request whose last message contains `contains`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    pub contains: String,
    pub response: ChatResponse,
}

impl MockFixture {
    pub fn from_json(text: &str) -> Result<Self, LlmError> {
        serde_json::from_str(text).map_err(|e| LlmError::Decode(format!("mock fixture: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Offline client answering from a [`MockFixture`]. Every request is
/// recorded for inspection.
#[derive(Debug, Default)]
pub struct MockClient {
    fixture: MockFixture,
    seen: Mutex<Vec<ChatRequest>>,
}

impl MockClient {
    pub fn new(fixture: MockFixture) -> Self {
        Self {
            fixture,
            seen: Mutex::new(Vec::new()),
        }
    }

    /// Same response to everything.
    pub fn always(response: ChatResponse) -> Self {
        Self::new(MockFixture {
            default: Some(response),
            ..MockFixture::default()
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        Ok(Self::new(MockFixture::load(path)?))
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.seen.lock().unwrap().clone()
    }

    pub fn calls(&self) -> usize {
        self.seen.lock().unwrap().len()
    }
}

impl ChatClient for MockClient {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        self.seen.lock().unwrap().push(request.clone());
        let key = request.cache_key();
        if let Some(r) = self.fixture.responses.get(&key) {
            return Ok(r.clone());
        }
        let last = request.messages.last().map(|m| m.content.as_str()).unwrap_or("");
        if let Some(rule) = self.fixture.rules.iter().find(|r| last.contains(&r.contains)) {
            return Ok(rule.response.clone());
        }
        self.fixture
            .default
            .clone()
            .ok_or(LlmError::FixtureGap(key))
    }
}
