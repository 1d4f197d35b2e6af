use log::warn;

use super::{truncate, ChatClient, ChatMessage, ChatRequest};
use crate::memory::{ReflectError, Reflector};

pub const REFLECTION_TEMPLATE: &str = include_str!("../../prompts/reflection.txt");

/// The reflection prompt with `trajectory` substituted, the trajectory
/// truncated from the front to `budget` characters.
pub fn reflection_prompt(trajectory: &str, budget: usize) -> String {
    REFLECTION_TEMPLATE.replace("{TRAJECTORY}", &truncate(trajectory, budget))
}

/// Reflector backed by a chat model at temperature 0.
pub struct LlmReflector<C> {
    client: C,
    model: String,
    budget: usize,
    calls: usize,
}

impl<C: ChatClient> LlmReflector<C> {
    pub fn new(client: C, model: impl Into<String>, budget: usize) -> Self {
        Self {
            client,
            model: model.into(),
            budget,
            calls: 0,
        }
    }

    pub fn calls(&self) -> usize {
        self.calls
    }

    pub fn request(&self, trajectory: &str) -> ChatRequest {
        ChatRequest {
            model: self.model.clone(),
            messages: vec![ChatMessage::user(reflection_prompt(trajectory, self.budget))],
            temperature: 0.0,
            want_logprobs: false,
            top_logprobs: 20,
        }
    }
}

impl<C: ChatClient> Reflector for LlmReflector<C> {
    fn reflect(&mut self, trajectory_text: &str) -> Result<String, ReflectError> {
        if trajectory_text.trim().is_empty() {
            return Err(ReflectError::Unavailable("empty trajectory".into()));
        }
        self.calls += 1;
        let resp = self
            .client
            .complete(&self.request(trajectory_text))
            .map_err(|e| {
                warn!("reflection call failed: {e}");
                ReflectError::Unavailable(e.to_string())
            })?;
        let paragraph = resp
            .content
            .trim()
            .split("\n\n")
            .next()
            .unwrap_or("")
            .trim()
            .to_string();
        if paragraph.is_empty() {
            return Err(ReflectError::Unavailable("model returned no text".into()));
        }
        Ok(paragraph)
    }
}
