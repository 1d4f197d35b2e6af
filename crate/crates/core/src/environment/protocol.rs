//! Newline-delimited JSON frames spoken between the planner and an external
//! game engine.
//!
//! Every frame is one JSON object on one line, discriminated by `"type"`.
//! Unknown fields are ignored; unknown frame types are malformed.

use std::io;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Observation, StateToken, StepResult};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Request {
    Hello { version: u32 },
    Reset,
    Step { action: String },
    Snapshot,
    Restore { token: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Response {
    Hello { version: u32, game: String },
    State(StateFrame),
    Error { code: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFrame {
    pub obs: String,
    pub look: String,
    pub inv: String,
    pub reward: f64,
    pub score: f64,
    pub done: bool,
    pub failed: bool,
    pub valid_actions: Vec<String>,
    pub token: Option<String>,
}

impl StateFrame {
    pub fn from_step(r: &StepResult, token: Option<&StateToken>) -> Self {
        Self {
            obs: r.observation.description.clone(),
            look: r.observation.look.clone(),
            inv: r.observation.inventory.clone(),
            reward: r.reward,
            score: r.score,
            done: r.done,
            failed: r.failed,
            valid_actions: r.valid_actions.clone(),
            token: token.map(encode_token),
        }
    }

    pub fn to_step(&self) -> StepResult {
        StepResult {
            observation: Observation::new(&self.obs, &self.look, &self.inv),
            reward: self.reward,
            score: self.score,
            done: self.done,
            failed: self.failed,
            valid_actions: self.valid_actions.clone(),
        }
    }
}

/// Error codes carried in `{"type":"error"}` frames.
pub mod codes {
    pub const MALFORMED: &str = "malformed";
    pub const INVALID_ACTION: &str = "invalid_action";
    pub const EPISODE_FINISHED: &str = "episode_finished";
    pub const INVALID_TOKEN: &str = "invalid_token";
    pub const VERSION: &str = "version_mismatch";
    pub const ENGINE: &str = "engine_error";
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("protocol version mismatch: expected {expected}, peer speaks {found}")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("timed out waiting for a frame")]
    Timeout,
    #[error("connection closed")]
    Closed,
    #[error("unexpected frame: {0}")]
    Unexpected(String),
    #[error("peer error {code}: {message}")]
    Remote { code: String, message: String },
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

pub fn encode_request(req: &Request) -> String {
    serde_json::to_string(req).expect("requests always serialize")
}

/// Refuses non-finite rewards and scores, which JSON cannot carry.
pub fn encode_response(resp: &Response) -> Result<String, ProtocolError> {
    if let Response::State(f) = resp {
        if !(f.reward.is_finite() && f.score.is_finite()) {
            return Err(ProtocolError::Malformed("non-finite reward or score".into()));
        }
    }
    serde_json::to_string(resp).map_err(|e| ProtocolError::Malformed(e.to_string()))
}

pub fn decode_request(line: &str) -> Result<Request, ProtocolError> {
    serde_json::from_str(line.trim_end_matches(['\r', '\n']))
        .map_err(|e| ProtocolError::Malformed(e.to_string()))
}

pub fn decode_response(line: &str) -> Result<Response, ProtocolError> {
    serde_json::from_str(line.trim_end_matches(['\r', '\n']))
        .map_err(|e| ProtocolError::Malformed(e.to_string()))
}

pub fn encode_token(token: &StateToken) -> String {
    BASE64.encode(token.as_bytes())
}

pub fn decode_token(text: &str) -> Result<StateToken, ProtocolError> {
    BASE64
        .decode(text)
        .map(StateToken)
        .map_err(|e| ProtocolError::Malformed(format!("bad token: {e}")))
}
