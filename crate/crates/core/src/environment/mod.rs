//! The environment abstraction the planner drives.
//!
//! An [`Environment`] is a text game that reports its valid actions after
//! every transition and can be snapshotted and restored, so that search can
//! re-enter arbitrary tree states. Two implementations ship with the crate:
//! [`ToyEnv`], which interprets a finite [`ToyGameSpec`], and [`RemoteEnv`],
//! which speaks the newline-delimited JSON protocol in [`protocol`] to an
//! external engine.

pub mod protocol;
mod remote;
mod toy;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use remote::{serve, RemoteEnv, ServeStats};
pub use toy::{builtin_game, builtin_names, RandomSpecParams, ToyEnv, ToyGameSpec, ToyState, Transition};

/// What the agent sees after a transition: the engine's response plus the
/// room description and the inventory.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub description: String,
    pub look: String,
    pub inventory: String,
}

impl Observation {
    pub fn new(
        description: impl Into<String>,
        look: impl Into<String>,
        inventory: impl Into<String>,
    ) -> Self {
        Self {
            description: description.into(),
            look: look.into(),
            inventory: inventory.into(),
        }
    }

    /// Single-line prompt form: `[OBS] .. [LOOK] .. [INV] ..`.
    pub fn render(&self) -> String {
        format!(
            "[OBS] {} [LOOK] {} [INV] {}",
            self.description, self.look, self.inventory
        )
    }
}

impl fmt::Display for Observation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// One environment transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub observation: Observation,
    /// Points gained by this transition.
    pub reward: f64,
    /// Cumulative game score after the transition.
    pub score: f64,
    pub done: bool,
    /// Terminal by failure (death, game over without victory). Implies `done`.
    pub failed: bool,
    pub valid_actions: Vec<String>,
}

impl StepResult {
    /// Checks the structural invariants every environment must uphold.
    pub fn check(&self) -> Result<(), EnvError> {
        if self.failed && !self.done {
            return Err(EnvError::Malformed("failed without done".into()));
        }
        if !self.done && self.valid_actions.is_empty() {
            return Err(EnvError::Malformed(
                "non-terminal state with no valid actions".into(),
            ));
        }
        for (i, a) in self.valid_actions.iter().enumerate() {
            if self.valid_actions[..i].contains(a) {
                return Err(EnvError::Malformed(format!("duplicate valid action {a:?}")));
            }
        }
        Ok(())
    }
}

/// Opaque snapshot of a full engine state.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StateToken(pub Vec<u8>);

impl StateToken {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("environment unavailable: {0}")]
    Unavailable(String),
    #[error("invalid action {action:?}")]
    InvalidAction { action: String },
    #[error("episode already finished")]
    EpisodeFinished,
    #[error("invalid or foreign state token")]
    InvalidToken,
    #[error("environment reported malformed state: {0}")]
    Malformed(String),
    #[error(transparent)]
    Protocol(#[from] protocol::ProtocolError),
}

/// A resettable, snapshot-able text game.
///
/// Handles are single-threaded: one call at a time. They may be moved between
/// threads but are never shared.
pub trait Environment {
    fn reset(&mut self) -> Result<StepResult, EnvError>;

    /// Takes one action from the current valid-action list.
    fn step(&mut self, action: &str) -> Result<StepResult, EnvError>;

    fn snapshot(&mut self) -> Result<StateToken, EnvError>;

    /// Puts the engine back into a snapshotted state and returns the view of
    /// that state with a zero reward.
    fn restore(&mut self, token: &StateToken) -> Result<StepResult, EnvError>;

    /// Human-readable game name, used in transcripts.
    fn name(&self) -> &str;
}

impl<E: Environment + ?Sized> Environment for Box<E> {
    fn reset(&mut self) -> Result<StepResult, EnvError> {
        (**self).reset()
    }
    fn step(&mut self, action: &str) -> Result<StepResult, EnvError> {
        (**self).step(action)
    }
    fn snapshot(&mut self) -> Result<StateToken, EnvError> {
        (**self).snapshot()
    }
    fn restore(&mut self, token: &StateToken) -> Result<StepResult, EnvError> {
        (**self).restore(token)
    }
    fn name(&self) -> &str {
        (**self).name()
    }
}
