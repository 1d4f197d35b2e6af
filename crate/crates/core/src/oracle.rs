//! Exhaustive expectimax over a small deterministic game, used as ground
//! truth for the search.

use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::environment::{EnvError, Environment, StateToken, StepResult};

/// Enumeration cost grows as |A|^H; refuse anything deeper.
pub const MAX_ORACLE_HORIZON: usize = 8;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("horizon {horizon} is too deep for exhaustive enumeration (at most {max})")]
    HorizonTooLarge { horizon: usize, max: usize },
    #[error("gamma must lie in [0, 1], got {0}")]
    Gamma(f64),
    #[error("root state is terminal")]
    TerminalRoot,
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Exact values of one root action.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleRow {
    pub action: String,
    /// Take the action, then play uniformly at random until the horizon.
    pub rollout_q: f64,
    /// Take the action, then play optimally until the horizon.
    pub optimal_q: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleTable {
    pub game: String,
    pub horizon: usize,
    pub gamma: f64,
    pub rows: Vec<OracleRow>,
}

fn first_max<'a>(rows: impl Iterator<Item = (&'a str, f64)>) -> Option<&'a str> {
    let mut best: Option<(&str, f64)> = None;
    for (a, v) in rows {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((a, v));
        }
    }
    best.map(|(a, _)| a)
}

impl OracleTable {
    pub fn row(&self, action: &str) -> Option<&OracleRow> {
        self.rows.iter().find(|r| r.action == action)
    }

    /// First action with the highest optimal value.
    pub fn optimal_argmax(&self) -> Option<&str> {
        first_max(self.rows.iter().map(|r| (r.action.as_str(), r.optimal_q)))
    }

    pub fn rollout_argmax(&self) -> Option<&str> {
        first_max(self.rows.iter().map(|r| (r.action.as_str(), r.rollout_q)))
    }
}

impl fmt::Display for OracleTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} horizon={} gamma={}", self.game, self.horizon, self.gamma)?;
        let w = self.rows.iter().map(|r| r.action.len()).max().unwrap_or(6).max(6);
        writeln!(f, "{:<w$}  {:>10}  {:>10}", "action", "rollout_q", "optimal_q")?;
        for r in &self.rows {
            writeln!(f, "{:<w$}  {:>10.4}  {:>10.4}", r.action, r.rollout_q, r.optimal_q)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Backup {
    Mean,
    Max,
}

struct Walker<'e, E: ?Sized> {
    env: &'e mut E,
    gamma: f64,
}

impl<E: Environment + ?Sized> Walker<'_, E> {
    /// Value of `state` with `left` steps remaining.
    fn value(&mut self, token: &StateToken, state: &StepResult, left: usize, how: Backup) -> Result<f64, EnvError> {
        if state.done || left == 0 || state.valid_actions.is_empty() {
            return Ok(0.0);
        }
        let mut acc = match how {
            Backup::Mean => 0.0,
            Backup::Max => f64::NEG_INFINITY,
        };
        for a in &state.valid_actions {
            let q = self.q(token, a, left, how)?;
            match how {
                Backup::Mean => acc += q,
                Backup::Max => acc = acc.max(q),
            }
        }
        Ok(match how {
            Backup::Mean => acc / state.valid_actions.len() as f64,
            Backup::Max => acc,
        })
    }

    fn q(&mut self, token: &StateToken, action: &str, left: usize, how: Backup) -> Result<f64, EnvError> {
        self.env.restore(token)?;
        let next = self.env.step(action)?;
        let tail = if next.done || left <= 1 {
            0.0
        } else {
            let t = self.env.snapshot()?;
            self.value(&t, &next, left - 1, how)?
        };
        Ok(next.reward + self.gamma * tail)
    }
}

/// Exact root action values of the environment's initial state over
/// `horizon` steps. The environment is left reset.
pub fn oracle_table<E: Environment + ?Sized>(env: &mut E, horizon: usize, gamma: f64) -> Result<OracleTable, OracleError> {
    if horizon > MAX_ORACLE_HORIZON {
        return Err(OracleError::HorizonTooLarge {
            horizon,
            max: MAX_ORACLE_HORIZON,
        });
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(OracleError::Gamma(gamma));
    }
    let root = env.reset()?;
    if root.done {
        return Err(OracleError::TerminalRoot);
    }
    let token = env.snapshot()?;
    let mut w = Walker { env, gamma };
    let mut rows = Vec::with_capacity(root.valid_actions.len());
    for a in &root.valid_actions {
        let (rollout_q, optimal_q) = if horizon == 0 {
            (0.0, 0.0)
        } else {
            (
                w.q(&token, a, horizon, Backup::Mean)?,
                w.q(&token, a, horizon, Backup::Max)?,
            )
        };
        rows.push(OracleRow {
            action: a.clone(),
            rollout_q,
            optimal_q,
        });
    }
    let game = w.env.name().to_string();
    w.env.reset()?;
    Ok(OracleTable {
        game,
        horizon,
        gamma,
        rows,
    })
}
