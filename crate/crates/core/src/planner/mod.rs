//! The search loop, its configuration, and the agent loops built on it.

mod agents;
mod search;
pub mod select;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environment::EnvError;
use crate::memory::Reflection;
use crate::priors::PriorError;
use crate::tree::{NodeStats, SearchTree, TreeError};

pub use agents::{
    llm_agent_loop, reflection_agent_loop, run_episode, EpisodeError, EpisodeErrorKind,
    EpisodeResult, StepLog, LOOP_ESCAPE_REPEATS, MAX_REFLECTION_ROUNDS,
};
pub use search::{NullReflector, Planner};
pub use select::{select_action_mcdml, select_action_static_puct, select_action_uct};

/// Which parts of the method are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Both memories and dynamic pruning.
    #[default]
    Full,
    /// No reflections: the prior sees the in-trial window only.
    NoCrossTrial,
    /// Fixed search depth.
    NoDynamicPruning,
    /// Prior sees the current observation only; no reflections.
    NoMemories,
    /// Plain UCT without a prior, fixed depth.
    Uct,
    /// PUCT with an observation-only prior cached per node, fixed depth.
    StaticPuct,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Full,
        Ablation::NoCrossTrial,
        Ablation::NoDynamicPruning,
        Ablation::NoMemories,
        Ablation::Uct,
        Ablation::StaticPuct,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoCrossTrial => "no_cross_trial",
            Ablation::NoDynamicPruning => "no_dynamic_pruning",
            Ablation::NoMemories => "no_memories",
            Ablation::Uct => "uct",
            Ablation::StaticPuct => "static_puct",
        }
    }

    pub fn uses_reflections(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoDynamicPruning)
    }

    /// Whether the prior sees the in-trial window rather than only the
    /// current observation.
    pub fn uses_in_trial(self) -> bool {
        matches!(
            self,
            Ablation::Full | Ablation::NoCrossTrial | Ablation::NoDynamicPruning
        )
    }

    pub fn uses_prior(self) -> bool {
        self != Ablation::Uct
    }

    pub fn dynamic_pruning(self) -> bool {
        matches!(
            self,
            Ablation::Full | Ablation::NoCrossTrial | Ablation::NoMemories
        )
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| ConfigError(format!("unknown ablation mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid configuration: {0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub gamma: f64,
    pub c_puct: f64,
    pub c_uct: f64,
    /// Budget per search attempt is this times the number of root actions.
    pub sims_per_action: u64,
    /// Replaces the per-action budget with a fixed total when set.
    pub total_simulations: Option<u64>,
    pub d_min: usize,
    pub d_max: usize,
    pub delta_d: usize,
    /// Reflections kept per search root.
    pub k: usize,
    pub seed: u64,
    pub ablation: Ablation,
    /// Horizon when dynamic pruning is off.
    pub fixed_depth: usize,
    /// Keep reflections after committing a move instead of clearing them.
    pub carry_reflections: bool,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            c_puct: 50.0,
            c_uct: 10.0,
            sims_per_action: 50,
            total_simulations: None,
            d_min: 10,
            d_max: 30,
            delta_d: 20,
            k: 3,
            seed: 0,
            ablation: Ablation::Full,
            fixed_depth: 10,
            carry_reflections: false,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: &str| Err(ConfigError(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return fail("gamma must lie in (0, 1]");
        }
        if !(self.c_puct.is_finite() && self.c_puct >= 0.0) {
            return fail("c_puct must be finite and non-negative");
        }
        if !(self.c_uct.is_finite() && self.c_uct >= 0.0) {
            return fail("c_uct must be finite and non-negative");
        }
        if self.sims_per_action == 0 && self.total_simulations.is_none() {
            return fail("sims_per_action must be positive");
        }
        if self.d_min > self.d_max {
            return fail("d_min must not exceed d_max");
        }
        if self.delta_d == 0 {
            return fail("delta_d must be positive");
        }
        Ok(())
    }

    /// Horizons tried in order: `d_min, d_min + Δd, …` up to `d_max` with
    /// pruning, otherwise just the fixed depth.
    pub fn horizons(&self) -> Vec<usize> {
        if !self.ablation.dynamic_pruning() {
            return vec![self.fixed_depth];
        }
        let mut out = Vec::new();
        let mut d = self.d_min;
        while d <= self.d_max {
            out.push(d);
            d += self.delta_d;
        }
        out
    }

    pub fn budget(&self, root_actions: usize) -> u64 {
        self.total_simulations
            .unwrap_or(self.sims_per_action * root_actions as u64)
    }
}

/// Outcome of one root search.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub chosen_action: String,
    pub root_stats: NodeStats,
    /// Over all depth attempts.
    pub simulations_run: u64,
    pub depth_used: usize,
    pub attempts: usize,
    /// Reflections stored during this search.
    pub reflections_generated: usize,
    pub reflector_calls: usize,
    /// Prior evaluations not served from the per-node cache.
    pub prior_queries: u64,
    /// Reflections held at the root when the search ended.
    pub reflections: Vec<Reflection>,
    /// Tree of the last attempt.
    pub tree: SearchTree,
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("root state is terminal")]
    TerminalRoot,
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("environment failed after {simulations} simulations: {source}")]
    Env {
        source: EnvError,
        simulations: u64,
        partial: Option<Box<NodeStats>>,
    },
    #[error("prior failed after {simulations} simulations: {source}")]
    Prior {
        source: PriorError,
        simulations: u64,
        partial: Option<Box<NodeStats>>,
    },
}
