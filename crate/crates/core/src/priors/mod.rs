//! Prior policies π(·|s) over the valid actions at a node.

mod llm;
mod scripted;

use serde::Serialize;
use thiserror::Error;

use crate::llm::LlmError;
use crate::memory::{InTrialMemory, Reflection};
use crate::tree::HistoryKey;

pub use llm::{
    action_prompt, answer_position, logprobs_to_distribution, softmax, LlmPrior, PromptStyle,
    ABSENT_LOGPROB, ACTION_TEMPLATE, SOFTMAX_TEMPERATURE,
};
pub use scripted::{ScriptedPrior, ScriptedRow, ScriptedTable};

/// Probabilities aligned with a node's valid-action list.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PriorDistribution {
    entries: Vec<(String, f64)>,
}

impl PriorDistribution {
    pub fn uniform<S: AsRef<str>>(actions: &[S]) -> Result<Self, PriorError> {
        Self::from_weights(actions, &vec![1.0; actions.len()])
    }

    /// Normalizes non-negative `weights` over `actions`.
    pub fn from_weights<S: AsRef<str>>(actions: &[S], weights: &[f64]) -> Result<Self, PriorError> {
        if actions.is_empty() {
            return Err(PriorError::NoActions);
        }
        assert_eq!(actions.len(), weights.len(), "one weight per action");
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(PriorError::Invalid("negative or non-finite weight".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(PriorError::Invalid("weights sum to zero".into()));
        }
        Ok(Self {
            entries: actions
                .iter()
                .zip(weights)
                .map(|(a, w)| (a.as_ref().to_string(), w / total))
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn probs(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|(_, p)| *p)
    }

    pub fn prob(&self, action: &str) -> Option<f64> {
        self.entries.iter().find(|(a, _)| a == action).map(|(_, p)| *p)
    }

    /// Most probable action, earliest on ties.
    pub fn argmax(&self) -> &str {
        let mut best = &self.entries[0];
        for e in &self.entries[1..] {
            if e.1 > best.1 {
                best = e;
            }
        }
        &best.0
    }

    /// Whether the support is exactly `actions`, in order.
    pub fn matches<S: AsRef<str>>(&self, actions: &[S]) -> bool {
        self.entries.len() == actions.len()
            && self
                .entries
                .iter()
                .zip(actions)
                .all(|((a, _), b)| a == b.as_ref())
    }
}

/// Everything a prior may condition on at one node.
#[derive(Debug, Clone, Copy)]
pub struct PriorRequest<'a> {
    /// Absolute key of the node (episode start to here).
    pub node: HistoryKey,
    /// Actions from the episode start to this node.
    pub history: &'a [String],
    pub in_trial: &'a InTrialMemory,
    pub reflections: &'a [Reflection],
    pub valid_actions: &'a [String],
}

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("no valid actions")]
    NoActions,
    #[error("invalid distribution: {0}")]
    Invalid(String),
    #[error("scripted prior has no row for history {0:?}")]
    FixtureGap(Vec<String>),
    #[error("prior client: {0}")]
    Client(#[from] LlmError),
}

pub trait PriorPolicy {
    fn prior(&mut self, request: &PriorRequest<'_>) -> Result<PriorDistribution, PriorError>;

    /// Calls that reached the underlying source (model or table).
    fn queries(&self) -> u64 {
        0
    }
}

impl<P: PriorPolicy + ?Sized> PriorPolicy for &mut P {
    fn prior(&mut self, request: &PriorRequest<'_>) -> Result<PriorDistribution, PriorError> {
        (**self).prior(request)
    }

    fn queries(&self) -> u64 {
        (**self).queries()
    }
}

impl<P: PriorPolicy + ?Sized> PriorPolicy for Box<P> {
    fn prior(&mut self, request: &PriorRequest<'_>) -> Result<PriorDistribution, PriorError> {
        (**self).prior(request)
    }

    fn queries(&self) -> u64 {
        (**self).queries()
    }
}

#[derive(Debug, Clone, Default)]
pub struct UniformPrior {
    queries: u64,
}

impl PriorPolicy for UniformPrior {
    fn prior(&mut self, request: &PriorRequest<'_>) -> Result<PriorDistribution, PriorError> {
        self.queries += 1;
        PriorDistribution::uniform(request.valid_actions)
    }

    fn queries(&self) -> u64 {
        self.queries
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_examples() {
        for n in [1usize, 4, 7] {
            let acts: Vec<String> = (0..n).map(|i| format!("a{i}")).collect();
            let p = PriorDistribution::uniform(&acts).unwrap();
            assert!(p.probs().all(|x| (x - 1.0 / n as f64).abs() < 1e-15));
            assert!((p.probs().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.matches(&acts));
        }
        assert!(matches!(
            PriorDistribution::uniform::<&str>(&[]),
            Err(PriorError::NoActions)
        ));
    }

    #[test]
    fn weights_normalize() {
        let p = PriorDistribution::from_weights(&["a", "b"], &[1.0, 3.0]).unwrap();
        assert_eq!(p.prob("b"), Some(0.75));
        assert_eq!(p.argmax(), "b");
        assert!(PriorDistribution::from_weights(&["a"], &[-1.0]).is_err());
        assert!(PriorDistribution::from_weights(&["a"], &[0.0]).is_err());
    }
}
