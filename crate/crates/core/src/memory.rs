//! In-trial trajectory windows and cross-trial reflections.
//!
//! The in-trial window is the short-term context the prior sees: the previous
//! observation, the action taken from it, and the current observation. The
//! cross-trial store holds one-sentence reflections produced from failed
//! simulations, at most `k` per search root.

use std::collections::HashMap;

use log::warn;
use serde::Serialize;
use thiserror::Error;

use crate::environment::{Observation, StepResult};
use crate::tree::HistoryKey;

/// Rendered in place of an empty reflection list.
pub const NO_MEMORIES: &str = "(no prior memories)";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryRecord {
    pub observation: Observation,
    pub action: String,
    pub reward: f64,
    /// Game score after the action.
    pub score: f64,
}

/// Observations and actions along one path, ending at the current observation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub records: Vec<TrajectoryRecord>,
    pub current: Observation,
}

impl Trajectory {
    pub fn new(start: Observation) -> Self {
        Self {
            records: Vec::new(),
            current: start,
        }
    }

    pub fn push(&mut self, action: &str, result: &StepResult) {
        let prev = std::mem::replace(&mut self.current, result.observation.clone());
        self.records.push(TrajectoryRecord {
            observation: prev,
            action: action.to_string(),
            reward: result.reward,
            score: result.score,
        });
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Drops records past `len`, restoring the current observation from the
    /// first dropped record.
    pub fn truncate(&mut self, len: usize) {
        if len < self.records.len() {
            let mut dropped = self.records.drain(len..);
            self.current = dropped.next().unwrap().observation;
        }
    }

    /// The `(o_{t-1}, a_{t-1}, o_t)` window; just `o_0` at the start.
    pub fn last_part(&self) -> InTrialMemory {
        InTrialMemory {
            previous: self.records.last().cloned(),
            current: self.current.clone(),
        }
    }

    /// Block rendering: one `[OBS]`/`[ACTION]`/`[REWARD]`/`[GAME SCORE]`
    /// block per step, blank-line separated, then the current observation.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            render_record(&mut out, r);
            out.push_str("\n\n");
        }
        out.push_str(&self.current.render());
        out
    }
}

fn render_record(out: &mut String, r: &TrajectoryRecord) {
    out.push_str(&r.observation.render());
    out.push_str("\n[ACTION] ");
    out.push_str(&r.action);
    out.push_str("\n[REWARD] ");
    out.push_str(&fmt_number(r.reward));
    out.push_str("\n[GAME SCORE] ");
    out.push_str(&fmt_number(r.score));
}

/// Integers print without a fractional part.
pub fn fmt_number(x: f64) -> String {
    if x.is_finite() && x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InTrialMemory {
    pub previous: Option<TrajectoryRecord>,
    pub current: Observation,
}

impl InTrialMemory {
    /// A window holding only the current observation.
    pub fn current_only(current: Observation) -> Self {
        Self {
            previous: None,
            current,
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        if let Some(r) = &self.previous {
            render_record(&mut out, r);
            out.push_str("\n\n");
        }
        out.push_str(&self.current.render());
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Reflection {
    pub text: String,
    /// Which simulated trajectory produced it.
    pub source: String,
    /// Simulation index at creation.
    pub created_at: u64,
}

#[derive(Debug, Error)]
pub enum ReflectError {
    #[error("reflection unavailable: {0}")]
    Unavailable(String),
}

/// Turns a failed trajectory into a one-sentence suggestion.
pub trait Reflector {
    fn reflect(&mut self, trajectory_text: &str) -> Result<String, ReflectError>;
}

impl<F> Reflector for F
where
    F: FnMut(&str) -> Result<String, ReflectError>,
{
    fn reflect(&mut self, trajectory_text: &str) -> Result<String, ReflectError> {
        self(trajectory_text)
    }
}

/// Always answers with the same text. Offline stand-in for a model.
#[derive(Debug, Clone)]
pub struct FixedReflector(pub String);

impl Reflector for FixedReflector {
    fn reflect(&mut self, _: &str) -> Result<String, ReflectError> {
        Ok(self.0.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordOutcome {
    Stored,
    CapacityReached,
    /// The reflector failed; nothing stored.
    Skipped,
}

/// One line of the reflection log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReflectionLogEntry {
    pub root: String,
    pub sim_index: u64,
    pub text: String,
}

/// Reflections per search root, capped at `k` each.
#[derive(Debug, Clone, Default)]
pub struct CrossTrialMemory {
    capacity: usize,
    store: HashMap<HistoryKey, Vec<Reflection>>,
    invocations: HashMap<HistoryKey, usize>,
}

impl CrossTrialMemory {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            store: HashMap::new(),
            invocations: HashMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn reflections(&self, root: HistoryKey) -> &[Reflection] {
        self.store.get(&root).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn is_full(&self, root: HistoryKey) -> bool {
        self.reflections(root).len() >= self.capacity
    }

    /// How many times the reflector has been called for `root`.
    pub fn reflector_calls(&self, root: HistoryKey) -> usize {
        self.invocations.get(&root).copied().unwrap_or(0)
    }

    pub fn roots(&self) -> impl Iterator<Item = HistoryKey> + '_ {
        self.store.keys().copied()
    }

    /// Asks `reflector` about a failed trajectory and keeps the answer, unless
    /// the root already holds `k` reflections, in which case the reflector is
    /// not called at all.
    pub fn record_failure<R: Reflector + ?Sized>(
        &mut self,
        root: HistoryKey,
        trajectory: &Trajectory,
        sim_index: u64,
        reflector: &mut R,
    ) -> RecordOutcome {
        if self.is_full(root) {
            return RecordOutcome::CapacityReached;
        }
        *self.invocations.entry(root).or_default() += 1;
        match reflector.reflect(&trajectory.render()) {
            Ok(text) if !text.trim().is_empty() => {
                self.store.entry(root).or_default().push(Reflection {
                    text: text.trim().to_string(),
                    source: format!("sim-{sim_index}"),
                    created_at: sim_index,
                });
                RecordOutcome::Stored
            }
            Ok(_) => {
                warn!("reflector returned empty text; skipping");
                RecordOutcome::Skipped
            }
            Err(e) => {
                warn!("{e}; search continues without it");
                RecordOutcome::Skipped
            }
        }
    }

    /// Moves everything stored under `from` to `to`, used when reflections
    /// are carried across a committed move.
    pub fn rekey(&mut self, from: HistoryKey, to: HistoryKey) {
        if let Some(list) = self.store.remove(&from) {
            self.store.insert(to, list);
        }
        if let Some(n) = self.invocations.remove(&from) {
            self.invocations.insert(to, n);
        }
    }

    pub fn clear(&mut self) {
        self.store.clear();
        self.invocations.clear();
    }

    pub fn log_entries(&self, root: HistoryKey) -> Vec<ReflectionLogEntry> {
        self.reflections(root)
            .iter()
            .map(|r| ReflectionLogEntry {
                root: root.to_string(),
                sim_index: r.created_at,
                text: r.text.clone(),
            })
            .collect()
    }
}

/// Prompt fragments for the in-trial window and the reflection list.
pub fn render_memories(in_trial: &InTrialMemory, reflections: &[Reflection]) -> (String, String) {
    (in_trial.render(), render_reflections(reflections))
}

pub fn render_reflections(reflections: &[Reflection]) -> String {
    if reflections.is_empty() {
        return NO_MEMORIES.to_string();
    }
    reflections
        .iter()
        .enumerate()
        .map(|(i, r)| format!("{}. {}", i + 1, r.text))
        .collect::<Vec<_>>()
        .join("\n")
}
