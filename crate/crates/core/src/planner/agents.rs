use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use super::{Planner, SearchError, SearchResult};
use crate::environment::{EnvError, Environment, StepResult};
use crate::memory::{Reflection, Reflector, Trajectory};
use crate::priors::{PriorError, PriorPolicy, PriorRequest};
use crate::tree::HistoryKey;

/// Consecutive identical choices in an unchanged state before the greedy
/// agent plays a random action instead.
pub const LOOP_ESCAPE_REPEATS: usize = 5;
pub const MAX_REFLECTION_ROUNDS: usize = 3;

/// One line of an episode transcript.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    /// Observation the action was chosen in.
    pub obs: String,
    pub action: String,
    pub reward: f64,
    pub score: f64,
    pub depth_used: Option<usize>,
    pub sims: Option<u64>,
    pub reflections: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    /// The environment's cumulative score when the episode stopped.
    pub final_score: f64,
    pub steps: usize,
    pub done: bool,
    pub failed: bool,
    pub transcript: Trajectory,
    pub log: Vec<StepLog>,
    /// One per real step; empty for the tree-free agents.
    pub searches: Vec<SearchResult>,
}

impl EpisodeResult {
    fn start(first: &StepResult) -> Self {
        Self {
            final_score: first.score,
            steps: 0,
            done: first.done,
            failed: first.failed,
            transcript: Trajectory::new(first.observation.clone()),
            log: Vec::new(),
            searches: Vec::new(),
        }
    }

    /// `held` lists the reflections in effect when no search ran.
    fn record(
        &mut self,
        action: &str,
        chosen_in: &StepResult,
        next: &StepResult,
        search: Option<SearchResult>,
        held: &[Reflection],
    ) {
        let reflections = match &search {
            Some(s) => &s.reflections[..],
            None => held,
        };
        let reflections = reflections.iter().map(|r| r.text.clone()).collect();
        self.log.push(StepLog {
            step: self.steps,
            obs: chosen_in.observation.render(),
            action: action.to_string(),
            reward: next.reward,
            score: next.score,
            depth_used: search.as_ref().map(|s| s.depth_used),
            sims: search.as_ref().map(|s| s.simulations_run),
            reflections,
        });
        self.searches.extend(search);
        self.transcript.push(action, next);
        self.steps += 1;
        self.final_score = next.score;
        self.done = next.done;
        self.failed = next.failed;
    }

    /// Finished without failing.
    pub fn won(&self) -> bool {
        self.done && !self.failed
    }

    pub fn actions(&self) -> Vec<String> {
        self.transcript.records.iter().map(|r| r.action.clone()).collect()
    }
}

#[derive(Debug, Error)]
pub enum EpisodeErrorKind {
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Prior(#[from] PriorError),
}

/// An aborted episode together with everything recorded before the abort.
#[derive(Debug, Error)]
#[error("episode aborted after {} steps: {kind}", partial.steps)]
pub struct EpisodeError {
    pub kind: EpisodeErrorKind,
    pub partial: Box<EpisodeResult>,
}

fn abort(kind: impl Into<EpisodeErrorKind>, partial: &EpisodeResult) -> EpisodeError {
    EpisodeError {
        kind: kind.into(),
        partial: Box::new(partial.clone()),
    }
}

fn reset<E: Environment + ?Sized>(env: &mut E) -> Result<StepResult, EpisodeError> {
    env.reset().map_err(|e| EpisodeError {
        kind: e.into(),
        partial: Box::new(EpisodeResult {
            final_score: 0.0,
            steps: 0,
            done: false,
            failed: false,
            transcript: Trajectory::new(Default::default()),
            log: Vec::new(),
            searches: Vec::new(),
        }),
    })
}

/// Plays one episode: search, commit the chosen action, re-root, until the
/// game ends or `max_steps` actions have been taken.
pub fn run_episode<E, P, R>(
    env: &mut E,
    planner: &mut Planner<P, R>,
    max_steps: usize,
) -> Result<EpisodeResult, EpisodeError>
where
    E: Environment + ?Sized,
    P: PriorPolicy,
    R: Reflector,
{
    planner.start_episode();
    let mut state = reset(env)?;
    let mut out = EpisodeResult::start(&state);
    while !state.done && out.steps < max_steps {
        let search = planner
            .search(env, &state, &out.transcript)
            .map_err(|e| abort(e, &out))?;
        let action = search.chosen_action.clone();
        let from = HistoryKey::from_actions(out.actions());
        let next = env.step(&action).map_err(|e| abort(e, &out))?;
        out.record(&action, &state, &next, Some(search), &[]);
        planner.advance(from, from.extend(&action));
        state = next;
    }
    Ok(out)
}

fn greedy_episode<E, P>(
    env: &mut E,
    prior: &mut P,
    reflections: &[Reflection],
    rng: &mut ChaCha8Rng,
    max_steps: usize,
) -> Result<EpisodeResult, EpisodeError>
where
    E: Environment + ?Sized,
    P: PriorPolicy + ?Sized,
{
    let mut state = reset(env)?;
    let mut out = EpisodeResult::start(&state);
    let mut last: Option<(String, String)> = None;
    let mut repeats = 0;
    while !state.done && out.steps < max_steps {
        let history = out.actions();
        let in_trial = out.transcript.last_part();
        let dist = prior
            .prior(&PriorRequest {
                node: HistoryKey::from_actions(&history),
                history: &history,
                in_trial: &in_trial,
                reflections,
                valid_actions: &state.valid_actions,
            })
            .map_err(|e| abort(e, &out))?;
        let mut action = dist.argmax().to_string();
        let seen = (state.observation.render(), action.clone());
        repeats = if last.as_ref() == Some(&seen) { repeats + 1 } else { 1 };
        last = Some(seen);
        if repeats >= LOOP_ESCAPE_REPEATS {
            let i = rng.random_range(0..state.valid_actions.len());
            action = state.valid_actions[i].clone();
            repeats = 0;
            last = None;
        }
        let next = env.step(&action).map_err(|e| abort(e, &out))?;
        out.record(&action, &state, &next, None, reflections);
        state = next;
    }
    Ok(out)
}

/// Tree-free baseline: play the prior's most likely action each step,
/// escaping loops with a random action.
pub fn llm_agent_loop<E, P>(
    env: &mut E,
    prior: &mut P,
    seed: u64,
    max_steps: usize,
) -> Result<EpisodeResult, EpisodeError>
where
    E: Environment + ?Sized,
    P: PriorPolicy + ?Sized,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    greedy_episode(env, prior, &[], &mut rng, max_steps)
}

/// Greedy play repeated across episodes, each later episode seeing the
/// reflections written about the earlier ones. At most `rounds` (capped at
/// three) reflections are written, so at most `rounds + 1` episodes are
/// played; play stops early after a win.
pub fn reflection_agent_loop<E, P, R>(
    env: &mut E,
    prior: &mut P,
    reflector: &mut R,
    rounds: usize,
    seed: u64,
    max_steps: usize,
) -> Result<Vec<EpisodeResult>, EpisodeError>
where
    E: Environment + ?Sized,
    P: PriorPolicy + ?Sized,
    R: Reflector + ?Sized,
{
    let rounds = rounds.min(MAX_REFLECTION_ROUNDS);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reflections: Vec<Reflection> = Vec::new();
    let mut episodes = Vec::new();
    loop {
        let ep = greedy_episode(env, prior, &reflections, &mut rng, max_steps)?;
        let stop = ep.won() || reflections.len() >= rounds;
        let text = ep.transcript.render();
        episodes.push(ep);
        if stop {
            break;
        }
        match reflector.reflect(&text) {
            Ok(t) if !t.trim().is_empty() => reflections.push(Reflection {
                text: t.trim().to_string(),
                source: format!("episode-{}", episodes.len()),
                created_at: episodes.len() as u64,
            }),
            _ => break,
        }
    }
    Ok(episodes)
}
