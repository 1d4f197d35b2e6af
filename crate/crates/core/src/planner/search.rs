use std::collections::HashMap;

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::select::{select_action_mcdml, select_action_static_puct, select_action_uct};
use super::{Ablation, ConfigError, PlannerConfig, SearchError, SearchResult};
use crate::environment::{EnvError, Environment, StepResult};
use crate::memory::{CrossTrialMemory, InTrialMemory, RecordOutcome, ReflectError, Reflector, Trajectory};
use crate::priors::{PriorDistribution, PriorError, PriorPolicy, PriorRequest};
use crate::tree::{HistoryKey, SearchTree, TreeError};

/// Reflector for modes that never reflect; any call reports unavailability.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullReflector;

impl Reflector for NullReflector {
    fn reflect(&mut self, _: &str) -> Result<String, ReflectError> {
        Err(ReflectError::Unavailable("no reflector configured".into()))
    }
}

enum Fault {
    Env(EnvError),
    Prior(PriorError),
    Tree(TreeError),
}

impl From<EnvError> for Fault {
    fn from(e: EnvError) -> Self {
        Fault::Env(e)
    }
}

impl From<PriorError> for Fault {
    fn from(e: PriorError) -> Self {
        Fault::Prior(e)
    }
}

impl From<TreeError> for Fault {
    fn from(e: TreeError) -> Self {
        Fault::Tree(e)
    }
}

/// Per-search state threaded through the simulation.
struct Run {
    root: HistoryKey,
    horizon: usize,
}

/// Owns everything one searching agent needs: configuration, prior,
/// reflector, cross-trial memory, the prior cache, and the random generator
/// used for rollouts.
pub struct Planner<P, R = NullReflector> {
    config: PlannerConfig,
    prior: P,
    reflector: R,
    memory: CrossTrialMemory,
    rng: ChaCha8Rng,
    prior_cache: HashMap<(HistoryKey, usize), PriorDistribution>,
    sim_index: u64,
}

impl<P: PriorPolicy, R: Reflector> Planner<P, R> {
    pub fn new(config: PlannerConfig, prior: P, reflector: R) -> Result<Self, ConfigError> {
        config.validate()?;
        Ok(Self {
            memory: CrossTrialMemory::new(config.k),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            prior,
            reflector,
            prior_cache: HashMap::new(),
            sim_index: 0,
        })
    }

    pub fn config(&self) -> &PlannerConfig {
        &self.config
    }

    pub fn memory(&self) -> &CrossTrialMemory {
        &self.memory
    }

    pub fn prior(&self) -> &P {
        &self.prior
    }

    pub fn reflector(&self) -> &R {
        &self.reflector
    }

    /// Forgets per-root state after a real move from `from` to `to`.
    /// Reflections move along when `carry_reflections` is set.
    pub fn advance(&mut self, from: HistoryKey, to: HistoryKey) {
        if self.config.carry_reflections {
            self.memory.rekey(from, to);
        } else {
            self.memory.clear();
        }
        self.prior_cache.clear();
    }

    /// Clears memory and caches for a new episode. The random stream
    /// continues.
    pub fn start_episode(&mut self) {
        self.memory.clear();
        self.prior_cache.clear();
    }

    /// Searches from the environment's current state. `root` is the view of
    /// that state and `history` the real trajectory that led to it. The
    /// environment is back at the root state when this returns successfully.
    pub fn search<E: Environment + ?Sized>(
        &mut self,
        env: &mut E,
        root: &StepResult,
        history: &Trajectory,
    ) -> Result<SearchResult, SearchError> {
        if root.done {
            return Err(SearchError::TerminalRoot);
        }
        let real_actions: Vec<String> = history.records.iter().map(|r| r.action.clone()).collect();
        let root_key = HistoryKey::from_actions(&real_actions);
        let base = Trajectory {
            records: history.records.last().cloned().into_iter().collect(),
            current: root.observation.clone(),
        };
        let token = env.snapshot().map_err(|e| SearchError::Env {
            source: e,
            simulations: 0,
            partial: None,
        })?;

        let stored_before = self.memory.reflections(root_key).len();
        let calls_before = self.memory.reflector_calls(root_key);
        let queries_before = self.prior.queries();
        let budget = self.config.budget(root.valid_actions.len());
        let horizons = self.config.horizons();

        let mut simulations = 0u64;
        let mut tree = SearchTree::with_root(root_key, &root.valid_actions);
        let mut depth_used = 0;
        let mut attempts = 0;
        for (i, &horizon) in horizons.iter().enumerate() {
            tree = SearchTree::with_root(root_key, &root.valid_actions);
            depth_used = horizon;
            attempts += 1;
            let run = Run {
                root: root_key,
                horizon,
            };
            for _ in 0..budget {
                let outcome = env
                    .restore(&token)
                    .map_err(Fault::from)
                    .and_then(|_| {
                        let mut traj = base.clone();
                        let mut path = real_actions.clone();
                        self.sim_index += 1;
                        self.simulate(env, &mut tree, &run, root_key, root, &mut traj, &mut path, 0)
                    });
                if let Err(fault) = outcome {
                    let _ = env.restore(&token);
                    let partial = tree.stats(root_key).cloned().map(Box::new);
                    return Err(match fault {
                        Fault::Env(source) => SearchError::Env {
                            source,
                            simulations,
                            partial,
                        },
                        Fault::Prior(source) => SearchError::Prior {
                            source,
                            simulations,
                            partial,
                        },
                        Fault::Tree(e) => SearchError::Tree(e),
                    });
                }
                simulations += 1;
            }
            let max_q = tree.stats(root_key).and_then(|s| s.max_q());
            debug!("horizon {horizon}: max root Q {max_q:?} after {budget} simulations");
            if max_q != Some(0.0) || i + 1 == horizons.len() {
                break;
            }
        }
        env.restore(&token).map_err(|e| SearchError::Env {
            source: e,
            simulations,
            partial: tree.stats(root_key).cloned().map(Box::new),
        })?;

        let chosen_action = tree.best_q_action(root_key)?.to_string();
        let stats = tree.stats(root_key).expect("root exists").clone();
        let reflections = self.memory.reflections(root_key).to_vec();
        Ok(SearchResult {
            chosen_action,
            root_stats: stats,
            simulations_run: simulations,
            depth_used,
            attempts,
            reflections_generated: reflections.len().saturating_sub(stored_before),
            reflector_calls: self.memory.reflector_calls(root_key) - calls_before,
            prior_queries: self.prior.queries() - queries_before,
            reflections,
            tree,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn simulate<E: Environment + ?Sized>(
        &mut self,
        env: &mut E,
        tree: &mut SearchTree,
        run: &Run,
        node: HistoryKey,
        state: &StepResult,
        traj: &mut Trajectory,
        path: &mut Vec<String>,
        depth: usize,
    ) -> Result<f64, Fault> {
        if state.failed {
            self.reflect(run.root, traj);
            return Ok(0.0);
        }
        if state.done || depth == run.horizon {
            return Ok(0.0);
        }
        let stats = tree.stats(node).ok_or(TreeError::UnknownNode(node))?;
        let (idx, expand) = match self.config.ablation {
            Ablation::Uct => select_action_uct(stats, self.config.c_uct),
            Ablation::StaticPuct => {
                let p = self.node_prior(run.root, node, state, traj, path)?;
                select_action_static_puct(stats, &p, self.config.c_puct)
            }
            _ => {
                let p = self.node_prior(run.root, node, state, traj, path)?;
                select_action_mcdml(stats, &p, self.config.c_puct)
            }
        };
        let action = stats.edges[idx].action.clone();
        let next = env.step(&action)?;
        traj.push(&action, &next);
        path.push(action.clone());
        let future = if expand {
            self.rollout(env, run, traj, &next, depth + 1)?
        } else {
            let child = tree.ensure_node(node, &action, &next.valid_actions);
            self.simulate(env, tree, run, child, &next, traj, path, depth + 1)?
        };
        let ret = next.reward + self.config.gamma * future;
        tree.increment(node, &action)?;
        tree.update(node, &action, ret)?;
        Ok(ret)
    }

    /// Uniformly random play from `state` to the horizon or a terminal.
    /// One uniform-random playout from `state`, which must be the
    /// environment's current state, over at most `horizon` steps.
    pub fn rollout_return<E: Environment + ?Sized>(
        &mut self,
        env: &mut E,
        state: &StepResult,
        horizon: usize,
    ) -> Result<f64, EnvError> {
        let run = Run {
            root: HistoryKey::root(),
            horizon,
        };
        let mut traj = Trajectory::new(state.observation.clone());
        match self.rollout(env, &run, &mut traj, state, 0) {
            Ok(r) => Ok(r),
            Err(Fault::Env(e)) => Err(e),
            Err(Fault::Prior(_) | Fault::Tree(_)) => unreachable!("rollouts use neither prior nor tree"),
        }
    }

    fn rollout<E: Environment + ?Sized>(
        &mut self,
        env: &mut E,
        run: &Run,
        traj: &mut Trajectory,
        state: &StepResult,
        mut depth: usize,
    ) -> Result<f64, Fault> {
        let mut rewards = Vec::new();
        let mut cur = state.clone();
        loop {
            if cur.failed {
                self.reflect(run.root, traj);
                break;
            }
            if cur.done || depth == run.horizon {
                break;
            }
            let i = self.rng.random_range(0..cur.valid_actions.len());
            let action = cur.valid_actions[i].clone();
            cur = env.step(&action)?;
            traj.push(&action, &cur);
            rewards.push(cur.reward);
            depth += 1;
        }
        Ok(rewards
            .iter()
            .rev()
            .fold(0.0, |acc, r| r + self.config.gamma * acc))
    }

    fn reflect(&mut self, root: HistoryKey, traj: &Trajectory) {
        if !self.config.ablation.uses_reflections() {
            return;
        }
        let outcome = self
            .memory
            .record_failure(root, traj, self.sim_index, &mut self.reflector);
        if outcome == RecordOutcome::Stored {
            debug!("reflection stored at simulation {}", self.sim_index);
        }
    }

    /// Prior at `node`, cached per node and reflection count.
    fn node_prior(
        &mut self,
        root: HistoryKey,
        node: HistoryKey,
        state: &StepResult,
        traj: &Trajectory,
        path: &[String],
    ) -> Result<PriorDistribution, PriorError> {
        let ablation = self.config.ablation;
        let reflections = if ablation.uses_reflections() {
            self.memory.reflections(root)
        } else {
            &[]
        };
        let key = (node, reflections.len());
        if let Some(p) = self.prior_cache.get(&key) {
            return Ok(p.clone());
        }
        let in_trial = if ablation.uses_in_trial() {
            traj.last_part()
        } else {
            InTrialMemory::current_only(state.observation.clone())
        };
        let p = self.prior.prior(&PriorRequest {
            node,
            history: path,
            in_trial: &in_trial,
            reflections,
            valid_actions: &state.valid_actions,
        })?;
        if !p.matches(&state.valid_actions) {
            return Err(PriorError::Invalid(
                "prior support differs from the valid actions".into(),
            ));
        }
        self.prior_cache.insert(key, p.clone());
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{ToyEnv, ToyGameSpec, ToyState, Transition};
    use crate::memory::FixedReflector;
    use crate::priors::UniformPrior;

    fn start(env: &mut ToyEnv) -> (StepResult, Trajectory) {
        let r = env.reset().unwrap();
        let t = Trajectory::new(r.observation.clone());
        (r, t)
    }

    fn chain(rewards: &[f64]) -> ToyGameSpec {
        let n = rewards.len();
        let mut states: Vec<ToyState> = (0..n)
            .map(|i| ToyState {
                name: format!("S{i}"),
                description: format!("step {i}"),
                look: String::new(),
                inventory: String::new(),
                done: false,
                failed: false,
                actions: vec![Transition {
                    action: "go".into(),
                    to: format!("S{}", i + 1),
                    reward: rewards[i],
                }],
            })
            .collect();
        states.push(ToyState {
            name: format!("S{n}"),
            description: "end".into(),
            look: String::new(),
            inventory: String::new(),
            done: true,
            failed: false,
            actions: vec![],
        });
        ToyGameSpec {
            name: "Chain".into(),
            initial: "S0".into(),
            states,
        }
    }

    fn fixed(h: usize) -> PlannerConfig {
        PlannerConfig {
            ablation: Ablation::NoDynamicPruning,
            fixed_depth: h,
            ..PlannerConfig::default()
        }
    }

    #[test]
    fn discounted_chain() {
        let mut env = ToyEnv::new(chain(&[2.0, 3.0])).unwrap();
        let (r, t) = start(&mut env);
        let mut p = Planner::new(fixed(10), UniformPrior::default(), NullReflector).unwrap();
        let res = p.search(&mut env, &r, &t).unwrap();
        let q = res.root_stats.edges[0].q_value;
        assert!((q - (2.0 + 0.95 * 3.0)).abs() < 1e-12);
        assert_eq!(res.simulations_run, 50);
    }

    #[test]
    fn horizon_one_sees_only_first_reward() {
        let mut env = ToyEnv::new(chain(&[5.0, 100.0])).unwrap();
        let (r, t) = start(&mut env);
        let mut p = Planner::new(fixed(1), UniformPrior::default(), NullReflector).unwrap();
        let res = p.search(&mut env, &r, &t).unwrap();
        assert_eq!(res.root_stats.edges[0].q_value, 5.0);
    }

    #[test]
    fn zero_budget_is_empty_tree() {
        let mut env = ToyEnv::builtin("cellar_gate").unwrap();
        let (r, t) = start(&mut env);
        let cfg = PlannerConfig {
            total_simulations: Some(0),
            ..PlannerConfig::default()
        };
        let mut p = Planner::new(cfg, UniformPrior::default(), NullReflector).unwrap();
        assert!(matches!(
            p.search(&mut env, &r, &t),
            Err(SearchError::Tree(TreeError::EmptyTree))
        ));
    }

    #[test]
    fn terminal_root_refused() {
        let mut env = ToyEnv::builtin("cellar_gate").unwrap();
        let (_, t) = start(&mut env);
        env.step("open trapdoor").unwrap();
        let dead = env.step("east").unwrap();
        let mut p = Planner::new(PlannerConfig::default(), UniformPrior::default(), NullReflector).unwrap();
        assert!(matches!(
            p.search(&mut env, &dead, &t),
            Err(SearchError::TerminalRoot)
        ));
    }

    #[test]
    fn env_restored_to_root() {
        let mut env = ToyEnv::builtin("cellar_gate").unwrap();
        let (r, t) = start(&mut env);
        let mut p = Planner::new(PlannerConfig::default(), UniformPrior::default(), NullReflector).unwrap();
        p.search(&mut env, &r, &t).unwrap();
        assert_eq!(env.current_state(), "LivingRoom000");
    }

    #[test]
    fn reflections_capped_and_counted() {
        let mut env = ToyEnv::builtin("cellar_gate").unwrap();
        let (r, t) = start(&mut env);
        let mut p = Planner::new(
            PlannerConfig::default(),
            UniformPrior::default(),
            FixedReflector("Ensure you have a light source before entering dark areas.".into()),
        )
        .unwrap();
        let res = p.search(&mut env, &r, &t).unwrap();
        assert_eq!(res.reflections.len(), 3);
        assert_eq!(res.reflector_calls, 3);
        assert_eq!(p.memory().reflector_calls(HistoryKey::root()), 3);
    }

    #[test]
    fn no_cross_trial_never_reflects() {
        let mut env = ToyEnv::builtin("cellar_gate").unwrap();
        let (r, t) = start(&mut env);
        let cfg = PlannerConfig {
            ablation: Ablation::NoCrossTrial,
            ..PlannerConfig::default()
        };
        let mut p = Planner::new(cfg, UniformPrior::default(), FixedReflector("x".into())).unwrap();
        let res = p.search(&mut env, &r, &t).unwrap();
        assert_eq!(res.reflector_calls, 0);
        assert!(res.reflections.is_empty());
    }

    #[test]
    fn prior_cached_per_node() {
        let mut env = ToyEnv::new(chain(&[1.0, 1.0, 1.0])).unwrap();
        let (r, t) = start(&mut env);
        let mut p = Planner::new(fixed(10), UniformPrior::default(), NullReflector).unwrap();
        let res = p.search(&mut env, &r, &t).unwrap();
        // three non-terminal nodes on the chain, one query each
        assert_eq!(res.prior_queries, 3);
        let again = p.search(&mut env, &r, &t).unwrap();
        assert_eq!(again.prior_queries, 0);
    }

    #[test]
    fn deterministic_under_seed() {
        let run = || {
            let mut env = ToyEnv::builtin("cellar_gate").unwrap();
            let (r, t) = start(&mut env);
            let mut p = Planner::new(
                PlannerConfig {
                    seed: 11,
                    ..PlannerConfig::default()
                },
                UniformPrior::default(),
                FixedReflector("r".into()),
            )
            .unwrap();
            let res = p.search(&mut env, &r, &t).unwrap();
            let mut dump = Vec::new();
            res.tree.dump(&mut dump).unwrap();
            dump
        };
        assert_eq!(run(), run());
    }
}
