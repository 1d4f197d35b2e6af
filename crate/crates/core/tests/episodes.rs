use std::sync::Arc;

use mcdml::environment::{Environment, ToyEnv};
use mcdml::llm::{ChatClient, LlmReflector, MockClient};
use mcdml::memory::{FixedReflector, Trajectory};
use mcdml::planner::{
    llm_agent_loop, reflection_agent_loop, run_episode, Ablation, NullReflector, Planner, PlannerConfig,
};
use mcdml::priors::{LlmPrior, ScriptedPrior, UniformPrior};

const MOCK: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/mock_llm.json");
const BOTTLENECK: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/bottleneck_prior.json");

fn mock() -> Arc<dyn ChatClient> {
    Arc::new(MockClient::load(MOCK).unwrap())
}

type Client = Arc<dyn ChatClient>;

fn llm_planner(cfg: PlannerConfig, client: Client) -> Planner<LlmPrior<Client>, LlmReflector<Client>> {
    Planner::new(
        cfg,
        LlmPrior::new(client.clone(), "test-model", 12_000),
        LlmReflector::new(client, "test-model", 12_000),
    )
    .unwrap()
}

#[test]
fn mock_llm_episode_is_reproducible() {
    let cfg = PlannerConfig {
        seed: 5,
        ..PlannerConfig::default()
    };
    let run = || {
        let mut env = ToyEnv::builtin("cellar_gate").unwrap();
        run_episode(&mut env, &mut llm_planner(cfg.clone(), mock()), 10).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
    assert!(a.steps > 0);
    // the trapdoor kills during search, so reflections are written
    assert!(a.searches.iter().any(|s| s.reflections_generated > 0));
}

#[test]
fn reflections_reach_the_prompt() {
    let client = Arc::new(MockClient::load(MOCK).unwrap());
    let dyn_client: Arc<dyn ChatClient> = client.clone();
    let mut env = ToyEnv::builtin("cellar_gate").unwrap();
    let mut planner = llm_planner(PlannerConfig::default(), dyn_client);
    let root = env.reset().unwrap();
    let r = planner
        .search(&mut env, &root, &Trajectory::new(root.observation.clone()))
        .unwrap();
    assert_eq!(r.reflections.len(), 3);
    let prompts: Vec<String> = client
        .requests()
        .iter()
        .map(|q| q.messages.last().unwrap().content.clone())
        .collect();
    assert!(prompts
        .iter()
        .any(|p| p.contains("You are a player") && p.contains("1. Take the lantern before going down")));
    assert!(prompts.iter().any(|p| p.contains("log of unsuccessful gameplay")));
}

#[test]
fn memory_cap_holds_over_whole_episodes() {
    for ablation in [Ablation::Full, Ablation::NoDynamicPruning] {
        for seed in 0..3 {
            let cfg = PlannerConfig {
                seed,
                ablation,
                ..PlannerConfig::default()
            };
            let mut env = ToyEnv::builtin("cellar_gate").unwrap();
            let mut planner = Planner::new(cfg, UniformPrior::default(), FixedReflector("light first".into())).unwrap();
            let ep = run_episode(&mut env, &mut planner, 20).unwrap();
            for s in &ep.searches {
                assert!(s.reflections.len() <= 3);
                assert!(s.reflector_calls <= 3);
            }
        }
    }
}

#[test]
fn deep_reward_needs_dynamic_pruning() {
    for seed in 0..3 {
        let mut env = ToyEnv::builtin("deep_reward").unwrap();
        let root = env.reset().unwrap();
        let search = |ablation| {
            let cfg = PlannerConfig {
                seed,
                ablation,
                fixed_depth: 10,
                ..PlannerConfig::default()
            };
            let mut env = ToyEnv::builtin("deep_reward").unwrap();
            env.reset().unwrap();
            Planner::new(cfg, UniformPrior::default(), NullReflector)
                .unwrap()
                .search(&mut env, &root, &Trajectory::new(root.observation.clone()))
                .unwrap()
        };
        let pruned = search(Ablation::NoCrossTrial);
        assert_eq!(pruned.depth_used, 30);
        assert_eq!(pruned.attempts, 2);
        assert!(pruned.root_stats.max_q().unwrap() > 0.0);
        let fixed = search(Ablation::NoDynamicPruning);
        assert_eq!(fixed.depth_used, 10);
        assert_eq!(fixed.root_stats.max_q(), Some(0.0));
    }
}

#[test]
fn bottleneck_prior_shapes_root_visits() {
    // with reflections the post row lifts the lantern's share of visits
    let visits = |ablation| {
        let mut n = 0;
        for seed in 0..20 {
            let cfg = PlannerConfig {
                seed,
                ablation,
                ..PlannerConfig::default()
            };
            let mut env = ToyEnv::builtin("cellar_gate").unwrap();
            let root = env.reset().unwrap();
            let r = Planner::new(cfg, ScriptedPrior::load(BOTTLENECK).unwrap(), FixedReflector("light first".into()))
                .unwrap()
                .search(&mut env, &root, &Trajectory::new(root.observation.clone()))
                .unwrap();
            n += r.root_stats.edge("take lantern").unwrap().visit_count;
        }
        n
    };
    assert!(visits(Ablation::Full) > visits(Ablation::NoCrossTrial));
}

#[test]
fn greedy_agent_with_mock_llm() {
    let mut env = ToyEnv::builtin("cellar_gate").unwrap();
    let mut prior = LlmPrior::new(mock(), "test-model", 12_000).with_temperature(0.1);
    let a = llm_agent_loop(&mut env, &mut prior, 1, 30).unwrap();
    let b = llm_agent_loop(&mut env, &mut prior, 1, 30).unwrap();
    assert_eq!(a, b);
    // the default answer is index 2: open trapdoor, then the cellar kills
    assert_eq!(a.actions()[0], "open trapdoor");
    assert!(a.failed);
    assert_eq!(a.final_score, 5.0);
}

#[test]
fn reflection_agent_improves_after_one_round() {
    let mut env = ToyEnv::builtin("cellar_gate").unwrap();
    let mut prior = ScriptedPrior::load(BOTTLENECK).unwrap();
    let mut reflector = FixedReflector("Ensure you have a light source before entering dark areas.".into());
    let eps = reflection_agent_loop(&mut env, &mut prior, &mut reflector, 3, 0, 20).unwrap();
    assert_eq!(eps[0].final_score, 5.0);
    assert_eq!(eps[0].actions()[0], "open trapdoor");
    assert_eq!(eps[1].actions()[0], "take lantern");
    assert_eq!(eps[1].final_score, 25.0);
    assert!(eps[1].won());
    assert_eq!(eps.len(), 2);
    assert_eq!(eps[1].log[0].reflections.len(), 1);
}
