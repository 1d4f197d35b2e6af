use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Duration;

use mcdml::environment::{Environment, RemoteEnv, ToyEnv};

const BIN: &str = env!("CARGO_BIN_EXE_mcdml");
const MOCK: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/mock_llm.json");
const BOTTLENECK: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/bottleneck_prior.json");

fn mcdml(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn three_uniform_runs_report_mean_and_std() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    let o = mcdml(&["run", "--game", "cellar_gate", "--runs", "3", "--seed", "7", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("28 ± 0.0"), "{}", stdout(&o));

    let summary: serde_json::Value = serde_json::from_slice(&read(&out.join("summary.json"))).unwrap();
    assert_eq!(summary["seeds"], serde_json::json!([7, 8, 9]));
    assert_eq!(summary["scores"], serde_json::json!([28.0, 28.0, 28.0]));

    for i in 0..3 {
        let text = String::from_utf8(read(&out.join(format!("transcript_{i}.ndjson")))).unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        let (last, steps) = lines.split_last().unwrap();
        let keys: Vec<&str> = last.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, ["config_hash", "final_score", "seed", "steps"]);
        assert_eq!(last["seed"], 7 + i);
        assert_eq!(last["steps"].as_u64().unwrap() as usize, steps.len());
        // the summary is recomputable from the transcript
        let total: f64 = steps.iter().map(|s| s["reward"].as_f64().unwrap()).sum();
        assert_eq!(total, last["final_score"].as_f64().unwrap());
        for s in steps {
            let mut keys: Vec<&str> = s.as_object().unwrap().keys().map(String::as_str).collect();
            keys.sort();
            assert_eq!(keys, ["action", "depth_used", "obs", "reflections", "reward", "score", "sims", "step"]);
        }
        assert!(out.join(format!("reflections_{i}.ndjson")).exists());
    }
}

#[test]
fn mock_client_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = mcdml(&[
            "run", "--game", "cellar_gate", "--prior", "llm", "--client", &format!("mock:{MOCK}"),
            "--runs", "2", "--seed", "3", "--max-steps", "6", "--out", out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["transcript_0.ndjson", "transcript_1.ndjson", "reflections_0.ndjson", "summary.json", "summary.txt"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f}");
    }
    let reflections = String::from_utf8(read(&a.join("reflections_0.ndjson"))).unwrap();
    let first: serde_json::Value = serde_json::from_str(reflections.lines().next().unwrap()).unwrap();
    assert_eq!(first["text"], "Take the lantern before going down into the dark cellar.");
    assert!(first["root"].is_string() && first["sim_index"].is_u64());
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("m.json");
    let out = dir.path().join("out");
    fs::write(
        &cfg,
        serde_json::json!({"game": "cellar_gate", "runs": 4, "max_steps": 1, "planner": {"seed": 40}}).to_string(),
    )
    .unwrap();
    let o = mcdml(&["run", "--config", cfg.to_str().unwrap(), "--runs", "2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&read(&out.join("summary.json"))).unwrap();
    assert_eq!(summary["seeds"], serde_json::json!([40, 41]));
}

#[test]
fn unknown_mode_rejected_before_any_episode() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let o = mcdml(&["ablate", "--game", "cellar_gate", "--modes", "full,w/o_dp", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("w/o_dp"));
    assert!(!out.exists());
}

#[test]
fn ablation_table_has_one_row_per_mode() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("abl");
    let o = mcdml(&[
        "ablate", "--game", "cellar_gate", "--prior", &format!("scripted:{BOTTLENECK}"), "--modes",
        "full,no_cross_trial,uct", "--max-steps", "1", "--runs", "2", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let table = String::from_utf8(read(&out.join("ablation.txt"))).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[1].starts_with("full") && rows[2].starts_with("no_cross_trial") && rows[3].starts_with("uct"));
    assert!(out.join("no_cross_trial").join("summary.json").exists());

    let single = dir.path().join("one");
    let o = mcdml(&["ablate", "--game", "cellar_gate", "--modes", "uct", "--max-steps", "2", "--out", single.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 2);
}

#[test]
fn aborted_episode_gives_nonzero_exit_and_keeps_partial_output() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.json");
    fs::write(&empty, "{}").unwrap();
    let out = dir.path().join("out");
    let o = mcdml(&[
        "run", "--game", "cellar_gate", "--prior", "llm", "--client", &format!("mock:{}", empty.display()),
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let text = String::from_utf8(read(&out.join("transcript_0.ndjson"))).unwrap();
    let last: serde_json::Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
    assert!(last["error"].as_str().unwrap().contains("fixture"), "{last}");
    assert!(stdout(&o).contains("aborted episodes: 1"));
}

#[test]
fn missing_files_fail_at_launch() {
    let o = mcdml(&["run", "--game", "cellar_gate", "--prior", "scripted:/does/not/exist.json"]);
    assert_eq!(o.status.code(), Some(2));
    let o = mcdml(&["run", "--game", "zork1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn oracle_command() {
    let o = mcdml(&["oracle", "--game", "cellar_gate", "--horizon", "0", "--json"]);
    assert!(o.status.success());
    let t: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    for row in t["rows"].as_array().unwrap() {
        assert_eq!(row["rollout_q"], 0.0);
        assert_eq!(row["optimal_q"], 0.0);
    }
    let o = mcdml(&["oracle", "--game", "cellar_gate", "--horizon", "12"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("at most 8"));
}

#[test]
fn stdio_server_behaves_like_the_builtin_game() {
    let endpoint = format!("{BIN} serve --game cellar_gate");
    let mut remote = RemoteEnv::connect(&endpoint, Duration::from_secs(10)).unwrap();
    let mut local = ToyEnv::builtin("cellar_gate").unwrap();
    assert_eq!(remote.name(), "CellarGate");
    assert_eq!(remote.reset().unwrap(), local.reset().unwrap());
    for a in ["take lantern", "open case", "open trapdoor", "east", "east"] {
        assert_eq!(remote.step(a).unwrap(), local.step(a).unwrap());
    }

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bridge");
    let o = mcdml(&["run", "--bridge", &endpoint, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("28 ± 0.0"));
}
