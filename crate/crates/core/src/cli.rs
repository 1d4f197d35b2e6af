//! Command-line front end: run manifests, episode and ablation runs, result
//! tables, the oracle table, and a reference protocol server for the
//! builtin games.

use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::environment::{builtin_names, serve, EnvError, Environment, RemoteEnv, ToyEnv};
use crate::llm::{CachedClient, ChatClient, ClientConfig, HttpClient, LlmError, LlmReflector, MockClient};
use crate::memory::{fmt_number, FixedReflector, ReflectError, ReflectionLogEntry, Reflector};
use crate::oracle::{oracle_table, OracleError};
use crate::planner::{
    llm_agent_loop, reflection_agent_loop, run_episode, Ablation, ConfigError, EpisodeError,
    EpisodeResult, Planner, PlannerConfig, MAX_REFLECTION_ROUNDS,
};
use crate::priors::{LlmPrior, PriorError, PriorPolicy, ScriptedPrior, UniformPrior};
use crate::tree::HistoryKey;

/// Reflection text used when no language model is configured.
pub const DEFAULT_REFLECTION: &str =
    "The last attempt failed. Next time, avoid the action that led to the failure.";

/// Sampling temperature of the greedy language-model agent.
pub const LLM_AGENT_TEMPERATURE: f64 = 0.1;

const BRIDGE_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            _ => 1,
        }
    }

    fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Where action priors come from.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PriorMode {
    #[default]
    Uniform,
    /// A scripted table loaded from a file.
    Scripted(PathBuf),
    Llm,
}

impl FromStr for PriorMode {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(PriorMode::Uniform),
            "llm" => Ok(PriorMode::Llm),
            _ => match s.strip_prefix("scripted:") {
                Some(p) if !p.is_empty() => Ok(PriorMode::Scripted(p.into())),
                _ => Err(CliError::Usage(format!(
                    "prior must be uniform, scripted:<file> or llm, got {s:?}"
                ))),
            },
        }
    }
}

impl fmt::Display for PriorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PriorMode::Uniform => f.write_str("uniform"),
            PriorMode::Scripted(p) => write!(f, "scripted:{}", p.display()),
            PriorMode::Llm => f.write_str("llm"),
        }
    }
}

impl TryFrom<String> for PriorMode {
    type Error = CliError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<PriorMode> for String {
    fn from(m: PriorMode) -> String {
        m.to_string()
    }
}

/// How chat requests are answered.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ClientMode {
    /// HTTP with the on-disk cache in front.
    #[default]
    Live,
    /// The on-disk cache only; a miss is an error.
    CacheOnly,
    /// A fixture file.
    Mock(PathBuf),
}

impl FromStr for ClientMode {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(ClientMode::Live),
            "cache-only" => Ok(ClientMode::CacheOnly),
            _ => match s.strip_prefix("mock:") {
                Some(p) if !p.is_empty() => Ok(ClientMode::Mock(p.into())),
                _ => Err(CliError::Usage(format!(
                    "client must be live, cache-only or mock:<file>, got {s:?}"
                ))),
            },
        }
    }
}

impl fmt::Display for ClientMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClientMode::Live => f.write_str("live"),
            ClientMode::CacheOnly => f.write_str("cache-only"),
            ClientMode::Mock(p) => write!(f, "mock:{}", p.display()),
        }
    }
}

impl TryFrom<String> for ClientMode {
    type Error = CliError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<ClientMode> for String {
    fn from(m: ClientMode) -> String {
        m.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    /// Tree search.
    #[default]
    Mcdml,
    /// Greedy play on the prior.
    Llm,
    /// Greedy play repeated with reflections between episodes.
    Reflection,
}

impl AgentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AgentKind::Mcdml => "mcdml",
            AgentKind::Llm => "llm",
            AgentKind::Reflection => "reflection",
        }
    }
}

/// Everything a run needs. Mirrors the command-line flags; flags override
/// values loaded from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunManifest {
    /// Builtin game name.
    pub game: Option<String>,
    /// Bridge endpoint, see [`RemoteEnv::connect`].
    pub bridge: Option<String>,
    pub prior: PriorMode,
    pub client: ClientMode,
    pub agent: AgentKind,
    pub runs: usize,
    pub max_steps: usize,
    pub out: PathBuf,
    pub parallel: bool,
    pub planner: PlannerConfig,
    pub llm: ClientConfig,
}

impl Default for RunManifest {
    fn default() -> Self {
        Self {
            game: None,
            bridge: None,
            prior: PriorMode::Uniform,
            client: ClientMode::Live,
            agent: AgentKind::Mcdml,
            runs: 1,
            max_steps: 100,
            out: PathBuf::from("runs"),
            parallel: false,
            planner: PlannerConfig::default(),
            llm: ClientConfig::default(),
        }
    }
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Json {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        match (&self.game, &self.bridge) {
            (Some(_), Some(_)) => return Err(CliError::Usage("give either --game or --bridge, not both".into())),
            (None, None) => return Err(CliError::Usage("one of --game or --bridge is required".into())),
            (Some(g), None) if !builtin_names().contains(&g.as_str()) => {
                return Err(CliError::Usage(format!(
                    "unknown game {g:?}; builtin games: {}",
                    builtin_names().join(", ")
                )))
            }
            _ => {}
        }
        if self.runs == 0 {
            return Err(CliError::Usage("runs must be at least 1".into()));
        }
        self.planner.validate()?;
        self.llm.validate()?;
        if let PriorMode::Scripted(p) = &self.prior {
            require_file(p)?;
        }
        if self.prior == PriorMode::Llm {
            match &self.client {
                ClientMode::Mock(p) => require_file(p)?,
                ClientMode::CacheOnly => require_file(&self.cache_path())?,
                ClientMode::Live => {}
            }
        }
        Ok(())
    }

    /// The response cache file; defaults to `llm_cache.jsonl` in the output
    /// directory.
    pub fn cache_path(&self) -> PathBuf {
        self.llm
            .cache_path
            .clone()
            .unwrap_or_else(|| self.out.join("llm_cache.jsonl"))
    }

    /// Digest of everything that can change results. The output directory
    /// and the parallel flag are left out.
    pub fn config_hash(&self) -> String {
        let mut m = self.clone();
        m.out = PathBuf::new();
        m.parallel = false;
        let text = serde_json::to_string(&m).expect("manifest serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    fn game_label(&self) -> String {
        self.game
            .clone()
            .or_else(|| self.bridge.clone())
            .unwrap_or_default()
    }
}

fn require_file(p: &Path) -> Result<(), CliError> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{}: no such file", p.display())))
    }
}

#[derive(Debug, Parser)]
#[command(name = "mcdml", version, about = "Tree search for text games with a memory-conditioned language-model prior")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Play `runs` episodes and write transcripts and a summary.
    Run(RunArgs),
    /// Run the same manifest under several ablation modes.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated modes.
        #[arg(long, value_delimiter = ',', required = true)]
        modes: Vec<String>,
    },
    /// Print exact root action values of a builtin game.
    Oracle {
        #[arg(long)]
        game: String,
        #[arg(long)]
        horizon: usize,
        #[arg(long, default_value_t = 0.95)]
        gamma: f64,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Serve a builtin game over the environment protocol on stdio, or on a
    /// TCP port.
    Serve {
        #[arg(long)]
        game: String,
        #[arg(long)]
        tcp: Option<u16>,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON manifest; flags given here override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub game: Option<String>,
    #[arg(long)]
    pub bridge: Option<String>,
    /// uniform | scripted:<file> | llm
    #[arg(long)]
    pub prior: Option<String>,
    /// live | cache-only | mock:<file>
    #[arg(long)]
    pub client: Option<String>,
    #[arg(long, value_enum)]
    pub agent: Option<AgentKind>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub c_puct: Option<f64>,
    #[arg(long)]
    pub c_uct: Option<f64>,
    #[arg(long)]
    pub sims_per_action: Option<u64>,
    #[arg(long)]
    pub d_min: Option<usize>,
    #[arg(long)]
    pub d_max: Option<usize>,
    #[arg(long)]
    pub delta_d: Option<usize>,
    #[arg(long)]
    pub fixed_depth: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub ablation: Option<String>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run episodes on separate threads.
    #[arg(long)]
    pub parallel: bool,
}

impl RunArgs {
    pub fn manifest(&self) -> Result<RunManifest, CliError> {
        let mut m = match &self.config {
            Some(p) => RunManifest::load(p)?,
            None => RunManifest::default(),
        };
        macro_rules! set {
            ($src:expr => $dst:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
        }
        if self.game.is_some() || self.bridge.is_some() {
            m.game = self.game.clone();
            m.bridge = self.bridge.clone();
        }
        if let Some(p) = &self.prior {
            m.prior = p.parse()?;
        }
        if let Some(c) = &self.client {
            m.client = c.parse()?;
        }
        if let Some(a) = &self.ablation {
            m.planner.ablation = a.parse()?;
        }
        set!(self.agent => m.agent);
        set!(self.model => m.llm.model);
        set!(self.runs => m.runs);
        set!(self.seed => m.planner.seed);
        set!(self.gamma => m.planner.gamma);
        set!(self.c_puct => m.planner.c_puct);
        set!(self.c_uct => m.planner.c_uct);
        set!(self.sims_per_action => m.planner.sims_per_action);
        set!(self.d_min => m.planner.d_min);
        set!(self.d_max => m.planner.d_max);
        set!(self.delta_d => m.planner.delta_d);
        set!(self.fixed_depth => m.planner.fixed_depth);
        set!(self.k => m.planner.k);
        set!(self.max_steps => m.max_steps);
        set!(self.out => m.out);
        m.parallel |= self.parallel;
        Ok(m)
    }
}

/// Summary line closing each transcript file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeSummary {
    pub final_score: f64,
    pub steps: usize,
    pub seed: u64,
    pub config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub game: String,
    pub agent: AgentKind,
    pub ablation: Ablation,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub scores: Vec<f64>,
    /// First committed action of each run.
    pub first_actions: Vec<String>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub aborted: usize,
}

impl RunSummary {
    pub fn score_cell(&self) -> String {
        mean_std(&self.scores)
    }

    /// Most frequent first action with its count, earliest on ties.
    pub fn first_action_cell(&self) -> String {
        let mut best: Option<(&str, usize)> = None;
        for a in &self.first_actions {
            let n = self.first_actions.iter().filter(|b| *b == a).count();
            if best.is_none_or(|(_, m)| n > m) {
                best = Some((a, n));
            }
        }
        match best {
            Some((a, n)) if !a.is_empty() => format!("{a} ({n}/{})", self.first_actions.len()),
            _ => "-".into(),
        }
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<16}{:<12}{:<20}{:>6}  {}\n", "game", "agent", "ablation", "runs", "score"));
        out.push_str(&format!(
            "{:<16}{:<12}{:<20}{:>6}  {}\n",
            self.game,
            self.agent.as_str(),
            self.ablation.as_str(),
            self.scores.len(),
            self.score_cell()
        ));
        if self.aborted > 0 {
            out.push_str(&format!("aborted episodes: {}\n", self.aborted));
        }
        out
    }
}

/// Mean and population standard deviation.
pub fn mean_and_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// At most two decimals, trailing zeros dropped, but at least `min_decimals`.
fn fmt_stat(x: f64, min_decimals: usize) -> String {
    let s = format!("{x:.2}");
    let (int, frac) = s.split_once('.').expect("formatted with decimals");
    let frac = frac.trim_end_matches('0');
    let frac = if frac.len() < min_decimals {
        format!("{frac:0<min_decimals$}")
    } else {
        frac.to_string()
    };
    let int = if int == "-0" { "0" } else { int };
    if frac.is_empty() {
        int.to_string()
    } else {
        format!("{int}.{frac}")
    }
}

/// Scores as `mean ± std`, e.g. `70 ± 0.0` or `48.66 ± 1.89`.
pub fn mean_std(xs: &[f64]) -> String {
    let (m, s) = mean_and_std(xs);
    format!("{} ± {}", fmt_stat(m, 0), fmt_stat(s, 1))
}

/// A built planner, with reflection text coming either from a model or a
/// fixed sentence.
enum RunReflector {
    Fixed(FixedReflector),
    Llm(LlmReflector<Arc<dyn ChatClient>>),
}

impl Reflector for RunReflector {
    fn reflect(&mut self, trajectory_text: &str) -> Result<String, ReflectError> {
        match self {
            RunReflector::Fixed(r) => r.reflect(trajectory_text),
            RunReflector::Llm(r) => r.reflect(trajectory_text),
        }
    }
}

fn open_env(m: &RunManifest) -> Result<Box<dyn Environment>, CliError> {
    Ok(match (&m.game, &m.bridge) {
        (Some(g), _) => Box::new(ToyEnv::builtin(g)?),
        (None, Some(b)) => Box::new(RemoteEnv::connect(b, BRIDGE_TIMEOUT)?),
        (None, None) => return Err(CliError::Usage("no game".into())),
    })
}

fn open_client(m: &RunManifest) -> Result<Option<Arc<dyn ChatClient>>, CliError> {
    if m.prior != PriorMode::Llm {
        return Ok(None);
    }
    let client: Arc<dyn ChatClient> = match &m.client {
        ClientMode::Mock(p) => Arc::new(MockClient::load(p)?),
        ClientMode::CacheOnly => Arc::new(CachedClient::<HttpClient>::cache_only(m.cache_path())?),
        ClientMode::Live => {
            let path = m.cache_path();
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
            }
            Arc::new(CachedClient::open(HttpClient::new(m.llm.clone())?, path)?)
        }
    };
    Ok(Some(client))
}

fn make_prior(m: &RunManifest, client: &Option<Arc<dyn ChatClient>>) -> Result<Box<dyn PriorPolicy>, CliError> {
    Ok(match (&m.prior, client) {
        (PriorMode::Uniform, _) => Box::new(UniformPrior::default()),
        (PriorMode::Scripted(p), _) => Box::new(ScriptedPrior::load(p)?),
        (PriorMode::Llm, Some(c)) => {
            let mut p = LlmPrior::new(c.clone(), m.llm.model.clone(), m.llm.prompt_budget);
            if m.agent == AgentKind::Llm {
                p = p.with_temperature(LLM_AGENT_TEMPERATURE);
            }
            Box::new(p)
        }
        (PriorMode::Llm, None) => return Err(CliError::Usage("llm prior needs a client".into())),
    })
}

fn make_reflector(m: &RunManifest, client: &Option<Arc<dyn ChatClient>>) -> RunReflector {
    match client {
        Some(c) => RunReflector::Llm(LlmReflector::new(c.clone(), m.llm.model.clone(), m.llm.prompt_budget)),
        None => RunReflector::Fixed(FixedReflector(DEFAULT_REFLECTION.into())),
    }
}

/// One finished or aborted episode.
#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub seed: u64,
    pub result: EpisodeResult,
    pub error: Option<String>,
}

fn play(m: &RunManifest, seed: u64, client: &Option<Arc<dyn ChatClient>>) -> Result<EpisodeOutcome, CliError> {
    let mut env = open_env(m)?;
    let mut prior = make_prior(m, client)?;
    let mut reflector = make_reflector(m, client);
    let played: Result<EpisodeResult, EpisodeError> = match m.agent {
        AgentKind::Mcdml => {
            let cfg = PlannerConfig {
                seed,
                ..m.planner.clone()
            };
            let mut planner = Planner::new(cfg, prior, reflector)?;
            run_episode(&mut env, &mut planner, m.max_steps)
        }
        AgentKind::Llm => llm_agent_loop(&mut env, &mut prior, seed, m.max_steps),
        AgentKind::Reflection => reflection_agent_loop(
            &mut env,
            &mut prior,
            &mut reflector,
            MAX_REFLECTION_ROUNDS,
            seed,
            m.max_steps,
        )
        .map(|mut eps| eps.pop().expect("at least one episode")),
    };
    Ok(match played {
        Ok(result) => EpisodeOutcome {
            seed,
            result,
            error: None,
        },
        Err(e) => {
            warn!("episode with seed {seed} aborted: {e}");
            EpisodeOutcome {
                seed,
                error: Some(e.to_string()),
                result: *e.partial,
            }
        }
    })
}

/// Reflections generated during each search, keyed by that search's root.
pub fn reflection_log(result: &EpisodeResult) -> Vec<ReflectionLogEntry> {
    let actions = result.actions();
    let mut out = Vec::new();
    for (t, s) in result.searches.iter().enumerate() {
        let root = HistoryKey::from_actions(&actions[..t]).to_string();
        let fresh = &s.reflections[s.reflections.len().saturating_sub(s.reflections_generated)..];
        out.extend(fresh.iter().map(|r| ReflectionLogEntry {
            root: root.clone(),
            sim_index: r.created_at,
            text: r.text.clone(),
        }));
    }
    out
}

fn write_ndjson<T: Serialize>(w: &mut impl Write, item: &T) -> io::Result<()> {
    serde_json::to_writer(&mut *w, item)?;
    w.write_all(b"\n")
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_episode(dir: &Path, index: usize, o: &EpisodeOutcome, config_hash: &str) -> Result<(), CliError> {
    let path = dir.join(format!("transcript_{index}.ndjson"));
    let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
    let mut w = BufWriter::new(file);
    let summary = EpisodeSummary {
        final_score: o.result.final_score,
        steps: o.result.steps,
        seed: o.seed,
        config_hash: config_hash.to_string(),
        error: o.error.clone(),
    };
    o.result
        .log
        .iter()
        .try_for_each(|s| write_ndjson(&mut w, s))
        .and_then(|_| write_ndjson(&mut w, &summary))
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(&path, e))?;

    let path = dir.join(format!("reflections_{index}.ndjson"));
    let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
    let mut w = BufWriter::new(file);
    reflection_log(&o.result)
        .iter()
        .try_for_each(|e| write_ndjson(&mut w, e))
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(&path, e))
}

/// Plays every run of the manifest and writes its artifacts:
/// `manifest.json`, `transcript_<i>.ndjson`, `reflections_<i>.ndjson`,
/// `summary.json` and `summary.txt`. Run `i` uses seed `seed + i`.
/// Aborted episodes are counted in the summary rather than returned as
/// errors.
pub fn cmd_run(m: &RunManifest) -> Result<RunSummary, CliError> {
    m.validate()?;
    fs::create_dir_all(&m.out).map_err(|e| CliError::io(&m.out, e))?;
    let manifest_text = serde_json::to_string_pretty(m).expect("manifest serializes");
    write_text(&m.out.join("manifest.json"), &(manifest_text + "\n"))?;
    let config_hash = m.config_hash();
    let client = open_client(m)?;
    let seeds: Vec<u64> = (0..m.runs as u64).map(|i| m.planner.seed.wrapping_add(i)).collect();

    let outcomes: Vec<Result<EpisodeOutcome, CliError>> = if m.parallel && m.runs > 1 {
        thread::scope(|scope| {
            let handles: Vec<_> = seeds
                .iter()
                .map(|&seed| {
                    let client = client.clone();
                    scope.spawn(move || play(m, seed, &client))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("run thread panicked"))
                .collect()
        })
    } else {
        seeds.iter().map(|&seed| play(m, seed, &client)).collect()
    };

    let mut scores = Vec::new();
    let mut first_actions = Vec::new();
    let mut aborted = 0;
    for (i, o) in outcomes.into_iter().enumerate() {
        let o = o?;
        info!("run {i} (seed {}): score {}", o.seed, fmt_number(o.result.final_score));
        write_episode(&m.out, i, &o, &config_hash)?;
        if o.error.is_some() {
            aborted += 1;
        }
        scores.push(o.result.final_score);
        first_actions.push(o.result.actions().first().cloned().unwrap_or_default());
    }
    let (mean, std) = mean_and_std(&scores);
    let summary = RunSummary {
        game: m.game_label(),
        agent: m.agent,
        ablation: m.planner.ablation,
        config_hash,
        seeds,
        scores,
        first_actions,
        mean,
        std,
        aborted,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_text(&m.out.join("summary.json"), &(json + "\n"))?;
    write_text(&m.out.join("summary.txt"), &summary.table())?;
    Ok(summary)
}

/// Parses mode names, rejecting unknown ones before anything runs.
pub fn parse_modes(modes: &[String]) -> Result<Vec<Ablation>, CliError> {
    if modes.is_empty() {
        return Err(CliError::Usage("no ablation modes given".into()));
    }
    modes
        .iter()
        .map(|s| {
            s.trim().parse::<Ablation>().map_err(|_| {
                let known: Vec<_> = Ablation::ALL.iter().map(|a| a.as_str()).collect();
                CliError::Usage(format!("unknown ablation mode {s:?}; known modes: {}", known.join(", ")))
            })
        })
        .collect()
}

/// Runs the manifest once per mode, each into `<out>/<mode>`, with the same
/// seeds, and writes `ablation.txt` and `ablation.json` to `<out>`.
pub fn cmd_ablate(m: &RunManifest, modes: &[String]) -> Result<Vec<RunSummary>, CliError> {
    let modes = parse_modes(modes)?;
    m.validate()?;
    let mut rows = Vec::new();
    for mode in modes {
        let mut mm = m.clone();
        mm.planner.ablation = mode;
        mm.out = m.out.join(mode.as_str());
        rows.push(cmd_run(&mm)?);
    }
    write_text(&m.out.join("ablation.txt"), &ablation_table(&rows))?;
    let json = serde_json::to_string_pretty(&rows).expect("rows serialize");
    write_text(&m.out.join("ablation.json"), &(json + "\n"))?;
    Ok(rows)
}

pub fn ablation_table(rows: &[RunSummary]) -> String {
    let mut out = format!("{:<20}{:>6}  {:<16}{}\n", "mode", "runs", "score", "first action");
    for r in rows {
        let mut line = format!(
            "{:<20}{:>6}  {:<16}{}",
            r.ablation.as_str(),
            r.scores.len(),
            r.score_cell(),
            r.first_action_cell()
        );
        if r.aborted > 0 {
            line.push_str(&format!("  ({} aborted)", r.aborted));
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

pub fn cmd_oracle(game: &str, horizon: usize, gamma: f64, json: bool) -> Result<String, CliError> {
    let mut env = ToyEnv::builtin(game).map_err(|_| {
        CliError::Usage(format!("unknown game {game:?}; builtin games: {}", builtin_names().join(", ")))
    })?;
    let table = oracle_table(&mut env, horizon, gamma)?;
    Ok(if json {
        serde_json::to_string_pretty(&table).expect("table serializes") + "\n"
    } else {
        table.to_string()
    })
}

/// Serves a builtin game: on stdio until end of input, or on a TCP port,
/// one connection at a time with a fresh game each.
pub fn cmd_serve(game: &str, tcp: Option<u16>) -> Result<(), CliError> {
    let fresh = || ToyEnv::builtin(game);
    fresh()?;
    match tcp {
        None => {
            let stdin = io::stdin();
            let stats = serve(&mut fresh()?, stdin.lock(), io::stdout().lock())
                .map_err(|e| CliError::io(Path::new("<stdio>"), e))?;
            info!("served {} frames, {} errors", stats.frames, stats.errors);
        }
        Some(port) => {
            let listener = TcpListener::bind(("127.0.0.1", port)).map_err(|e| CliError::io(Path::new("<tcp>"), e))?;
            eprintln!("listening on {}", listener.local_addr().map_err(|e| CliError::io(Path::new("<tcp>"), e))?);
            for conn in listener.incoming() {
                let stream = match conn {
                    Ok(s) => s,
                    Err(e) => {
                        warn!("accept failed: {e}");
                        continue;
                    }
                };
                stream.set_nodelay(true).ok();
                let reader = match stream.try_clone() {
                    Ok(r) => BufReader::new(r),
                    Err(e) => {
                        warn!("{e}");
                        continue;
                    }
                };
                match serve(&mut fresh()?, reader, stream) {
                    Ok(stats) => info!("connection closed after {} frames", stats.frames),
                    Err(e) => warn!("connection dropped: {e}"),
                }
            }
        }
    }
    Ok(())
}

/// Runs a parsed command line, printing results to stdout.
pub fn execute(cli: Cli) -> Result<ExitCode, CliError> {
    match cli.command {
        Command::Run(args) => {
            let summary = cmd_run(&args.manifest()?)?;
            print!("{}", summary.table());
            Ok(exit_for(summary.aborted))
        }
        Command::Ablate { run, modes } => {
            parse_modes(&modes)?;
            let rows = cmd_ablate(&run.manifest()?, &modes)?;
            print!("{}", ablation_table(&rows));
            Ok(exit_for(rows.iter().map(|r| r.aborted).sum()))
        }
        Command::Oracle {
            game,
            horizon,
            gamma,
            json,
        } => {
            print!("{}", cmd_oracle(&game, horizon, gamma, json)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Serve { game, tcp } => {
            cmd_serve(&game, tcp)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn exit_for(aborted: usize) -> ExitCode {
    if aborted == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_formatting() {
        assert_eq!(mean_std(&[70.0, 70.0, 70.0]), "70 ± 0.0");
        assert_eq!(mean_std(&[1.0, 2.0]), "1.5 ± 0.5");
        assert_eq!(mean_std(&[10.0, 20.0, 30.0]), "20 ± 8.16");
        assert_eq!(mean_std(&[-0.001]), "0 ± 0.0");
    }

    #[test]
    fn population_std() {
        let (m, s) = mean_and_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!((m, s), (5.0, 2.0));
    }

    #[test]
    fn mode_strings_round_trip() {
        for s in ["uniform", "llm", "scripted:fixtures/t.json"] {
            assert_eq!(s.parse::<PriorMode>().unwrap().to_string(), s);
        }
        for s in ["live", "cache-only", "mock:m.json"] {
            assert_eq!(s.parse::<ClientMode>().unwrap().to_string(), s);
        }
        assert!("scripted:".parse::<PriorMode>().is_err());
        assert!("gpt".parse::<PriorMode>().is_err());
        assert!("offline".parse::<ClientMode>().is_err());
    }

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        fs::write(
            &path,
            r#"{"game": "cellar_gate", "runs": 3, "planner": {"c_puct": 20, "seed": 4}}"#,
        )
        .unwrap();
        let args = RunArgs {
            config: Some(path),
            runs: Some(5),
            ablation: Some("uct".into()),
            ..RunArgs::default()
        };
        let m = args.manifest().unwrap();
        assert_eq!(m.runs, 5);
        assert_eq!(m.planner.c_puct, 20.0);
        assert_eq!(m.planner.seed, 4);
        assert_eq!(m.planner.ablation, Ablation::Uct);
        assert_eq!(m.game.as_deref(), Some("cellar_gate"));
    }

    #[test]
    fn unknown_manifest_keys_rejected() {
        let e = serde_json::from_str::<RunManifest>(r#"{"gmae": "x"}"#).unwrap_err();
        assert!(e.to_string().contains("gmae"));
    }

    #[test]
    fn validation() {
        let ok = RunManifest {
            game: Some("cellar_gate".into()),
            ..RunManifest::default()
        };
        ok.validate().unwrap();
        for bad in [
            RunManifest::default(),
            RunManifest { runs: 0, ..ok.clone() },
            RunManifest { game: Some("zork1".into()), ..ok.clone() },
            RunManifest { bridge: Some("tcp://x:1".into()), ..ok.clone() },
            RunManifest { prior: PriorMode::Scripted("/nonexistent.json".into()), ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(CliError::Usage(_))), "{bad:?}");
        }
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = RunManifest {
            game: Some("cellar_gate".into()),
            ..RunManifest::default()
        };
        let b = RunManifest {
            out: "elsewhere".into(),
            parallel: true,
            ..a.clone()
        };
        assert_eq!(a.config_hash(), b.config_hash());
        assert_eq!(a.config_hash().len(), 16);
        let c = RunManifest { runs: 2, ..a.clone() };
        assert_ne!(a.config_hash(), c.config_hash());
    }

    #[test]
    fn unknown_mode_is_usage_error() {
        let e = parse_modes(&["full".into(), "no_dp".into()]).unwrap_err();
        assert!(matches!(e, CliError::Usage(m) if m.contains("no_dp")));
    }
}
