use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EnvError, Environment, Observation, StateToken, StepResult};

/// A finite, deterministic text game given as an explicit state table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyGameSpec {
    pub name: String,
    pub initial: String,
    pub states: Vec<ToyState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyState {
    pub name: String,
    pub description: String,
    pub look: String,
    pub inventory: String,
    #[serde(default)]
    pub done: bool,
    #[serde(default)]
    pub failed: bool,
    /// Valid actions in presentation order, each with its single transition.
    #[serde(default)]
    pub actions: Vec<Transition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub action: String,
    pub to: String,
    #[serde(default)]
    pub reward: f64,
}

impl ToyGameSpec {
    pub fn from_json(text: &str) -> Result<Self, EnvError> {
        let spec: Self =
            serde_json::from_str(text).map_err(|e| EnvError::Malformed(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn state_index(&self, name: &str) -> Option<usize> {
        self.states.iter().position(|s| s.name == name)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::Malformed(m));
        let mut names = HashMap::new();
        for (i, s) in self.states.iter().enumerate() {
            if names.insert(s.name.as_str(), i).is_some() {
                return bad(format!("duplicate state {:?}", s.name));
            }
        }
        if !names.contains_key(self.initial.as_str()) {
            return bad(format!("unknown initial state {:?}", self.initial));
        }
        for s in &self.states {
            if s.failed && !s.done {
                return bad(format!("state {:?} failed but not done", s.name));
            }
            if s.done && !s.actions.is_empty() {
                return bad(format!("terminal state {:?} has actions", s.name));
            }
            if !s.done && s.actions.is_empty() {
                return bad(format!("state {:?} has no actions", s.name));
            }
            for (i, t) in s.actions.iter().enumerate() {
                if s.actions[..i].iter().any(|u| u.action == t.action) {
                    return bad(format!("state {:?} repeats action {:?}", s.name, t.action));
                }
                if !names.contains_key(t.to.as_str()) {
                    return bad(format!("transition to unknown state {:?}", t.to));
                }
                if !t.reward.is_finite() {
                    return bad(format!("non-finite reward on {:?}", t.action));
                }
            }
        }
        Ok(())
    }

    fn fingerprint(&self) -> [u8; 8] {
        let json = serde_json::to_vec(self).expect("spec serializes");
        let digest = Sha256::digest(&json);
        let mut out = [0u8; 8];
        out.copy_from_slice(&digest[..8]);
        out
    }

    /// A random, valid game for property tests.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, params: &RandomSpecParams) -> Self {
        let n = rng.random_range(2..=params.max_states.max(2));
        let mut states = Vec::with_capacity(n);
        for i in 0..n {
            let name = format!("s{i}");
            // state 0 is always playable
            let terminal = i > 0 && rng.random_bool(params.terminal_prob);
            let failed = terminal && rng.random_bool(0.5);
            let mut actions = Vec::new();
            if !terminal {
                let k = rng.random_range(1..=params.max_actions.max(1));
                for j in 0..k {
                    actions.push(Transition {
                        action: format!("act{j}"),
                        to: format!("s{}", rng.random_range(0..n)),
                        reward: rng.random_range(params.min_reward..=params.max_reward) as f64,
                    });
                }
            }
            states.push(ToyState {
                description: format!("You are in room {i}."),
                look: format!("Room {i}"),
                inventory: "You are empty-handed.".into(),
                name,
                done: terminal,
                failed,
                actions,
            });
        }
        Self {
            name: "random".into(),
            initial: "s0".into(),
            states,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RandomSpecParams {
    pub max_states: usize,
    pub max_actions: usize,
    pub terminal_prob: f64,
    pub min_reward: i32,
    pub max_reward: i32,
}

impl Default for RandomSpecParams {
    fn default() -> Self {
        Self {
            max_states: 8,
            max_actions: 4,
            terminal_prob: 0.25,
            min_reward: -2,
            max_reward: 5,
        }
    }
}

const TOKEN_MAGIC: &[u8; 4] = b"TOY1";

/// Interpreter for a [`ToyGameSpec`].
#[derive(Debug, Clone)]
pub struct ToyEnv {
    spec: Arc<ToyGameSpec>,
    fingerprint: [u8; 8],
    index: HashMap<String, usize>,
    state: usize,
    score: f64,
}

impl ToyEnv {
    pub fn new(spec: ToyGameSpec) -> Result<Self, EnvError> {
        spec.validate()?;
        let fingerprint = spec.fingerprint();
        let index = spec
            .states
            .iter()
            .enumerate()
            .map(|(i, s)| (s.name.clone(), i))
            .collect::<HashMap<_, _>>();
        let state = index[&spec.initial];
        Ok(Self {
            spec: Arc::new(spec),
            fingerprint,
            index,
            state,
            score: 0.0,
        })
    }

    pub fn builtin(name: &str) -> Result<Self, EnvError> {
        let spec = builtin_game(name)
            .ok_or_else(|| EnvError::Unavailable(format!("no builtin game {name:?}")))?;
        Self::new(spec)
    }

    pub fn spec(&self) -> &ToyGameSpec {
        &self.spec
    }

    pub fn current_state(&self) -> &str {
        &self.spec.states[self.state].name
    }

    fn view(&self, reward: f64) -> StepResult {
        let s = &self.spec.states[self.state];
        StepResult {
            observation: Observation::new(&s.description, &s.look, &s.inventory),
            reward,
            score: self.score,
            done: s.done,
            failed: s.failed,
            valid_actions: s.actions.iter().map(|t| t.action.clone()).collect(),
        }
    }
}

impl Environment for ToyEnv {
    fn reset(&mut self) -> Result<StepResult, EnvError> {
        self.state = self.index[&self.spec.initial];
        self.score = 0.0;
        Ok(self.view(0.0))
    }

    fn step(&mut self, action: &str) -> Result<StepResult, EnvError> {
        let s = &self.spec.states[self.state];
        if s.done {
            return Err(EnvError::EpisodeFinished);
        }
        let t = s
            .actions
            .iter()
            .find(|t| t.action == action)
            .ok_or_else(|| EnvError::InvalidAction {
                action: action.to_string(),
            })?;
        let reward = t.reward;
        self.state = self.index[&t.to];
        self.score += reward;
        Ok(self.view(reward))
    }

    fn snapshot(&mut self) -> Result<StateToken, EnvError> {
        let mut bytes = Vec::with_capacity(24);
        bytes.extend_from_slice(TOKEN_MAGIC);
        bytes.extend_from_slice(&self.fingerprint);
        bytes.extend_from_slice(&(self.state as u32).to_le_bytes());
        bytes.extend_from_slice(&self.score.to_bits().to_le_bytes());
        Ok(StateToken(bytes))
    }

    fn restore(&mut self, token: &StateToken) -> Result<StepResult, EnvError> {
        let b = token.as_bytes();
        if b.len() != 24 || &b[..4] != TOKEN_MAGIC || b[4..12] != self.fingerprint {
            return Err(EnvError::InvalidToken);
        }
        let state = u32::from_le_bytes(b[12..16].try_into().unwrap()) as usize;
        let score = f64::from_bits(u64::from_le_bytes(b[16..24].try_into().unwrap()));
        if state >= self.spec.states.len() {
            return Err(EnvError::InvalidToken);
        }
        self.state = state;
        self.score = score;
        Ok(self.view(0.0))
    }

    fn name(&self) -> &str {
        &self.spec.name
    }
}

/// Names accepted by [`builtin_game`].
pub fn builtin_names() -> &'static [&'static str] {
    &["cellar_gate", "deep_reward"]
}

pub fn builtin_game(name: &str) -> Option<ToyGameSpec> {
    match name {
        "cellar_gate" | "CellarGate" => Some(cellar_gate()),
        "deep_reward" | "DeepReward" => Some(deep_reward()),
        _ => None,
    }
}

/// Bottleneck game: the trapdoor pays immediately but the cellar kills you
/// unless you took the lantern first, which pays nothing.
///
/// Living room: take lantern (0), open trapdoor (+5, one way down), open case
/// (+3 only by lantern light, otherwise the egg inside breaks), go east.
/// Cellar: east dies in the dark, or reaches the passage with the lantern.
/// Passage: east reaches the treasure (+20) and wins. Best score is 28.
fn cellar_gate() -> ToyGameSpec {
    fn inv(lantern: bool, egg: bool) -> String {
        match (lantern, egg) {
            (false, false) => "You are empty-handed.".into(),
            (true, false) => "You are carrying: a brass lantern".into(),
            (false, true) => "You are carrying: a jewel-encrusted egg".into(),
            (true, true) => "You are carrying: a brass lantern, a jewel-encrusted egg".into(),
        }
    }
    // (lantern carried, case opened, egg kept)
    let flags: [(bool, bool, bool); 5] = [
        (false, false, false),
        (true, false, false),
        (false, true, false),
        (true, true, false),
        (true, true, true),
    ];
    let tag = |l: bool, c: bool, e: bool| format!("{}{}{}", l as u8, c as u8, e as u8);
    let mut states = Vec::new();
    for &(l, c, e) in &flags {
        let t = tag(l, c, e);
        let mut actions = Vec::new();
        if !l {
            actions.push(Transition {
                action: "take lantern".into(),
                to: format!("LivingRoom{}", tag(true, c, e)),
                reward: 0.0,
            });
        }
        actions.push(Transition {
            action: "open trapdoor".into(),
            to: format!("Cellar{t}"),
            reward: 5.0,
        });
        if !c {
            actions.push(Transition {
                action: "open case".into(),
                to: format!("LivingRoom{}", tag(l, true, l)),
                reward: if l { 3.0 } else { 0.0 },
            });
        }
        actions.push(Transition {
            action: "go east".into(),
            to: format!("Kitchen{t}"),
            reward: 0.0,
        });
        let mut look = String::from(
            "Living Room You are in the living room. There is a doorway to the east, \
             a trophy case, and a closed trap door at your feet.",
        );
        if !l {
            look.push_str(" A battery-powered brass lantern is on the trophy case.");
        }
        states.push(ToyState {
            name: format!("LivingRoom{t}"),
            description: "Living Room".into(),
            look,
            inventory: inv(l, e),
            done: false,
            failed: false,
            actions,
        });
        states.push(ToyState {
            name: format!("Kitchen{t}"),
            description: "Kitchen".into(),
            look: "Kitchen You are in the kitchen of the white house. A passage leads west."
                .into(),
            inventory: inv(l, e),
            done: false,
            failed: false,
            actions: vec![Transition {
                action: "go west".into(),
                to: format!("LivingRoom{t}"),
                reward: 0.0,
            }],
        });
        let (cellar_look, east_to) = if l {
            (
                "Cellar You are in a dark and damp cellar, lit by your lantern. \
                 A narrow passage leads east.",
                format!("Passage{t}"),
            )
        } else {
            (
                "It is pitch black. You are likely to be eaten by a grue.",
                "Death".to_string(),
            )
        };
        states.push(ToyState {
            name: format!("Cellar{t}"),
            description: "The trap door crashes shut, and you hear someone barring it.".into(),
            look: cellar_look.into(),
            inventory: inv(l, e),
            done: false,
            failed: false,
            actions: vec![Transition {
                action: "east".into(),
                to: east_to,
                reward: 0.0,
            }],
        });
        if l {
            states.push(ToyState {
                name: format!("Passage{t}"),
                description: "East of Chasm".into(),
                look: "East of Chasm You are on the east edge of a chasm. \
                       A passage leads further east."
                    .into(),
                inventory: inv(l, e),
                done: false,
                failed: false,
                actions: vec![Transition {
                    action: "east".into(),
                    to: "Treasure".into(),
                    reward: 20.0,
                }],
            });
        }
    }
    states.push(ToyState {
        name: "Death".into(),
        description: "Oh, no! You have walked into the slavering fangs of a lurking grue!"
            .into(),
        look: "**** You have died ****".into(),
        inventory: String::new(),
        done: true,
        failed: true,
        actions: vec![],
    });
    states.push(ToyState {
        name: "Treasure".into(),
        description: "Treasure Room".into(),
        look: "Treasure Room This is a large room, whose east wall is solid granite. \
               A chest of gold lies open. You have won."
            .into(),
        inventory: String::new(),
        done: true,
        failed: false,
        actions: vec![],
    });
    ToyGameSpec {
        name: "CellarGate".into(),
        initial: "LivingRoom000".into(),
        states,
    }
}

/// A corridor whose only reward sits twelve moves from the start.
fn deep_reward() -> ToyGameSpec {
    const LENGTH: usize = 12;
    let mut states = Vec::new();
    for i in 0..LENGTH {
        let next = if i + 1 == LENGTH {
            "Vault".to_string()
        } else {
            format!("Hall{}", i + 1)
        };
        states.push(ToyState {
            name: format!("Hall{i}"),
            description: format!("Hall, section {i}"),
            look: format!("Hall A long featureless hall. Marker {i} is painted on the wall."),
            inventory: "You are empty-handed.".into(),
            done: false,
            failed: false,
            actions: vec![
                Transition {
                    action: "forward".into(),
                    to: next,
                    reward: if i + 1 == LENGTH { 10.0 } else { 0.0 },
                },
                Transition {
                    action: "rest".into(),
                    to: format!("Hall{i}"),
                    reward: 0.0,
                },
            ],
        });
    }
    states.push(ToyState {
        name: "Vault".into(),
        description: "Vault".into(),
        look: "Vault The hall ends in a vault full of coins. You have won.".into(),
        inventory: "You are empty-handed.".into(),
        done: true,
        failed: false,
        actions: vec![],
    });
    ToyGameSpec {
        name: "DeepReward".into(),
        initial: "Hall0".into(),
        states,
    }
}
