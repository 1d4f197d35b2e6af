//! Search-tree storage: nodes keyed by the action history from the root,
//! with per-action visit counts and running-mean value estimates.

use std::collections::HashMap;
use std::fmt;
use std::io::{self, Write};

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Identifies a node by the sequence of actions taken from the search root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HistoryKey(u64);

impl HistoryKey {
    pub fn root() -> Self {
        Self::from_actions(std::iter::empty::<&str>())
    }

    pub fn from_actions<I, S>(actions: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        actions
            .into_iter()
            .fold(Self(ROOT_SEED), |k, a| k.extend(a.as_ref()))
    }

    /// Key of this history followed by `action`.
    pub fn extend(self, action: &str) -> Self {
        let mut h = Sha256::new();
        h.update(self.0.to_le_bytes());
        h.update((action.len() as u64).to_le_bytes());
        h.update(action.as_bytes());
        let d = h.finalize();
        Self(u64::from_le_bytes(d[..8].try_into().unwrap()))
    }

    pub fn as_u64(self) -> u64 {
        self.0
    }
}

const ROOT_SEED: u64 = 0x6d63_646d_6c5f_7430;

impl Serialize for HistoryKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl fmt::Display for HistoryKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EdgeStats {
    pub action: String,
    pub visit_count: u64,
    pub q_value: f64,
    /// Plain sum of every backed-up return; `q_value * visit_count` should
    /// track it.
    pub return_sum: f64,
    pub child: Option<HistoryKey>,
}

impl EdgeStats {
    fn new(action: String) -> Self {
        Self {
            action,
            visit_count: 0,
            q_value: 0.0,
            return_sum: 0.0,
            child: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeStats {
    pub visit_count: u64,
    /// One edge per valid action, in valid-action order.
    pub edges: Vec<EdgeStats>,
}

impl NodeStats {
    pub fn new<S: AsRef<str>>(valid_actions: &[S]) -> Self {
        Self {
            visit_count: 0,
            edges: valid_actions
                .iter()
                .map(|a| EdgeStats::new(a.as_ref().to_string()))
                .collect(),
        }
    }

    pub fn edge(&self, action: &str) -> Option<&EdgeStats> {
        self.edges.iter().find(|e| e.action == action)
    }

    fn edge_mut(&mut self, action: &str) -> Option<&mut EdgeStats> {
        self.edges.iter_mut().find(|e| e.action == action)
    }

    pub fn actions(&self) -> impl Iterator<Item = &str> {
        self.edges.iter().map(|e| e.action.as_str())
    }

    /// Highest-Q visited action; ties go to the earliest action.
    pub fn best_q_action(&self) -> Result<&str, TreeError> {
        let mut best: Option<&EdgeStats> = None;
        for e in self.edges.iter().filter(|e| e.visit_count > 0) {
            if best.is_none_or(|b| e.q_value > b.q_value) {
                best = Some(e);
            }
        }
        best.map(|e| e.action.as_str()).ok_or(TreeError::EmptyTree)
    }

    /// Largest Q among visited edges.
    pub fn max_q(&self) -> Option<f64> {
        self.edges
            .iter()
            .filter(|e| e.visit_count > 0)
            .map(|e| e.q_value)
            .reduce(f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub history: Vec<String>,
    pub stats: NodeStats,
}

#[derive(Debug, Error, PartialEq)]
pub enum TreeError {
    #[error("no visited edge at node")]
    EmptyTree,
    #[error("update on edge {action:?} before its visit count was incremented")]
    UnvisitedEdge { action: String },
    #[error("unknown node {0}")]
    UnknownNode(HistoryKey),
    #[error("action {action:?} is not valid at node {node}")]
    UnknownAction { node: HistoryKey, action: String },
}

/// All nodes of one search, owned by a single searcher.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchTree {
    root: HistoryKey,
    nodes: HashMap<HistoryKey, Node>,
}

impl SearchTree {
    pub fn new<S: AsRef<str>>(root_actions: &[S]) -> Self {
        Self::with_root(HistoryKey::root(), root_actions)
    }

    /// A tree whose root sits at `root`, usually the key of the real
    /// episode history so node keys stay unique across moves.
    pub fn with_root<S: AsRef<str>>(root: HistoryKey, root_actions: &[S]) -> Self {
        let mut nodes = HashMap::new();
        nodes.insert(
            root,
            Node {
                history: Vec::new(),
                stats: NodeStats::new(root_actions),
            },
        );
        Self { root, nodes }
    }

    pub fn root(&self) -> HistoryKey {
        self.root
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, key: HistoryKey) -> Option<&Node> {
        self.nodes.get(&key)
    }

    pub fn stats(&self, key: HistoryKey) -> Option<&NodeStats> {
        self.nodes.get(&key).map(|n| &n.stats)
    }

    pub fn contains(&self, key: HistoryKey) -> bool {
        self.nodes.contains_key(&key)
    }

    pub fn nodes(&self) -> impl Iterator<Item = (&HistoryKey, &Node)> {
        self.nodes.iter()
    }

    /// Key of the child reached by `action`, linking the edge to it.
    /// Idempotent; the child node itself is materialized by [`Self::ensure_node`].
    pub fn child(&mut self, node: HistoryKey, action: &str) -> HistoryKey {
        let key = node.extend(action);
        if let Some(e) = self
            .nodes
            .get_mut(&node)
            .and_then(|n| n.stats.edge_mut(action))
        {
            e.child = Some(key);
        }
        key
    }

    /// Creates the node for `key` if absent. `parent` and `action` give its
    /// history.
    pub fn ensure_node<S: AsRef<str>>(
        &mut self,
        parent: HistoryKey,
        action: &str,
        valid_actions: &[S],
    ) -> HistoryKey {
        let key = self.child(parent, action);
        if !self.nodes.contains_key(&key) {
            let mut history = self
                .nodes
                .get(&parent)
                .map(|n| n.history.clone())
                .unwrap_or_default();
            history.push(action.to_string());
            self.nodes.insert(
                key,
                Node {
                    history,
                    stats: NodeStats::new(valid_actions),
                },
            );
        }
        key
    }

    /// Bumps N(h) and N(h, a) for one pass through `node`.
    pub fn increment(&mut self, node: HistoryKey, action: &str) -> Result<(), TreeError> {
        let n = self
            .nodes
            .get_mut(&node)
            .ok_or(TreeError::UnknownNode(node))?;
        let e = n
            .stats
            .edge_mut(action)
            .ok_or_else(|| TreeError::UnknownAction {
                node,
                action: action.to_string(),
            })?;
        e.visit_count += 1;
        n.stats.visit_count += 1;
        Ok(())
    }

    /// Folds `ret` into the running mean of Q(h, a). The pass must already
    /// have been counted by [`Self::increment`].
    pub fn update(
        &mut self,
        node: HistoryKey,
        action: &str,
        ret: f64,
    ) -> Result<&EdgeStats, TreeError> {
        let e = self
            .nodes
            .get_mut(&node)
            .ok_or(TreeError::UnknownNode(node))?
            .stats
            .edge_mut(action)
            .ok_or_else(|| TreeError::UnknownAction {
                node,
                action: action.to_string(),
            })?;
        if e.visit_count == 0 {
            return Err(TreeError::UnvisitedEdge {
                action: action.to_string(),
            });
        }
        e.q_value += (ret - e.q_value) / e.visit_count as f64;
        e.return_sum += ret;
        Ok(e)
    }

    pub fn best_q_action(&self, node: HistoryKey) -> Result<&str, TreeError> {
        self.stats(node)
            .ok_or(TreeError::UnknownNode(node))?
            .best_q_action()
    }

    /// Writes one JSON line per node, sorted by history, edges in action order.
    pub fn dump<W: Write>(&self, mut out: W) -> io::Result<()> {
        #[derive(Serialize)]
        struct Edge<'a> {
            action: &'a str,
            #[serde(rename = "N")]
            n: u64,
            #[serde(rename = "Q")]
            q: f64,
        }
        #[derive(Serialize)]
        struct Line<'a> {
            history: &'a [String],
            #[serde(rename = "N")]
            n: u64,
            edges: Vec<Edge<'a>>,
        }
        let mut nodes: Vec<&Node> = self.nodes.values().collect();
        nodes.sort_by(|a, b| a.history.cmp(&b.history));
        for node in nodes {
            let line = Line {
                history: &node.history,
                n: node.stats.visit_count,
                edges: node
                    .stats
                    .edges
                    .iter()
                    .map(|e| Edge {
                        action: &e.action,
                        n: e.visit_count,
                        q: e.q_value,
                    })
                    .collect(),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}
