use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PriorDistribution, PriorError, PriorPolicy, PriorRequest};

/// One tabled node: the action path from the episode start, a row used
/// before any reflection exists at the search root, and optionally one used
/// after.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedRow {
    pub history: Vec<String>,
    pub pre: BTreeMap<String, f64>,
    #[serde(default)]
    pub post: Option<BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptedTable {
    /// Row names that stand for a differently spelled valid action.
    #[serde(default)]
    pub aliases: BTreeMap<String, String>,
    /// Untabled nodes get a uniform prior instead of a fixture-gap error.
    #[serde(default)]
    pub uniform_fallback: bool,
    pub rows: Vec<ScriptedRow>,
}

impl ScriptedTable {
    pub fn from_json(text: &str) -> Result<Self, PriorError> {
        serde_json::from_str(text).map_err(|e| PriorError::Invalid(format!("scripted table: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PriorError> {
        let p = path.as_ref();
        let text = std::fs::read_to_string(p)
            .map_err(|e| PriorError::Invalid(format!("{}: {e}", p.display())))?;
        Self::from_json(&text)
    }
}

/// Table-driven prior. A row is projected onto the node's valid actions
/// through the alias map; names matching no valid action are dropped and
/// the rest renormalized. A valid action the row does not mention is a
/// fixture gap.
#[derive(Debug, Clone)]
pub struct ScriptedPrior {
    table: ScriptedTable,
    index: HashMap<Vec<String>, usize>,
    queries: u64,
}

impl ScriptedPrior {
    pub fn new(table: ScriptedTable) -> Self {
        let index = table
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| (r.history.clone(), i))
            .collect();
        Self {
            table,
            index,
            queries: 0,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PriorError> {
        Ok(Self::new(ScriptedTable::load(path)?))
    }

    fn project(
        &self,
        row: &BTreeMap<String, f64>,
        history: &[String],
        valid: &[String],
    ) -> Result<PriorDistribution, PriorError> {
        let mut weights = vec![None; valid.len()];
        for (name, &p) in row {
            let target = self.table.aliases.get(name).unwrap_or(name);
            if let Some(i) = valid.iter().position(|a| a == target) {
                weights[i] = Some(weights[i].unwrap_or(0.0) + p);
            }
        }
        if weights.iter().any(Option::is_none) {
            return Err(PriorError::FixtureGap(history.to_vec()));
        }
        let w: Vec<f64> = weights.into_iter().map(Option::unwrap).collect();
        PriorDistribution::from_weights(valid, &w)
    }
}

impl PriorPolicy for ScriptedPrior {
    fn prior(&mut self, req: &PriorRequest<'_>) -> Result<PriorDistribution, PriorError> {
        if req.valid_actions.is_empty() {
            return Err(PriorError::NoActions);
        }
        self.queries += 1;
        let Some(&i) = self.index.get(req.history) else {
            if self.table.uniform_fallback {
                return PriorDistribution::uniform(req.valid_actions);
            }
            return Err(PriorError::FixtureGap(req.history.to_vec()));
        };
        let row = &self.table.rows[i];
        let cells = match (&row.post, req.reflections.is_empty()) {
            (Some(post), false) => post,
            _ => &row.pre,
        };
        self.project(cells, req.history, req.valid_actions)
    }

    fn queries(&self) -> u64 {
        self.queries
    }
}
