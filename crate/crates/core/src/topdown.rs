//! TopDown release: double-geometric noise on every cell of the hierarchical
//! answer table, then a top-down pass that restores consistency, validity and
//! faithfulness.
//!
//! The root answer of each query is held invariant at its true total. Below the
//! root, each sibling group is projected (L2) onto the non-negative vectors that
//! sum to the already-finalized parent answer and then rounded with
//! largest-remainder rounding. Queries are independent and run in parallel.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dp::{double_geometric, PrivacyBudget, RandomSource};
use crate::error::{Error, Result};
use crate::query::AnswerTable;
use crate::simplex::{project_children, round_preserving_sum};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopDownConfig {
    pub epsilon: f64,
    pub seed: u64,
}

impl TopDownConfig {
    pub fn new(epsilon: f64, seed: u64) -> Result<Self> {
        let c = Self { epsilon, seed };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::invalid(format!(
                "TopDown epsilon must be positive and finite, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// Per-cell noise scale `2L / epsilon`.
    pub fn noise_scale(&self, levels: usize) -> f64 {
        2.0 * levels as f64 / self.epsilon
    }
}

/// Answer table with real-valued, possibly negative entries.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyAnswerTable(AnswerTable);

impl NoisyAnswerTable {
    /// Wraps an arbitrary table as a noisy measurement, e.g. for replaying a
    /// stored measurement through post-processing.
    pub fn from_table(table: AnswerTable) -> Self {
        Self(table)
    }

    pub fn table(&self) -> &AnswerTable {
        &self.0
    }

    pub fn into_table(self) -> AnswerTable {
        self.0
    }
}

/// Adds independent double-geometric noise at scale `2L / epsilon` to every cell.
/// Query `q` draws from sub-stream `[q]` of the configured seed.
pub fn add_noise(truth: &AnswerTable, config: &TopDownConfig) -> Result<NoisyAnswerTable> {
    config.validate()?;
    let scale = config.noise_scale(truth.tree().levels());
    let root_rng = RandomSource::new(config.seed);
    let nodes = truth.num_nodes();
    let mut noisy = truth.clone();
    noisy
        .values_mut()
        .par_chunks_mut(nodes)
        .enumerate()
        .try_for_each(|(q, row)| -> Result<()> {
            let mut rng = root_rng.substream(&[q as u64]);
            for cell in row.iter_mut() {
                *cell += double_geometric(scale, &mut rng)? as f64;
            }
            Ok(())
        })?;
    Ok(NoisyAnswerTable(noisy))
}

/// Restores the hierarchical constraints on a noisy table. `truth` supplies only
/// the invariant root totals.
pub fn post_process(truth: &AnswerTable, noisy: &NoisyAnswerTable) -> Result<AnswerTable> {
    truth.ensure_same_shape(noisy.table())?;
    let tree = truth.tree().clone();
    let root = tree.root();
    let nodes = tree.len();
    let mut out = AnswerTable::zeros(truth.queries().clone(), tree.clone());
    out.values_mut()
        .par_chunks_mut(nodes)
        .enumerate()
        .try_for_each(|(q, row)| -> Result<()> {
            let total = truth.get(q, root);
            if !(total >= 0.0 && total.fract() == 0.0) {
                return Err(Error::Validation(format!(
                    "root total {total} of query {q} is not a non-negative integer"
                )));
            }
            row[root] = total;
            let noisy_row = noisy.table().row(q);
            // breadth-first order finalizes every parent before its children
            for node in 0..nodes {
                let children = tree.children(node);
                if children.is_empty() {
                    continue;
                }
                let measured: Vec<f64> = children.iter().map(|&c| noisy_row[c]).collect();
                let parent = row[node];
                let projected = project_children(&measured, parent);
                let rounded = round_preserving_sum(&projected, parent as u64)?;
                for (&c, v) in children.iter().zip(rounded) {
                    row[c] = v as f64;
                }
            }
            Ok(())
        })?;
    Ok(out)
}

/// Full TopDown release of a ground-truth answer table.
pub fn run_topdown(truth: &AnswerTable, config: &TopDownConfig) -> Result<AnswerTable> {
    let noisy = add_noise(truth, config)?;
    post_process(truth, &noisy)
}

/// As [`run_topdown`], charging the pure-epsilon cost to `budget` before any
/// noise is drawn.
pub fn run_topdown_with_budget(
    truth: &AnswerTable,
    config: &TopDownConfig,
    budget: &mut PrivacyBudget,
) -> Result<AnswerTable> {
    config.validate()?;
    budget.spend(config.epsilon, 0.0)?;
    run_topdown(truth, config)
}
