//! Audit of the hierarchical release constraints.
//!
//! * consistency: every non-leaf answer equals the sum of its children's answers;
//! * validity: every answer is a non-negative integer;
//! * faithfulness: every level of the tree sums to the root answer.

use serde::Serialize;

use crate::error::Result;
use crate::population::RegionTree;
use crate::query::AnswerTable;

/// Violation counts per constraint class. Counts are per (query, non-leaf node)
/// for consistency, per cell for validity, and per (query, non-root level) for
/// faithfulness.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ConstraintReport {
    pub consistency: usize,
    pub validity: usize,
    pub faithfulness: usize,
    /// Queries whose root answer differs from the supplied ground truth.
    /// Only populated by [`validate_against_truth`].
    pub root_invariant: usize,
}

impl ConstraintReport {
    pub fn total(&self) -> usize {
        self.consistency + self.validity + self.faithfulness + self.root_invariant
    }

    pub fn is_clean(&self) -> bool {
        self.total() == 0
    }
}

impl std::ops::AddAssign for ConstraintReport {
    fn add_assign(&mut self, o: Self) {
        self.consistency += o.consistency;
        self.validity += o.validity;
        self.faithfulness += o.faithfulness;
        self.root_invariant += o.root_invariant;
    }
}

/// Exact check; released tables are expected to hold integer-valued floats.
pub fn validate_constraints(table: &AnswerTable) -> ConstraintReport {
    validate_rows(table.tree(), table.values())
}

/// [`validate_constraints`] on raw row-major values, one row of `tree.len()`
/// cells per query.
pub fn validate_rows(tree: &RegionTree, values: &[f64]) -> ConstraintReport {
    let mut report = ConstraintReport::default();
    for row in values.chunks(tree.len()) {
        report.validity += row
            .iter()
            .filter(|v| !(v.is_finite() && **v >= 0.0 && v.fract() == 0.0))
            .count();
        for node in 0..tree.len() {
            if tree.is_leaf(node) {
                continue;
            }
            let sum: f64 = tree.children(node).iter().map(|&c| row[c]).sum();
            if sum != row[node] {
                report.consistency += 1;
            }
        }
        let root = row[tree.root()];
        for level in 1..tree.levels() {
            let sum: f64 = tree.level_nodes(level).map(|r| row[r]).sum();
            if sum != root {
                report.faithfulness += 1;
            }
        }
    }
    report
}

/// [`validate_constraints`] plus a check that every root answer equals the
/// ground-truth total.
pub fn validate_against_truth(table: &AnswerTable, truth: &AnswerTable) -> Result<ConstraintReport> {
    table.ensure_same_shape(truth)?;
    let mut report = validate_constraints(table);
    let root = table.tree().root();
    report.root_invariant = (0..table.num_queries())
        .filter(|&q| table.get(q, root) != truth.get(q, root))
        .count();
    Ok(report)
}
