//! Differentially private release of hierarchical census marginals.
//!
//! Three release paths share one data model:
//! [`topdown`] perturbs and post-processes the answer table directly,
//! [`mst`] and [`hpd`] fit generative models and sample synthetic populations.
//! [`bench`] runs the comparison grid and [`metrics`] scores the results.

pub mod bench;
pub mod constraints;
pub mod dp;
pub mod error;
pub mod hpd;
pub mod metrics;
pub mod mst;
pub mod population;
pub mod query;
pub mod simplex;
pub mod topdown;

pub use constraints::{validate_against_truth, validate_constraints, ConstraintReport};
pub use dp::{PrivacyBudget, RandomSource};
pub use error::{Error, Result};
pub use population::{Feature, FeatureSchema, Population, RegionTree, TreeSpec};
pub use query::{evaluate, AnswerTable, MarginalQuery, QuerySet};
