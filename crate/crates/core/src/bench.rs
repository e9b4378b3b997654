//! Config-driven experiment grid: every (algorithm, epsilon, k, repetition)
//! cell produces a release that is scored on in- and out-of-distribution
//! queries.
//!
//! Runs are independent and execute on a worker pool sized by
//! `CENSUSDP_WORKERS`. Results are collected in grid order and written once at
//! the end, so output bytes do not depend on scheduling.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::{validate_against_truth, validate_constraints};
use crate::dp::{derive_seed, PrivacyBudget, RandomSource, LEDGER_SLACK};
use crate::error::{Error, Result};
use crate::hpd::{run_hpd, HpdConfig};
use crate::metrics::{absolute_errors, accuracy, quality_report, EmpiricalCdf, QualityReport};
use crate::mst::{run_mst, MstConfig, TableRepair};
use crate::population::{generate_population, ingest_csv, FeatureSchema, Population, TreeSpec};
use crate::query::{evaluate, sample_query_sets, AnswerTable, QuerySet};
use crate::topdown::{run_topdown_with_budget, TopDownConfig};

pub const WORKERS_ENV: &str = "CENSUSDP_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "topdown")]
    TopDown,
    #[serde(rename = "mst")]
    Mst,
    #[serde(rename = "hpd-fixed")]
    HpdFixed,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::TopDown => "topdown",
            Algorithm::Mst => "mst",
            Algorithm::HpdFixed => "hpd-fixed",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Algorithm::TopDown => 1,
            Algorithm::Mst => 2,
            Algorithm::HpdFixed => 3,
        }
    }

    pub fn is_synthetic(self) -> bool {
        self != Algorithm::TopDown
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Planted-chain population, see [`generate_population`].
    Generate {
        seed: u64,
        n: usize,
        schema: FeatureSchema,
        tree: TreeSpec,
        #[serde(default = "default_correlation")]
        correlation: f64,
    },
    Csv {
        path: PathBuf,
        schema: FeatureSchema,
        region_column: String,
        tree: TreeSpec,
    },
}

fn default_correlation() -> f64 {
    0.5
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Population> {
        match self {
            DatasetSpec::Generate { seed, n, schema, tree, correlation } => {
                generate_population(*seed, *n, Arc::new(schema.clone()), Arc::new(tree.build()?), *correlation)
            }
            DatasetSpec::Csv { path, schema, region_column, tree } => {
                ingest_csv(path, Arc::new(schema.clone()), region_column, Arc::new(tree.build()?))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaRule {
    /// `1 / n^2` for a population of `n` records.
    InverseNSquared,
    Fixed(f64),
}

impl Default for DeltaRule {
    fn default() -> Self {
        DeltaRule::InverseNSquared
    }
}

impl DeltaRule {
    pub fn resolve(self, n: usize) -> f64 {
        match self {
            DeltaRule::InverseNSquared => 1.0 / (n as f64 * n as f64),
            DeltaRule::Fixed(d) => d,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryCount {
    #[serde(rename = "in")]
    pub in_distribution: usize,
    #[serde(rename = "out")]
    pub out_of_distribution: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MstSettings {
    pub selection_fraction: f64,
    pub mi_sensitivity: f64,
    pub repair: TableRepair,
}

impl Default for MstSettings {
    fn default() -> Self {
        let d = MstConfig::default();
        Self {
            selection_fraction: d.selection_fraction,
            mi_sensitivity: d.mi_sensitivity,
            repair: d.repair,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HpdSettings {
    pub rounds: usize,
    pub learning_rate: f64,
    pub components: usize,
    pub steps_per_round: usize,
}

impl Default for HpdSettings {
    fn default() -> Self {
        let d = HpdConfig::default();
        Self {
            rounds: d.rounds,
            learning_rate: d.learning_rate,
            components: d.components,
            steps_per_round: d.steps_per_round,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub algorithms: Vec<Algorithm>,
    pub epsilons: Vec<f64>,
    pub k_values: Vec<usize>,
    /// In/out query counts, keyed by k.
    pub query_counts: BTreeMap<usize, QueryCount>,
    pub repetitions: usize,
    pub base_seed: u64,
    #[serde(default)]
    pub delta: DeltaRule,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub mst: MstSettings,
    #[serde(default)]
    pub hpd: HpdSettings,
}

impl ExperimentConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(json)?;
        config.validate()?;
        Ok(config)
    }

    /// Loads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut config = Self::from_json(&fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if config.output_dir.is_relative() {
            config.output_dir = base.join(&config.output_dir);
        }
        if let DatasetSpec::Csv { path: csv, .. } = &mut config.dataset {
            if csv.is_relative() {
                *csv = base.join(&*csv);
            }
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.algorithms.is_empty() {
            return Err(Error::invalid("config lists no algorithms"));
        }
        if self.epsilons.is_empty() {
            return Err(Error::invalid("config lists no epsilon values"));
        }
        if let Some(e) = self.epsilons.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
            return Err(Error::invalid(format!("epsilon values must be positive and finite, got {e}")));
        }
        if self.k_values.is_empty() {
            return Err(Error::invalid("config lists no k values"));
        }
        for k in &self.k_values {
            if !self.query_counts.contains_key(k) {
                return Err(Error::invalid(format!("no query counts given for k = {k}")));
            }
        }
        if self.repetitions == 0 {
            return Err(Error::invalid("repetitions must be at least 1"));
        }
        if let DeltaRule::Fixed(d) = self.delta {
            if !(d > 0.0 && d < 1.0) {
                return Err(Error::invalid(format!("fixed delta must lie in (0, 1), got {d}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryDistribution {
    In,
    Out,
}

impl QueryDistribution {
    pub fn name(self) -> &'static str {
        match self {
            QueryDistribution::In => "in",
            QueryDistribution::Out => "out",
        }
    }
}

/// One line of results.csv. Population-level metrics (quality, ledger,
/// constraint audit) have no query distribution.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub algorithm: Algorithm,
    pub epsilon: f64,
    pub k: usize,
    pub distribution: Option<QueryDistribution>,
    pub repetition: usize,
    pub metric: String,
    pub value: Option<f64>,
    pub error: Option<String>,
}

pub const ERROR_METRICS: [&str; 4] = ["mean_abs_error", "median_abs_error", "p90_abs_error", "p99_abs_error"];

/// Seed of one run, derived from the grid coordinates.
pub fn run_seed(base_seed: u64, algorithm: Algorithm, epsilon: f64, k: usize, repetition: usize) -> u64 {
    derive_seed(base_seed, &[algorithm.tag(), epsilon.to_bits(), k as u64, repetition as u64])
}

/// Seed of the query sets for one k; shared by every algorithm and repetition.
pub fn query_seed(base_seed: u64, k: usize) -> u64 {
    derive_seed(base_seed, &[0, k as u64])
}

#[derive(Debug, Clone, Copy)]
struct Job {
    algorithm: Algorithm,
    epsilon: f64,
    k: usize,
    repetition: usize,
}

struct Workload {
    queries: [Arc<QuerySet>; 2],
    truth: [AnswerTable; 2],
}

#[derive(Debug, Clone, Default)]
struct Scored {
    errors: Vec<f64>,
    mean: f64,
    median: f64,
    p90: f64,
    p99: f64,
    accuracy: f64,
}

#[derive(Debug, Clone)]
struct RunOutput {
    scores: [Option<Scored>; 2],
    quality: Option<QualityReport>,
    budget: PrivacyBudget,
    violations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellSummary {
    pub algorithm: Algorithm,
    pub epsilon: f64,
    pub k: usize,
    pub distribution: QueryDistribution,
    pub successful_repetitions: usize,
    pub mean_abs_error: Option<f64>,
    pub median_abs_error: Option<f64>,
    pub p90_abs_error: Option<f64>,
    pub p99_abs_error: Option<f64>,
    /// TopDown cannot answer out-of-distribution queries; its accuracy there is 0.
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct QualitySummary {
    pub algorithm: Algorithm,
    pub epsilon: f64,
    pub k: usize,
    pub ind: f64,
    pub pair: f64,
    pub corr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LedgerEntry {
    pub algorithm: Algorithm,
    pub epsilon: f64,
    pub k: usize,
    pub repetition: usize,
    pub budget_epsilon: f64,
    pub budget_delta: f64,
    pub spent_epsilon: f64,
    pub spent_delta: f64,
    pub within_budget: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct FailureEntry {
    pub algorithm: Algorithm,
    pub epsilon: f64,
    pub k: usize,
    pub repetition: usize,
    pub error: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub population_size: usize,
    pub delta: f64,
    pub cells: Vec<CellSummary>,
    pub quality: Vec<QualitySummary>,
    pub ledger: Vec<LedgerEntry>,
    pub constraint_violations: usize,
    pub failures: Vec<FailureEntry>,
}

impl Summary {
    pub fn cell(&self, algorithm: Algorithm, epsilon: f64, k: usize, distribution: QueryDistribution) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.algorithm == algorithm && c.epsilon == epsilon && c.k == k && c.distribution == distribution)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub records: Vec<RunRecord>,
    pub summary: Summary,
}

impl ExperimentOutcome {
    pub fn all_succeeded(&self) -> bool {
        self.summary.failures.is_empty()
    }
}

fn score(released: &AnswerTable, truth: &AnswerTable) -> Result<Scored> {
    let dist = absolute_errors(released, truth)?;
    Ok(Scored {
        accuracy: accuracy(released, truth)?,
        mean: dist.mean,
        median: dist.median,
        p90: dist.p90,
        p99: dist.p99,
        errors: dist.errors,
    })
}

fn execute(job: Job, population: &Population, workload: &Workload, config: &ExperimentConfig, delta: f64) -> Result<RunOutput> {
    let seed = run_seed(config.base_seed, job.algorithm, job.epsilon, job.k, job.repetition);
    match job.algorithm {
        Algorithm::TopDown => {
            let mut budget = PrivacyBudget::new(job.epsilon, 0.0)?;
            let td = TopDownConfig::new(job.epsilon, seed)?;
            let released = run_topdown_with_budget(&workload.truth[0], &td, &mut budget)?;
            let violations = validate_against_truth(&released, &workload.truth[0])?.total();
            Ok(RunOutput {
                scores: [Some(score(&released, &workload.truth[0])?), None],
                quality: None,
                budget,
                violations,
            })
        }
        Algorithm::Mst | Algorithm::HpdFixed => {
            let (synthetic, budget) = if job.algorithm == Algorithm::Mst {
                let mst = MstConfig {
                    epsilon: job.epsilon,
                    delta,
                    selection_fraction: config.mst.selection_fraction,
                    mi_sensitivity: config.mst.mi_sensitivity,
                    repair: config.mst.repair,
                    n_out: None,
                };
                let release = run_mst(population, &mst, &mut RandomSource::new(seed))?;
                (release.synthetic, release.budget)
            } else {
                let hpd = HpdConfig {
                    epsilon: job.epsilon,
                    delta,
                    rounds: config.hpd.rounds,
                    learning_rate: config.hpd.learning_rate,
                    components: config.hpd.components,
                    steps_per_round: config.hpd.steps_per_round,
                    n_out: None,
                };
                let release = run_hpd(population, &workload.queries[0], &hpd, seed)?;
                (release.synthetic, release.fit.budget)
            };
            let mut scores = [None, None];
            let mut violations = 0;
            for d in 0..2 {
                let released = evaluate(&synthetic, &workload.queries[d])?;
                violations += validate_constraints(&released).total();
                scores[d] = Some(score(&released, &workload.truth[d])?);
            }
            Ok(RunOutput {
                scores,
                quality: Some(quality_report(&synthetic, population)?),
                budget,
                violations,
            })
        }
    }
}

fn records_for(job: Job, output: &Result<RunOutput>) -> Vec<RunRecord> {
    let base = |distribution, metric: &str, value| RunRecord {
        algorithm: job.algorithm,
        epsilon: job.epsilon,
        k: job.k,
        distribution,
        repetition: job.repetition,
        metric: metric.to_string(),
        value,
        error: None,
    };
    let out = match output {
        Ok(out) => out,
        Err(e) => {
            let mut r = base(None, "failure", None);
            r.error = Some(e.to_string());
            return vec![r];
        }
    };
    let mut rows = Vec::new();
    for (d, dist) in [QueryDistribution::In, QueryDistribution::Out].into_iter().enumerate() {
        let s = out.scores[d].as_ref();
        let values = [s.map(|s| s.mean), s.map(|s| s.median), s.map(|s| s.p90), s.map(|s| s.p99)];
        for (metric, value) in ERROR_METRICS.iter().zip(values) {
            rows.push(base(Some(dist), metric, value));
        }
        rows.push(base(Some(dist), "accuracy", s.map(|s| s.accuracy)));
    }
    if let Some(q) = out.quality {
        rows.push(base(None, "ind", Some(q.ind)));
        rows.push(base(None, "pair", Some(q.pair)));
        rows.push(base(None, "corr", Some(q.corr)));
    }
    rows.push(base(None, "epsilon_spent", Some(out.budget.spent_epsilon())));
    rows.push(base(None, "delta_spent", Some(out.budget.spent_delta())));
    rows.push(base(None, "constraint_violations", Some(out.violations as f64)));
    rows
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(raw) = std::env::var(WORKERS_ENV) {
        let workers: usize = raw
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("{WORKERS_ENV} must be a positive integer, got {raw:?}")))?;
        if workers == 0 {
            return Err(Error::invalid(format!("{WORKERS_ENV} must be at least 1")));
        }
        builder = builder.num_threads(workers);
    }
    builder.build().map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))
}

/// Runs the grid without touching the file system.
pub fn run_grid(config: &ExperimentConfig) -> Result<(ExperimentOutcome, Vec<(String, EmpiricalCdf)>)> {
    config.validate()?;
    let population = config.dataset.load()?;
    let delta = config.delta.resolve(population.len());
    let schema = population.schema().clone();

    let mut workloads = BTreeMap::new();
    for &k in &config.k_values {
        let counts = config.query_counts[&k];
        let (qin, qout) = sample_query_sets(
            query_seed(config.base_seed, k),
            &schema,
            k,
            counts.in_distribution,
            counts.out_of_distribution,
        )?;
        let (qin, qout) = (Arc::new(qin), Arc::new(qout));
        let truth = [evaluate(&population, &qin)?, evaluate(&population, &qout)?];
        workloads.insert(k, Workload { queries: [qin, qout], truth });
    }

    let mut jobs = Vec::new();
    for &algorithm in &config.algorithms {
        for &epsilon in &config.epsilons {
            for &k in &config.k_values {
                for repetition in 0..config.repetitions {
                    jobs.push(Job { algorithm, epsilon, k, repetition });
                }
            }
        }
    }

    let pool = worker_pool()?;
    let outputs: Vec<Result<RunOutput>> = pool.install(|| {
        jobs.par_iter()
            .map(|&job| execute(job, &population, &workloads[&job.k], config, delta))
            .collect()
    });
    for (job, out) in jobs.iter().zip(&outputs) {
        if let Err(e) = out {
            log::warn!("{} eps={} k={} rep={} failed: {e}", job.algorithm, job.epsilon, job.k, job.repetition);
        }
    }

    let records: Vec<RunRecord> = jobs.iter().zip(&outputs).flat_map(|(&j, o)| records_for(j, o)).collect();

    let mut cells = Vec::new();
    let mut quality = Vec::new();
    let mut ledger = Vec::new();
    let mut failures = Vec::new();
    let mut cdfs = Vec::new();
    let mut constraint_violations = 0;
    for (job, out) in jobs.iter().zip(&outputs) {
        match out {
            Ok(o) => {
                constraint_violations += o.violations;
                let b = &o.budget;
                ledger.push(LedgerEntry {
                    algorithm: job.algorithm,
                    epsilon: job.epsilon,
                    k: job.k,
                    repetition: job.repetition,
                    budget_epsilon: b.epsilon(),
                    budget_delta: b.delta(),
                    spent_epsilon: b.spent_epsilon(),
                    spent_delta: b.spent_delta(),
                    within_budget: b.spent_epsilon() <= b.epsilon() * (1.0 + LEDGER_SLACK)
                        && b.spent_delta() <= b.delta() * (1.0 + LEDGER_SLACK),
                });
            }
            Err(e) => failures.push(FailureEntry {
                algorithm: job.algorithm,
                epsilon: job.epsilon,
                k: job.k,
                repetition: job.repetition,
                error: e.to_string(),
            }),
        }
    }

    // jobs of one (algorithm, epsilon, k) cell are contiguous
    for group in jobs.iter().zip(&outputs).collect::<Vec<_>>().chunks(config.repetitions) {
        let job = group[0].0;
        let ok: Vec<&RunOutput> = group.iter().filter_map(|(_, o)| o.as_ref().ok()).collect();
        for (d, dist) in [QueryDistribution::In, QueryDistribution::Out].into_iter().enumerate() {
            let scored: Vec<&Scored> = ok.iter().filter_map(|o| o.scores[d].as_ref()).collect();
            let topdown_out = !job.algorithm.is_synthetic() && dist == QueryDistribution::Out;
            cells.push(CellSummary {
                algorithm: job.algorithm,
                epsilon: job.epsilon,
                k: job.k,
                distribution: dist,
                successful_repetitions: ok.len(),
                mean_abs_error: mean(scored.iter().map(|s| s.mean)),
                median_abs_error: mean(scored.iter().map(|s| s.median)),
                p90_abs_error: mean(scored.iter().map(|s| s.p90)),
                p99_abs_error: mean(scored.iter().map(|s| s.p99)),
                accuracy: if topdown_out { 0.0 } else { mean(scored.iter().map(|s| s.accuracy)).unwrap_or(0.0) },
            });
            if !scored.is_empty() {
                let pooled: Vec<f64> = scored.iter().flat_map(|s| s.errors.iter().copied()).collect();
                let name = format!("{}_eps{}_k{}_{}", job.algorithm, job.epsilon, job.k, dist.name());
                cdfs.push((name, EmpiricalCdf::from_values(&pooled)?));
            }
        }
        let qs: Vec<QualityReport> = ok.iter().filter_map(|o| o.quality).collect();
        if !qs.is_empty() {
            quality.push(QualitySummary {
                algorithm: job.algorithm,
                epsilon: job.epsilon,
                k: job.k,
                ind: mean(qs.iter().map(|q| q.ind)).unwrap_or(0.0),
                pair: mean(qs.iter().map(|q| q.pair)).unwrap_or(0.0),
                corr: mean(qs.iter().map(|q| q.corr)).unwrap_or(0.0),
            });
        }
    }

    let summary = Summary {
        population_size: population.len(),
        delta,
        cells,
        quality,
        ledger,
        constraint_violations,
        failures,
    };
    Ok((ExperimentOutcome { records, summary }, cdfs))
}

/// Runs the grid and writes `results.csv`, `summary.json` and `cdf/*.csv`
/// under the configured output directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let (outcome, cdfs) = run_grid(config)?;
    let dir = &config.output_dir;
    fs::create_dir_all(dir.join("cdf"))?;
    let mut wtr = csv::Writer::from_path(dir.join("results.csv"))?;
    for r in &outcome.records {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&outcome.summary)?)?;
    for (name, cdf) in &cdfs {
        cdf.write_csv(fs::File::create(dir.join("cdf").join(format!("{name}.csv")))?)?;
    }
    Ok(outcome)
}
