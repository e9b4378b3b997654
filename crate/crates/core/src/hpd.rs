//! HPD-Fixed: a mixture of product distributions over (region, features), fit
//! with the adaptive-measurements loop.
//!
//! Each round privately selects a high-error query with the exponential
//! mechanism, measures that query's answers at every leaf region with the
//! Gaussian mechanism (one record changes exactly one leaf count, so the leaf
//! vector has L2 sensitivity 1), and then runs projected gradient descent on
//! the squared error against every measurement logged so far.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dp::{exponential_mechanism, gaussian_sigma, sample_index, PrivacyBudget, RandomSource};
use crate::error::{Error, Result};
use crate::population::{FeatureSchema, Population, RegionTree};
use crate::query::{evaluate, MarginalQuery, QuerySet};
use crate::simplex::project_to_simplex;

/// Tolerance for the simplex audit run after every optimizer step.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HpdModel {
    pub weights: Vec<f64>,
    /// Per component, a distribution over leaf regions.
    pub regions: Vec<Vec<f64>>,
    /// Per component and feature, a distribution over the feature's domain.
    pub features: Vec<Vec<Vec<f64>>>,
    #[serde(skip)]
    schema: Arc<FeatureSchema>,
    #[serde(skip)]
    tree: Arc<RegionTree>,
}

/// Same layout as the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HpdGradient {
    pub weights: Vec<f64>,
    pub regions: Vec<Vec<f64>>,
    pub features: Vec<Vec<Vec<f64>>>,
}

impl HpdGradient {
    fn zeros_like(model: &HpdModel) -> Self {
        Self {
            weights: vec![0.0; model.weights.len()],
            regions: model.regions.iter().map(|r| vec![0.0; r.len()]).collect(),
            features: model
                .features
                .iter()
                .map(|c| c.iter().map(|p| vec![0.0; p.len()]).collect())
                .collect(),
        }
    }

    fn max_abs(&self) -> f64 {
        let mut m = self.weights.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        for r in &self.regions {
            m = r.iter().fold(m, |a, g| a.max(g.abs()));
        }
        for c in &self.features {
            for p in c {
                m = p.iter().fold(m, |a, g| a.max(g.abs()));
            }
        }
        m
    }
}

fn is_distribution(p: &[f64]) -> bool {
    p.iter().all(|&x| x >= 0.0) && (p.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOLERANCE
}

impl HpdModel {
    /// Builds a model from explicit parameters, checking shapes and that every
    /// vector is a distribution.
    pub fn new(
        schema: Arc<FeatureSchema>,
        tree: Arc<RegionTree>,
        weights: Vec<f64>,
        regions: Vec<Vec<f64>>,
        features: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 || regions.len() != k || features.len() != k {
            return Err(Error::ShapeMismatch("mixture needs matching, non-empty component lists".into()));
        }
        for c in 0..k {
            if regions[c].len() != tree.num_leaves() || features[c].len() != schema.len() {
                return Err(Error::ShapeMismatch(format!("component {c} has the wrong shape")));
            }
            for (f, p) in features[c].iter().enumerate() {
                if p.len() != schema.domain_size(f) {
                    return Err(Error::ShapeMismatch(format!(
                        "component {c}, feature {f}: {} probabilities for domain {}",
                        p.len(),
                        schema.domain_size(f)
                    )));
                }
            }
        }
        let model = Self {
            weights,
            regions,
            features,
            schema,
            tree,
        };
        if model.simplex_violations() > 0 {
            return Err(Error::Validation("mixture parameters must be probability vectors".into()));
        }
        Ok(model)
    }

    /// Near-uniform starting point with a small seeded perturbation so that
    /// components can separate.
    pub fn initialize(schema: Arc<FeatureSchema>, tree: Arc<RegionTree>, components: usize, rng: &mut RandomSource) -> Result<Self> {
        if components == 0 {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        let mut perturbed = |len: usize| -> Vec<f64> {
            let raw: Vec<f64> = (0..len).map(|_| 1.0 + 0.5 * rng.random::<f64>()).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / s).collect()
        };
        let regions = (0..components).map(|_| perturbed(tree.num_leaves())).collect();
        let features = (0..components)
            .map(|_| (0..schema.len()).map(|f| perturbed(schema.domain_size(f))).collect())
            .collect();
        Self::new(schema, tree, vec![1.0 / components as f64; components], regions, features)
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn schema(&self) -> &Arc<FeatureSchema> {
        &self.schema
    }

    pub fn tree(&self) -> &Arc<RegionTree> {
        &self.tree
    }

    /// Number of parameter vectors that are not distributions.
    pub fn simplex_violations(&self) -> usize {
        let mut bad = usize::from(!is_distribution(&self.weights));
        bad += self.regions.iter().filter(|r| !is_distribution(r)).count();
        for c in &self.features {
            bad += c.iter().filter(|p| !is_distribution(p)).count();
        }
        bad
    }

    /// `prod_{(f, v) in query} p_{c,f}[v]` for every component.
    fn feature_products(&self, query: &MarginalQuery) -> Vec<f64> {
        self.features
            .iter()
            .map(|c| query.predicates().iter().map(|&(f, v)| c[f][v as usize]).product())
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Expected count of `query` at `node` under the mixture, scaled to `n_total` records.
pub fn model_answer(model: &HpdModel, query: &MarginalQuery, node: usize, n_total: f64) -> Result<f64> {
    if node >= model.tree.len() {
        return Err(Error::invalid(format!("unknown region node {node}")));
    }
    query_check(model, query)?;
    let span = model.tree.leaf_span(node);
    let products = model.feature_products(query);
    Ok(n_total
        * (0..model.components())
            .map(|c| model.weights[c] * model.regions[c][span.clone()].iter().sum::<f64>() * products[c])
            .sum::<f64>())
}

fn query_check(model: &HpdModel, query: &MarginalQuery) -> Result<()> {
    for &(f, v) in query.predicates() {
        if f >= model.schema.len() || v as usize >= model.schema.domain_size(f) {
            return Err(Error::Schema(format!("query predicate ({f}, {v}) outside the model schema")));
        }
    }
    Ok(())
}

/// Partial derivatives of [`model_answer`] with respect to every parameter,
/// treating each entry as a free variable.
pub fn model_answer_gradient(model: &HpdModel, query: &MarginalQuery, node: usize, n_total: f64) -> Result<HpdGradient> {
    if node >= model.tree.len() {
        return Err(Error::invalid(format!("unknown region node {node}")));
    }
    query_check(model, query)?;
    let span = model.tree.leaf_span(node);
    let mut g = HpdGradient::zeros_like(model);
    for c in 0..model.components() {
        let region_mass: f64 = model.regions[c][span.clone()].iter().sum();
        let probs: Vec<f64> = query.predicates().iter().map(|&(f, v)| model.features[c][f][v as usize]).collect();
        let product: f64 = probs.iter().product();
        g.weights[c] = n_total * region_mass * product;
        for leaf in span.clone() {
            g.regions[c][leaf] = n_total * model.weights[c] * product;
        }
        for (i, &(f, v)) in query.predicates().iter().enumerate() {
            let others: f64 = probs.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, p)| p).product();
            g.features[c][f][v as usize] = n_total * model.weights[c] * region_mass * others;
        }
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Measurement {
    pub round: usize,
    pub query: usize,
    pub region: usize,
    pub noisy_answer: f64,
    pub epsilon_spent: f64,
    pub delta_spent: f64,
}

/// Append-only record of every noisy measurement. Rounds start at 1 and are
/// contiguous.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MeasurementLog {
    entries: Vec<Measurement>,
}

impl MeasurementLog {
    pub fn push(&mut self, m: Measurement) -> Result<()> {
        let last = self.entries.last().map_or(0, |e| e.round);
        let ok = if last == 0 { m.round == 1 } else { m.round == last || m.round == last + 1 };
        if !ok {
            return Err(Error::Validation(format!(
                "measurement round {} does not follow round {last}",
                m.round
            )));
        }
        self.entries.push(m);
        Ok(())
    }

    pub fn entries(&self) -> &[Measurement] {
        &self.entries
    }

    pub fn rounds(&self) -> usize {
        self.entries.last().map_or(0, |e| e.round)
    }

    pub fn write_csv<W: Write>(&self, writer: W, tree: &RegionTree) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["round", "query_id", "region_id", "noisy_answer", "epsilon_spent", "delta_spent"])?;
        for e in &self.entries {
            wtr.write_record([
                e.round.to_string(),
                e.query.to_string(),
                tree.id(e.region).to_string(),
                e.noisy_answer.to_string(),
                e.epsilon_spent.to_string(),
                e.delta_spent.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HpdConfig {
    pub epsilon: f64,
    pub delta: f64,
    pub rounds: usize,
    pub learning_rate: f64,
    pub components: usize,
    /// Projected gradient steps after each new measurement.
    pub steps_per_round: usize,
    /// Synthetic record count; defaults to the true population size.
    pub n_out: Option<usize>,
}

impl Default for HpdConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            delta: 1e-9,
            rounds: 100,
            learning_rate: 0.1,
            components: 32,
            steps_per_round: 20,
            n_out: None,
        }
    }
}

impl HpdConfig {
    fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::invalid("HPD needs at least one round"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.components == 0 {
            return Err(Error::invalid("HPD needs at least one mixture component"));
        }
        if !(self.delta > 0.0) {
            return Err(Error::invalid("HPD's Gaussian measurements need delta > 0"));
        }
        Ok(())
    }
}

/// Outcome of [`adaptive_measurements_fit`].
#[derive(Debug, Clone)]
pub struct HpdFit {
    pub model: HpdModel,
    pub log: MeasurementLog,
    pub budget: PrivacyBudget,
    /// Loss on the round's log before and after that round's optimization.
    pub round_losses: Vec<(f64, f64)>,
    /// Steps whose accepted update increased the loss; always zero.
    pub loss_increases: usize,
    /// Parameter vectors found off the simplex by the per-step audit.
    pub simplex_violations: usize,
    /// Number of distinct queries per round's epsilon spend (selection, measurement).
    pub round_spends: Vec<(f64, f64)>,
}

/// Leaf measurements grouped by query: the loss over all rows equals
/// `sum_q count_q * sum_leaf (f - mean)^2 + constant`.
struct Targets {
    /// (query index, measurement count, mean noisy leaf fractions)
    groups: Vec<(usize, f64, Vec<f64>)>,
    constant: f64,
}

impl Targets {
    fn from_log(log: &MeasurementLog, leaves: usize, leaf_start: usize, n: f64) -> Self {
        let mut sums: BTreeMap<usize, (f64, Vec<f64>, f64)> = BTreeMap::new();
        let mut rows_per_query: BTreeMap<usize, usize> = BTreeMap::new();
        for e in log.entries() {
            let y = e.noisy_answer / n;
            let entry = sums.entry(e.query).or_insert_with(|| (0.0, vec![0.0; leaves], 0.0));
            entry.1[e.region - leaf_start] += y;
            entry.2 += y * y;
            *rows_per_query.entry(e.query).or_default() += 1;
        }
        let mut constant = 0.0;
        let groups = sums
            .into_iter()
            .map(|(q, (_, sum, sq))| {
                let count = (rows_per_query[&q] / leaves) as f64;
                let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
                constant += sq - count * mean.iter().map(|m| m * m).sum::<f64>();
                (q, count, mean)
            })
            .collect();
        Self { groups, constant }
    }
}

/// Squared error (in units of fractions of the population) and optionally its
/// gradient.
fn loss_and_gradient(model: &HpdModel, queries: &QuerySet, targets: &Targets, want_grad: bool) -> (f64, Option<HpdGradient>) {
    let k = model.components();
    let leaves = model.tree.num_leaves();
    let mut loss = targets.constant;
    let mut grad = want_grad.then(|| HpdGradient::zeros_like(model));
    let mut weighted = vec![0.0; k];
    let mut residual = vec![0.0; leaves];
    for (q, count, mean) in &targets.groups {
        let query = queries.get(*q);
        let products = model.feature_products(query);
        for c in 0..k {
            weighted[c] = model.weights[c] * products[c];
        }
        for leaf in 0..leaves {
            let f: f64 = (0..k).map(|c| weighted[c] * model.regions[c][leaf]).sum();
            let r = f - mean[leaf];
            loss += count * r * r;
            residual[leaf] = 2.0 * count * r;
        }
        if let Some(g) = grad.as_mut() {
            for c in 0..k {
                let s: f64 = (0..leaves).map(|l| residual[l] * model.regions[c][l]).sum();
                g.weights[c] += s * products[c];
                for l in 0..leaves {
                    g.regions[c][l] += residual[l] * weighted[c];
                }
                let preds = query.predicates();
                for (i, &(f, v)) in preds.iter().enumerate() {
                    let others: f64 = preds
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != i)
                        .map(|(_, &(f2, v2))| model.features[c][f2][v2 as usize])
                        .product();
                    g.features[c][f][v as usize] += s * model.weights[c] * others;
                }
            }
        }
    }
    (loss, grad)
}

fn projected_step(model: &HpdModel, grad: &HpdGradient, step: f64) -> HpdModel {
    let move_to = |p: &[f64], g: &[f64]| -> Vec<f64> {
        let moved: Vec<f64> = p.iter().zip(g).map(|(x, d)| x - step * d).collect();
        project_to_simplex(&moved, 1.0)
    };
    let mut next = model.clone();
    next.weights = move_to(&model.weights, &grad.weights);
    for c in 0..model.components() {
        next.regions[c] = move_to(&model.regions[c], &grad.regions[c]);
        for f in 0..model.features[c].len() {
            next.features[c][f] = move_to(&model.features[c][f], &grad.features[c][f]);
        }
    }
    next
}

const MAX_BACKTRACKS: usize = 30;

/// Projected gradient descent with an infinity-norm-normalized direction: the
/// first trial moves no entry by more than `learning_rate`, and the step is
/// halved until the loss does not increase.
fn optimize(model: &mut HpdModel, queries: &QuerySet, targets: &Targets, config: &HpdConfig, audit: &mut (usize, usize)) -> f64 {
    let (mut loss, _) = loss_and_gradient(model, queries, targets, false);
    for _ in 0..config.steps_per_round {
        let (_, grad) = loss_and_gradient(model, queries, targets, true);
        let grad = grad.expect("gradient requested");
        let scale = grad.max_abs();
        if scale == 0.0 {
            break;
        }
        let mut step = config.learning_rate / scale;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let candidate = projected_step(model, &grad, step);
            let (cand_loss, _) = loss_and_gradient(&candidate, queries, targets, false);
            if cand_loss <= loss {
                accepted = Some((candidate, cand_loss));
                break;
            }
            step *= 0.5;
        }
        let Some((candidate, cand_loss)) = accepted else { break };
        if cand_loss > loss {
            audit.0 += 1;
        }
        audit.1 += candidate.simplex_violations();
        *model = candidate;
        loss = cand_loss;
    }
    loss
}

/// Runs `config.rounds` rounds of select / measure / optimize against the
/// in-distribution `queries`. Each round spends `epsilon / rounds`, half on
/// selection and half on measurement; all of delta goes to measurement,
/// `delta / rounds` per round.
pub fn adaptive_measurements_fit(population: &Population, queries: &Arc<QuerySet>, config: &HpdConfig, seed: u64) -> Result<HpdFit> {
    config.validate()?;
    if queries.is_empty() {
        return Err(Error::invalid("HPD needs at least one training query"));
    }
    let mut budget = PrivacyBudget::new(config.epsilon, config.delta)?;
    let rounds = config.rounds as f64;
    let select_eps = config.epsilon / rounds / 2.0;
    let measure_eps = config.epsilon / rounds - select_eps;
    let measure_delta = config.delta / rounds;
    let sigma = gaussian_sigma(1.0, measure_eps, measure_delta)?;

    let tree = population.tree().clone();
    let leaves = tree.num_leaves();
    let leaf_start = tree.leaf_node(0);
    let n = population.len() as f64;
    let truth = evaluate(population, queries)?;

    let root_rng = RandomSource::new(seed);
    let mut init_rng = root_rng.substream(&[0]);
    let mut model = HpdModel::initialize(population.schema().clone(), tree.clone(), config.components, &mut init_rng)?;
    let mut log = MeasurementLog::default();
    let mut round_losses = Vec::with_capacity(config.rounds);
    let mut round_spends = Vec::with_capacity(config.rounds);
    let mut audit = (0usize, 0usize);

    for round in 1..=config.rounds {
        let mut rng = root_rng.substream(&[1, round as u64]);

        budget.spend(select_eps, 0.0)?;
        let scores: Vec<f64> = (0..queries.len())
            .map(|q| {
                let products = model.feature_products(queries.get(q));
                (0..leaves)
                    .map(|l| {
                        let f: f64 = (0..model.components())
                            .map(|c| model.weights[c] * products[c] * model.regions[c][l])
                            .sum();
                        (n * f - truth.get(q, leaf_start + l)).abs()
                    })
                    .sum()
            })
            .collect();
        let picked = exponential_mechanism(&scores, 1.0, select_eps, &mut rng)?;

        budget.spend(measure_eps, measure_delta)?;
        for l in 0..leaves {
            let z: f64 = StandardNormal.sample(&mut rng);
            log.push(Measurement {
                round,
                query: picked,
                region: leaf_start + l,
                noisy_answer: truth.get(picked, leaf_start + l) + sigma * z,
                epsilon_spent: measure_eps,
                delta_spent: measure_delta,
            })?;
        }
        round_spends.push((select_eps, measure_eps));

        let targets = Targets::from_log(&log, leaves, leaf_start, n);
        let (before, _) = loss_and_gradient(&model, queries, &targets, false);
        let after = optimize(&mut model, queries, &targets, config, &mut audit);
        round_losses.push((before, after));
    }

    Ok(HpdFit {
        model,
        log,
        budget,
        round_losses,
        loss_increases: audit.0,
        simplex_violations: audit.1,
        round_spends,
    })
}

/// Draws records one at a time: component, then region, then each feature.
pub fn sample_synthetic(model: &HpdModel, n_out: usize, rng: &mut RandomSource) -> Result<Population> {
    if n_out == 0 {
        return Err(Error::invalid("synthetic population size must be at least 1"));
    }
    let m = model.schema.len();
    let mut values = Vec::with_capacity(n_out * m);
    let mut leaves = Vec::with_capacity(n_out);
    for _ in 0..n_out {
        let c = sample_index(&model.weights, rng);
        leaves.push(sample_index(&model.regions[c], rng) as u32);
        for f in 0..m {
            values.push(sample_index(&model.features[c][f], rng) as u32);
        }
    }
    Population::with_sequential_ids(model.schema.clone(), model.tree.clone(), values, leaves)
}

#[derive(Debug, Clone)]
pub struct HpdRelease {
    pub synthetic: Population,
    pub fit: HpdFit,
}

/// Fit and sample with sub-streams of `seed`.
pub fn run_hpd(population: &Population, queries: &Arc<QuerySet>, config: &HpdConfig, seed: u64) -> Result<HpdRelease> {
    let fit = adaptive_measurements_fit(population, queries, config, seed)?;
    let mut rng = RandomSource::new(seed).substream(&[2]);
    let synthetic = sample_synthetic(&fit.model, config.n_out.unwrap_or(population.len()), &mut rng)?;
    Ok(HpdRelease { synthetic, fit })
}
