//! Maximum-spanning-tree synthesizer.
//!
//! 1. Build a graph over the features plus the region, weighted by pairwise
//!    mutual information, and privately pick a spanning tree with the
//!    exponential mechanism (one edge per step).
//! 2. Measure every tree edge's full two-way contingency table with the
//!    Gaussian mechanism and repair the noisy tables into distributions.
//! 3. Fit the tree-factored model rooted at the region node and draw records by
//!    ancestral sampling.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dp::{exponential_mechanism, gaussian_sigma, PrivacyBudget, RandomSource};
use crate::error::{Error, Result};
use crate::population::{Attribute, FeatureSchema, Population, RegionTree};
use crate::simplex::project_to_simplex;

/// `sum p(a,b) ln(p(a,b) / (p(a) p(b)))` of a row-major joint count table.
pub fn mutual_information_from_counts(counts: &[f64], rows: usize, cols: usize) -> f64 {
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let row_p: Vec<f64> = (0..rows)
        .map(|i| counts[i * cols..(i + 1) * cols].iter().sum::<f64>() / total)
        .collect();
    let col_p: Vec<f64> = (0..cols)
        .map(|j| (0..rows).map(|i| counts[i * cols + j]).sum::<f64>() / total)
        .collect();
    let mut mi = 0.0;
    for i in 0..rows {
        for j in 0..cols {
            let p = counts[i * cols + j] / total;
            if p > 0.0 {
                mi += p * (p / (row_p[i] * col_p[j])).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Empirical mutual information (nats) between two record attributes.
pub fn mutual_information(population: &Population, a: Attribute, b: Attribute) -> Result<f64> {
    if a == b {
        return Err(Error::invalid("mutual information needs two distinct attributes"));
    }
    let counts = population.joint_counts(&[a, b])?;
    Ok(mutual_information_from_counts(
        &counts,
        population.attribute_domain(a),
        population.attribute_domain(b),
    ))
}

/// Graph node `m < M` is feature `m`; node `M` is the region.
pub fn node_attribute(node: usize, num_features: usize) -> Attribute {
    if node == num_features {
        Attribute::Region
    } else {
        Attribute::Feature(node)
    }
}

/// Complete graph over features and region with mutual-information weights.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationGraph {
    num_nodes: usize,
    weights: Vec<f64>,
}

impl CorrelationGraph {
    pub fn new(num_nodes: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != num_nodes * num_nodes {
            return Err(Error::ShapeMismatch(format!(
                "{} weights for {num_nodes} nodes",
                weights.len()
            )));
        }
        for i in 0..num_nodes {
            for j in 0..num_nodes {
                let w = weights[i * num_nodes + j];
                if i == j && w != 0.0 {
                    return Err(Error::Validation("correlation graph has a self-edge".into()));
                }
                if !(w >= 0.0) || w != weights[j * num_nodes + i] {
                    return Err(Error::Validation(format!(
                        "edge ({i}, {j}) weight must be non-negative and symmetric"
                    )));
                }
            }
        }
        Ok(Self { num_nodes, weights })
    }

    pub fn from_population(population: &Population) -> Result<Self> {
        let m = population.schema().len();
        let n = m + 1;
        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .collect();
        let mis = pairs
            .par_iter()
            .map(|&(i, j)| mutual_information(population, node_attribute(i, m), node_attribute(j, m)))
            .collect::<Result<Vec<f64>>>()?;
        let mut weights = vec![0.0; n * n];
        for (&(i, j), mi) in pairs.iter().zip(mis) {
            weights[i * n + j] = mi;
            weights[j * n + i] = mi;
        }
        Ok(Self { num_nodes: n, weights })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.num_nodes + j]
    }
}

/// Spanning tree oriented away from `root`; edges are `(parent, child)` in
/// breadth-first order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanningTree {
    pub num_nodes: usize,
    pub root: usize,
    pub edges: Vec<(usize, usize)>,
}

impl SpanningTree {
    /// Orients an undirected edge set away from `root`.
    pub fn from_undirected(num_nodes: usize, root: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if root >= num_nodes || edges.len() + 1 != num_nodes {
            return Err(Error::Validation(format!(
                "{} edges cannot span {num_nodes} nodes",
                edges.len()
            )));
        }
        let mut adj = vec![Vec::new(); num_nodes];
        for &(a, b) in edges {
            if a >= num_nodes || b >= num_nodes || a == b {
                return Err(Error::Validation(format!("invalid edge ({a}, {b})")));
            }
            adj[a].push(b);
            adj[b].push(a);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        let mut seen = vec![false; num_nodes];
        seen[root] = true;
        let mut oriented = Vec::with_capacity(edges.len());
        let mut queue = VecDeque::from([root]);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    oriented.push((u, v));
                    queue.push_back(v);
                }
            }
        }
        if oriented.len() != edges.len() {
            return Err(Error::Validation("edge set is not a spanning tree".into()));
        }
        Ok(Self {
            num_nodes,
            root,
            edges: oriented,
        })
    }

    /// Undirected edges as sorted `(min, max)` pairs, sorted.
    pub fn canonical_edges(&self) -> Vec<(usize, usize)> {
        let mut e: Vec<_> = self.edges.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
        e.sort_unstable();
        e
    }

    pub fn total_weight(&self, graph: &CorrelationGraph) -> f64 {
        self.edges.iter().map(|&(a, b)| graph.weight(a, b)).sum()
    }
}

struct DisjointSets {
    parent: Vec<usize>,
}

impl DisjointSets {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        self.parent[ra] = rb;
    }
}

/// Private spanning-tree selection. Each of the `nodes - 1` steps runs the
/// exponential mechanism with budget `epsilon / (nodes - 1)` over every edge
/// that joins two current components, scored by its weight. With a large
/// `epsilon` this is Kruskal's algorithm.
pub fn select_tree(
    graph: &CorrelationGraph,
    epsilon: f64,
    sensitivity: f64,
    root: usize,
    rng: &mut RandomSource,
) -> Result<SpanningTree> {
    let n = graph.num_nodes();
    if n < 2 {
        return Err(Error::invalid("spanning-tree selection needs at least two nodes"));
    }
    if root >= n {
        return Err(Error::invalid(format!("root {root} outside 0..{n}")));
    }
    let step_epsilon = epsilon / (n - 1) as f64;
    let mut sets = DisjointSets::new(n);
    let mut chosen = Vec::with_capacity(n - 1);
    for _ in 0..n - 1 {
        let mut candidates = Vec::new();
        let mut scores = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if sets.find(i) != sets.find(j) {
                    candidates.push((i, j));
                    scores.push(graph.weight(i, j));
                }
            }
        }
        let pick = candidates[exponential_mechanism(&scores, sensitivity, step_epsilon, rng)?];
        sets.union(pick.0, pick.1);
        chosen.push(pick);
    }
    SpanningTree::from_undirected(n, root, &chosen)
}

/// How noisy contingency tables are turned back into distributions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableRepair {
    /// Clamp negatives to zero, then renormalize.
    #[default]
    ClampNormalize,
    /// Euclidean projection onto the probability simplex.
    Projection,
}

impl TableRepair {
    fn apply(self, noisy_counts: &[f64]) -> Vec<f64> {
        let total: f64 = noisy_counts.iter().map(|c| c.max(0.0)).sum();
        match self {
            TableRepair::ClampNormalize if total > 0.0 => {
                noisy_counts.iter().map(|c| c.max(0.0) / total).collect()
            }
            TableRepair::ClampNormalize => vec![1.0 / noisy_counts.len() as f64; noisy_counts.len()],
            TableRepair::Projection => {
                let scale = noisy_counts.iter().sum::<f64>().abs().max(1.0);
                let scaled: Vec<f64> = noisy_counts.iter().map(|c| c / scale).collect();
                project_to_simplex(&scaled, 1.0)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelEdge {
    pub parent: usize,
    pub child: usize,
    /// Row-major `P(parent, child)`.
    pub joint: Vec<f64>,
}

/// Tree-factored distribution over the features and the region.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreeModel {
    pub domains: Vec<usize>,
    pub root: usize,
    pub edges: Vec<ModelEdge>,
    pub marginals: Vec<Vec<f64>>,
    /// Conditional rows that had no mass and were replaced by the child's margin.
    pub repaired_rows: usize,
    #[serde(skip)]
    conditionals: Vec<Vec<f64>>,
    #[serde(skip)]
    schema: Arc<FeatureSchema>,
    #[serde(skip)]
    region_tree: Arc<RegionTree>,
}

impl TreeModel {
    /// Fits a model from per-edge joint tables (any non-negative scale; each is
    /// normalized). The root marginal averages the root-side margins of the
    /// root's edges; every other node's marginal is propagated down the tree
    /// from its parent through the edge conditional, so edge tables and node
    /// marginals agree exactly.
    pub fn from_edge_tables(
        schema: Arc<FeatureSchema>,
        region_tree: Arc<RegionTree>,
        tree: &SpanningTree,
        tables: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let m = schema.len();
        if tree.num_nodes != m + 1 || tree.root != m {
            return Err(Error::Validation(
                "model tree must span every feature and be rooted at the region node".into(),
            ));
        }
        if tables.len() != tree.edges.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} tables for {} edges",
                tables.len(),
                tree.edges.len()
            )));
        }
        let domains: Vec<usize> = (0..=m)
            .map(|node| match node_attribute(node, m) {
                Attribute::Feature(f) => schema.domain_size(f),
                Attribute::Region => region_tree.num_leaves(),
            })
            .collect();
        let mut normalized = Vec::with_capacity(tables.len());
        for (&(u, v), t) in tree.edges.iter().zip(tables) {
            if t.len() != domains[u] * domains[v] {
                return Err(Error::ShapeMismatch(format!(
                    "edge ({u}, {v}) table has {} cells, expected {}",
                    t.len(),
                    domains[u] * domains[v]
                )));
            }
            if t.iter().any(|x| !(*x >= 0.0)) {
                return Err(Error::Validation(format!("edge ({u}, {v}) table has negative mass")));
            }
            normalized.push(TableRepair::ClampNormalize.apply(&t));
        }

        let root = tree.root;
        let mut marginals = vec![Vec::new(); m + 1];
        let root_edges: Vec<usize> = (0..tree.edges.len()).filter(|&e| tree.edges[e].0 == root).collect();
        let mut root_marginal = vec![0.0; domains[root]];
        for &e in &root_edges {
            let dv = domains[tree.edges[e].1];
            for (a, slot) in root_marginal.iter_mut().enumerate() {
                *slot += normalized[e][a * dv..(a + 1) * dv].iter().sum::<f64>();
            }
        }
        let k = root_edges.len().max(1) as f64;
        root_marginal.iter_mut().for_each(|p| *p /= k);
        marginals[root] = root_marginal;

        let mut repaired_rows = 0;
        let mut edges = Vec::with_capacity(tree.edges.len());
        let mut conditionals = Vec::with_capacity(tree.edges.len());
        for (&(u, v), table) in tree.edges.iter().zip(&normalized) {
            let (du, dv) = (domains[u], domains[v]);
            let child_margin: Vec<f64> = (0..dv).map(|b| (0..du).map(|a| table[a * dv + b]).sum()).collect();
            let mut cond = vec![0.0; du * dv];
            for a in 0..du {
                let row = &table[a * dv..(a + 1) * dv];
                let mass: f64 = row.iter().sum();
                if mass > 0.0 {
                    for b in 0..dv {
                        cond[a * dv + b] = row[b] / mass;
                    }
                } else {
                    repaired_rows += 1;
                    cond[a * dv..(a + 1) * dv].copy_from_slice(&child_margin);
                }
            }
            let parent_marginal = &marginals[u];
            let joint: Vec<f64> = (0..du * dv).map(|i| parent_marginal[i / dv] * cond[i]).collect();
            marginals[v] = (0..dv).map(|b| (0..du).map(|a| joint[a * dv + b]).sum()).collect();
            edges.push(ModelEdge { parent: u, child: v, joint });
            conditionals.push(cond);
        }
        Ok(Self {
            domains,
            root,
            edges,
            marginals,
            repaired_rows,
            conditionals,
            schema,
            region_tree,
        })
    }

    pub fn spanning_tree(&self) -> SpanningTree {
        SpanningTree {
            num_nodes: self.domains.len(),
            root: self.root,
            edges: self.edges.iter().map(|e| (e.parent, e.child)).collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Fits per-edge Gaussian measurements. The whole `(epsilon, delta)` cost is
/// charged to `budget` before any noise is drawn and split evenly over edges;
/// each table has L2 sensitivity 1 under add/remove-one-record adjacency.
pub fn measure_and_fit(
    population: &Population,
    tree: &SpanningTree,
    epsilon: f64,
    delta: f64,
    repair: TableRepair,
    budget: &mut PrivacyBudget,
    rng: &mut RandomSource,
) -> Result<TreeModel> {
    let m = population.schema().len();
    let per_edge = tree.edges.len().max(1) as f64;
    let sigma = gaussian_sigma(1.0, epsilon / per_edge, delta / per_edge)?;
    budget.spend(epsilon, delta)?;
    let mut tables = Vec::with_capacity(tree.edges.len());
    for &(u, v) in &tree.edges {
        let counts = population.joint_counts(&[node_attribute(u, m), node_attribute(v, m)])?;
        let noisy: Vec<f64> = counts
            .iter()
            .map(|c| {
                let z: f64 = StandardNormal.sample(rng);
                c + sigma * z
            })
            .collect();
        tables.push(repair.apply(&noisy));
    }
    TreeModel::from_edge_tables(
        population.schema().clone(),
        population.tree().clone(),
        tree,
        tables,
    )
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SamplingDiagnostics {
    /// Draws whose parent value had an all-zero conditional row.
    pub marginal_fallbacks: usize,
}

fn cumulative(p: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    p.iter()
        .map(|x| {
            acc += x;
            acc
        })
        .collect()
}

fn draw(cdf: &[f64], rng: &mut impl Rng) -> usize {
    let u = rng.random::<f64>() * cdf[cdf.len() - 1];
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

/// Ancestral sampling: region first, then each edge's child given its parent.
pub fn sample_synthetic(
    model: &TreeModel,
    n_out: usize,
    rng: &mut RandomSource,
) -> Result<(Population, SamplingDiagnostics)> {
    if n_out == 0 {
        return Err(Error::invalid("synthetic population size must be at least 1"));
    }
    let m = model.schema.len();
    let root_cdf = cumulative(&model.marginals[model.root]);
    let marginal_cdfs: Vec<Vec<f64>> = model.marginals.iter().map(|p| cumulative(p)).collect();
    let cond_cdfs: Vec<Vec<Option<Vec<f64>>>> = model
        .edges
        .iter()
        .zip(&model.conditionals)
        .map(|(e, cond)| {
            let (du, dv) = (model.domains[e.parent], model.domains[e.child]);
            (0..du)
                .map(|a| {
                    let row = &cond[a * dv..(a + 1) * dv];
                    (row.iter().sum::<f64>() > 0.0).then(|| cumulative(row))
                })
                .collect()
        })
        .collect();

    let mut diagnostics = SamplingDiagnostics::default();
    let mut values = Vec::with_capacity(n_out * m);
    let mut leaves = Vec::with_capacity(n_out);
    let mut record = vec![0usize; m + 1];
    for _ in 0..n_out {
        record[model.root] = draw(&root_cdf, rng);
        for (e, rows) in model.edges.iter().zip(&cond_cdfs) {
            record[e.child] = match &rows[record[e.parent]] {
                Some(cdf) => draw(cdf, rng),
                None => {
                    diagnostics.marginal_fallbacks += 1;
                    draw(&marginal_cdfs[e.child], rng)
                }
            };
        }
        values.extend(record[..m].iter().map(|&v| v as u32));
        leaves.push(record[m] as u32);
    }
    let pop = Population::with_sequential_ids(model.schema.clone(), model.region_tree.clone(), values, leaves)?;
    Ok((pop, diagnostics))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MstConfig {
    pub epsilon: f64,
    pub delta: f64,
    /// Share of epsilon spent on tree selection; the rest goes to measurement.
    pub selection_fraction: f64,
    /// Sensitivity assumed for mutual-information scores (nats).
    pub mi_sensitivity: f64,
    pub repair: TableRepair,
    /// Synthetic record count; defaults to the true population size.
    pub n_out: Option<usize>,
}

impl Default for MstConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            delta: 1e-9,
            selection_fraction: 0.1,
            mi_sensitivity: 1.0,
            repair: TableRepair::ClampNormalize,
            n_out: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MstRelease {
    pub synthetic: Population,
    pub model: TreeModel,
    pub budget: PrivacyBudget,
    pub diagnostics: SamplingDiagnostics,
}

/// End-to-end synthesizer. Selection is charged pure epsilon; all of delta goes
/// to the Gaussian measurements.
pub fn run_mst(population: &Population, config: &MstConfig, rng: &mut RandomSource) -> Result<MstRelease> {
    if !(config.selection_fraction > 0.0 && config.selection_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "selection_fraction must lie in (0, 1), got {}",
            config.selection_fraction
        )));
    }
    let mut budget = PrivacyBudget::new(config.epsilon, config.delta)?;
    let select_eps = config.epsilon * config.selection_fraction;
    let measure_eps = config.epsilon - select_eps;
    let graph = CorrelationGraph::from_population(population)?;
    let region = population.schema().len();
    budget.spend(select_eps, 0.0)?;
    let tree = select_tree(&graph, select_eps, config.mi_sensitivity, region, rng)?;
    let model = measure_and_fit(
        population,
        &tree,
        measure_eps,
        config.delta,
        config.repair,
        &mut budget,
        rng,
    )?;
    let n_out = config.n_out.unwrap_or(population.len());
    let (synthetic, diagnostics) = sample_synthetic(&model, n_out, rng)?;
    Ok(MstRelease {
        synthetic,
        model,
        budget,
        diagnostics,
    })
}
