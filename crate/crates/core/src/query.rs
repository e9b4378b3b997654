//! k-way marginal queries and per-region answer tables.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dp::RandomSource;
use crate::error::{Error, Result};
use crate::population::{Attribute, FeatureSchema, Population, RegionTree};

/// Conjunction of `feature == value` predicates. Predicates are kept sorted by
/// feature index so that two queries with the same predicate set compare equal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MarginalQuery {
    predicates: Vec<(usize, u32)>,
}

impl MarginalQuery {
    pub fn new(mut predicates: Vec<(usize, u32)>, schema: &FeatureSchema) -> Result<Self> {
        if predicates.is_empty() {
            return Err(Error::invalid("a marginal query needs at least one predicate"));
        }
        predicates.sort_unstable();
        for w in predicates.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::invalid(format!(
                    "feature {} appears twice in one query",
                    w[0].0
                )));
            }
        }
        for &(f, v) in &predicates {
            if f >= schema.len() {
                return Err(Error::Schema(format!(
                    "query references feature {f}, schema has {}",
                    schema.len()
                )));
            }
            if v as usize >= schema.domain_size(f) {
                return Err(Error::Schema(format!(
                    "query value {v} outside domain of feature `{}`",
                    schema.features()[f].name
                )));
            }
        }
        Ok(Self { predicates })
    }

    pub fn k(&self) -> usize {
        self.predicates.len()
    }

    pub fn predicates(&self) -> &[(usize, u32)] {
        &self.predicates
    }

    pub fn matches(&self, row: &[u32]) -> bool {
        self.predicates.iter().all(|&(f, v)| row[f] == v)
    }

    fn check(&self, schema: &FeatureSchema) -> Result<()> {
        MarginalQuery::new(self.predicates.clone(), schema).map(|_| ())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredicateJson {
    feature: String,
    value: u32,
}

/// Ordered collection of distinct marginal queries.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct QuerySet {
    queries: Vec<MarginalQuery>,
}

impl QuerySet {
    pub fn new(queries: Vec<MarginalQuery>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(queries.len());
        for q in &queries {
            if !seen.insert(q) {
                return Err(Error::invalid(format!(
                    "duplicate query {:?} in query set",
                    q.predicates()
                )));
            }
        }
        Ok(Self { queries })
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn queries(&self) -> &[MarginalQuery] {
        &self.queries
    }

    pub fn get(&self, i: usize) -> &MarginalQuery {
        &self.queries[i]
    }

    pub fn validate(&self, schema: &FeatureSchema) -> Result<()> {
        self.queries.iter().try_for_each(|q| q.check(schema))
    }

    pub fn to_json(&self, schema: &FeatureSchema) -> Result<String> {
        let doc: Vec<Vec<PredicateJson>> = self
            .queries
            .iter()
            .map(|q| {
                q.predicates()
                    .iter()
                    .map(|&(f, v)| PredicateJson {
                        feature: schema.features()[f].name.clone(),
                        value: v,
                    })
                    .collect()
            })
            .collect();
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(json: &str, schema: &FeatureSchema) -> Result<Self> {
        let doc: Vec<Vec<PredicateJson>> = serde_json::from_str(json)?;
        let queries = doc
            .into_iter()
            .map(|preds| {
                let preds = preds
                    .into_iter()
                    .map(|p| {
                        schema
                            .index_of(&p.feature)
                            .map(|f| (f, p.value))
                            .ok_or_else(|| Error::Schema(format!("unknown feature `{}`", p.feature)))
                    })
                    .collect::<Result<Vec<_>>>()?;
                MarginalQuery::new(preds, schema)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(queries)
    }
}

/// Dense `|Q| x |nodes|` matrix of answers, row-major by query.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerTable {
    queries: Arc<QuerySet>,
    tree: Arc<RegionTree>,
    values: Vec<f64>,
}

impl AnswerTable {
    pub fn new(queries: Arc<QuerySet>, tree: Arc<RegionTree>, values: Vec<f64>) -> Result<Self> {
        if values.len() != queries.len() * tree.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} queries x {} nodes",
                values.len(),
                queries.len(),
                tree.len()
            )));
        }
        Ok(Self {
            queries,
            tree,
            values,
        })
    }

    pub fn zeros(queries: Arc<QuerySet>, tree: Arc<RegionTree>) -> Self {
        let len = queries.len() * tree.len();
        Self {
            queries,
            tree,
            values: vec![0.0; len],
        }
    }

    pub fn queries(&self) -> &Arc<QuerySet> {
        &self.queries
    }

    pub fn tree(&self) -> &Arc<RegionTree> {
        &self.tree
    }

    pub fn num_queries(&self) -> usize {
        self.queries.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.tree.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, query: usize, node: usize) -> f64 {
        self.values[query * self.tree.len() + node]
    }

    pub fn set(&mut self, query: usize, node: usize, value: f64) {
        let nodes = self.tree.len();
        self.values[query * nodes + node] = value;
    }

    pub fn row(&self, query: usize) -> &[f64] {
        let n = self.tree.len();
        &self.values[query * n..(query + 1) * n]
    }

    pub fn row_mut(&mut self, query: usize) -> &mut [f64] {
        let n = self.tree.len();
        &mut self.values[query * n..(query + 1) * n]
    }

    /// True when both tables have the same query count and region tree.
    pub fn same_shape(&self, other: &AnswerTable) -> bool {
        self.num_queries() == other.num_queries()
            && (Arc::ptr_eq(&self.tree, &other.tree) || self.tree == other.tree)
    }

    pub(crate) fn ensure_same_shape(&self, other: &AnswerTable) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{}x{} table vs {}x{} table",
                self.num_queries(),
                self.num_nodes(),
                other.num_queries(),
                other.num_nodes()
            )))
        }
    }

    /// CSV with columns `query_id, region_id, value`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["query_id", "region_id", "value"])?;
        for q in 0..self.num_queries() {
            for node in 0..self.num_nodes() {
                wtr.write_record([
                    q.to_string(),
                    self.tree.id(node).to_string(),
                    self.get(q, node).to_string(),
                ])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads the CSV export. Query ids must be `0..|Q|` and every (query, region)
    /// cell must appear exactly once. The query predicates are not part of the
    /// export, so the returned table carries `queries` as supplied.
    pub fn read_csv<R: Read>(
        reader: R,
        queries: Arc<QuerySet>,
        tree: Arc<RegionTree>,
    ) -> Result<Self> {
        let (num_queries, values) = read_answer_csv(reader, &tree)?;
        if num_queries != queries.len() {
            return Err(Error::ShapeMismatch(format!(
                "answer table has {num_queries} queries, query set has {}",
                queries.len()
            )));
        }
        Self::new(queries, tree, values)
    }
}

/// Parses an answer-table CSV without a query set. Returns the number of
/// queries (one past the largest id) and row-major values.
pub fn read_answer_csv<R: Read>(reader: R, tree: &RegionTree) -> Result<(usize, Vec<f64>)> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["query_id", "region_id", "value"] {
        return Err(Error::Schema(
            "answer table header must be query_id,region_id,value".into(),
        ));
    }
    let mut cells: Vec<(usize, usize, f64)> = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec?;
        let bad = |column: &str, message: String| Error::Row {
            row,
            column: column.to_string(),
            message,
        };
        let q: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| bad("query_id", format!("`{}` is not a query index", &rec[0])))?;
        let node = tree
            .node_index(rec[1].trim())
            .ok_or_else(|| bad("region_id", format!("unknown region `{}`", &rec[1])))?;
        let v: f64 = rec[2]
            .trim()
            .parse()
            .map_err(|_| bad("value", format!("`{}` is not a number", &rec[2])))?;
        cells.push((q, node, v));
    }
    let num_queries = cells.iter().map(|c| c.0 + 1).max().unwrap_or(0);
    let mut values = vec![f64::NAN; num_queries * tree.len()];
    let mut seen = vec![false; values.len()];
    for (row, &(q, node, v)) in cells.iter().enumerate() {
        let idx = q * tree.len() + node;
        if seen[idx] {
            return Err(Error::Row {
                row: row + 1,
                column: "region_id".into(),
                message: format!("duplicate cell ({q}, {})", tree.id(node)),
            });
        }
        seen[idx] = true;
        values[idx] = v;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Validation(format!(
            "answer table is missing cell (query {}, region `{}`)",
            missing / tree.len(),
            tree.id(missing % tree.len())
        )));
    }
    Ok((num_queries, values))
}

/// Counts per query at every region node. Leaf counts are accumulated in one
/// pass over the records, then summed up the tree.
pub fn evaluate(population: &Population, queries: &Arc<QuerySet>) -> Result<AnswerTable> {
    queries.validate(population.schema())?;
    let tree = population.tree().clone();
    let nodes = tree.len();
    let mut table = AnswerTable::zeros(queries.clone(), tree.clone());
    table
        .values
        .par_chunks_mut(nodes)
        .zip(queries.queries().par_iter())
        .for_each(|(row, q)| {
            for (i, rec) in population.rows().enumerate() {
                if q.matches(rec) {
                    row[population.region_node(i)] += 1.0;
                }
            }
            aggregate_up(&tree, row);
        });
    Ok(table)
}

/// Adds every node's value into its parent, deepest levels first.
pub(crate) fn aggregate_up(tree: &RegionTree, row: &mut [f64]) {
    for node in (0..tree.len()).rev() {
        if !tree.is_leaf(node) {
            row[node] = tree.children(node).iter().map(|&c| row[c]).sum();
        }
    }
}

/// All `k`-subsets of `0..m` in lexicographic order.
fn k_subsets(m: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k == 0 || k > m {
        return out;
    }
    let mut cur: Vec<usize> = (0..k).collect();
    loop {
        out.push(cur.clone());
        let mut i = k;
        while i > 0 && cur[i - 1] == m - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return out;
        }
        cur[i - 1] += 1;
        for j in i..k {
            cur[j] = cur[j - 1] + 1;
        }
    }
}

/// Indexable universe of all k-way queries over a schema.
struct QueryUniverse<'a> {
    schema: &'a FeatureSchema,
    subsets: Vec<Vec<usize>>,
    /// Cumulative query counts; `offsets[i]` is the first rank of subset `i`.
    offsets: Vec<u128>,
    total: u128,
}

impl<'a> QueryUniverse<'a> {
    fn new(schema: &'a FeatureSchema, k: usize) -> Self {
        let subsets = k_subsets(schema.len(), k);
        let mut offsets = Vec::with_capacity(subsets.len());
        let mut total: u128 = 0;
        for s in &subsets {
            offsets.push(total);
            let cells: u128 = s.iter().map(|&f| schema.domain_size(f) as u128).product();
            total = total.saturating_add(cells);
        }
        Self {
            schema,
            subsets,
            offsets,
            total,
        }
    }

    fn unrank(&self, rank: u128) -> MarginalQuery {
        let i = self.offsets.partition_point(|&o| o <= rank) - 1;
        let mut rem = rank - self.offsets[i];
        let subset = &self.subsets[i];
        let mut preds = vec![(0usize, 0u32); subset.len()];
        for (slot, &f) in subset.iter().enumerate().rev() {
            let d = self.schema.domain_size(f) as u128;
            preds[slot] = (f, (rem % d) as u32);
            rem /= d;
        }
        MarginalQuery { predicates: preds }
    }
}

/// Number of distinct k-way queries over the schema.
pub fn count_queries(schema: &FeatureSchema, k: usize) -> u128 {
    QueryUniverse::new(schema, k).total
}

/// Draws `count_in + count_out` distinct k-way queries uniformly without
/// replacement and splits them into two disjoint sets.
pub fn sample_query_sets(
    seed: u64,
    schema: &FeatureSchema,
    k: usize,
    count_in: usize,
    count_out: usize,
) -> Result<(QuerySet, QuerySet)> {
    if k == 0 {
        return Err(Error::invalid("query order k must be at least 1"));
    }
    if k > schema.len() {
        return Err(Error::Infeasible(format!(
            "cannot build {k}-way queries from {} features",
            schema.len()
        )));
    }
    let universe = QueryUniverse::new(schema, k);
    let wanted = count_in + count_out;
    if wanted as u128 > universe.total {
        return Err(Error::Infeasible(format!(
            "requested {wanted} distinct {k}-way queries, only {} exist",
            universe.total
        )));
    }
    let total = usize::try_from(universe.total).map_err(|_| {
        Error::Infeasible(format!("{k}-way query universe too large to index"))
    })?;
    let mut rng = RandomSource::new(seed);
    let mut ranks = rand::seq::index::sample(&mut rng, total, wanted).into_vec();
    ranks.shuffle(&mut rng);
    let mut queries: Vec<MarginalQuery> =
        ranks.into_iter().map(|r| universe.unrank(r as u128)).collect();
    let out = queries.split_off(count_in);
    Ok((QuerySet::new(queries)?, QuerySet::new(out)?))
}

/// Row-major probability table over a list of attribute domains.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbabilityTable {
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

impl ProbabilityTable {
    pub fn new(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if dims.iter().product::<usize>() != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for dims {:?}",
                values.len(),
                dims
            )));
        }
        Ok(Self { dims, values })
    }

    /// Normalizes non-negative counts; an all-zero table is rejected.
    pub fn from_counts(dims: Vec<usize>, counts: Vec<f64>) -> Result<Self> {
        let total: f64 = counts.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Validation("cannot normalize a table with zero mass".into()));
        }
        Self::new(dims, counts.into_iter().map(|c| c / total).collect())
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Empirical joint distribution of a feature subset.
pub fn marginal_table(population: &Population, features: &[usize]) -> Result<ProbabilityTable> {
    if features.is_empty() {
        return Err(Error::invalid("marginal table needs a non-empty feature subset"));
    }
    let distinct: HashSet<_> = features.iter().collect();
    if distinct.len() != features.len() {
        return Err(Error::invalid("marginal table features must be distinct"));
    }
    let attrs: Vec<Attribute> = features.iter().map(|&f| Attribute::Feature(f)).collect();
    attribute_table(population, &attrs)
}

pub(crate) fn attribute_table(population: &Population, attrs: &[Attribute]) -> Result<ProbabilityTable> {
    let counts = population.joint_counts(attrs)?;
    let dims = attrs.iter().map(|&a| population.attribute_domain(a)).collect();
    ProbabilityTable::from_counts(dims, counts)
}
