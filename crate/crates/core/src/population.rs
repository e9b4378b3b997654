//! Feature schema, region hierarchy, and the record table they describe.

use std::collections::{HashMap, HashSet, VecDeque};
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dp::{sample_index, RandomSource};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Feature {
    pub name: String,
    pub domain_size: u32,
}

impl Feature {
    pub fn new(name: impl Into<String>, domain_size: u32) -> Self {
        Self {
            name: name.into(),
            domain_size,
        }
    }
}

/// Ordered list of discretized features. Values of feature `m` are `0..domain_size`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Feature>", into = "Vec<Feature>")]
pub struct FeatureSchema {
    features: Vec<Feature>,
}

impl TryFrom<Vec<Feature>> for FeatureSchema {
    type Error = Error;

    fn try_from(features: Vec<Feature>) -> Result<Self> {
        FeatureSchema::new(features)
    }
}

impl From<FeatureSchema> for Vec<Feature> {
    fn from(s: FeatureSchema) -> Self {
        s.features
    }
}

impl FeatureSchema {
    pub fn new(features: Vec<Feature>) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::Schema("schema needs at least one feature".into()));
        }
        let mut seen = HashSet::new();
        for f in &features {
            if !seen.insert(f.name.as_str()) {
                return Err(Error::Schema(format!("duplicate feature name `{}`", f.name)));
            }
            if f.domain_size < 2 {
                return Err(Error::Schema(format!(
                    "feature `{}` has domain size {}, need at least 2",
                    f.name, f.domain_size
                )));
            }
        }
        Ok(Self { features })
    }

    /// Features `f0, f1, ...` with the given domain sizes.
    pub fn from_domain_sizes(sizes: &[u32]) -> Result<Self> {
        Self::new(
            sizes
                .iter()
                .enumerate()
                .map(|(i, &d)| Feature::new(format!("f{i}"), d))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn domain_size(&self, feature: usize) -> usize {
        self.features[feature].domain_size as usize
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionNodeSpec {
    pub id: String,
    #[serde(default)]
    pub parent: Option<String>,
}

/// Serialized description of a region hierarchy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TreeSpec {
    /// Explicit node list with parent links.
    Nodes(Vec<RegionNodeSpec>),
    /// Every node at depth `d` has `branching[d]` children.
    Balanced {
        #[serde(default = "default_root_id")]
        root: String,
        branching: Vec<usize>,
    },
}

fn default_root_id() -> String {
    "R".to_string()
}

impl TreeSpec {
    pub fn build(&self) -> Result<RegionTree> {
        match self {
            TreeSpec::Nodes(nodes) => RegionTree::from_specs(nodes),
            TreeSpec::Balanced { root, branching } => RegionTree::balanced(root, branching),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct RegionNode {
    id: String,
    parent: Option<usize>,
    children: Vec<usize>,
    level: usize,
    leaf_span: Range<usize>,
}

/// Region hierarchy with all leaves at the same depth.
///
/// Nodes are stored in breadth-first order, so every level occupies a contiguous
/// index range and the leaves under any node form a contiguous range of leaf
/// ordinals. Level 0 is the root; `levels()` counts levels including the root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionTree {
    nodes: Vec<RegionNode>,
    level_starts: Vec<usize>,
    index: HashMap<String, usize>,
}

impl RegionTree {
    pub fn from_specs(specs: &[RegionNodeSpec]) -> Result<Self> {
        let pairs: Vec<(String, Option<String>)> = specs
            .iter()
            .map(|s| (s.id.clone(), s.parent.clone()))
            .collect();
        Self::new(&pairs)
    }

    /// Builds a tree from `(id, parent_id)` pairs. Sibling order follows input order.
    pub fn new(nodes: &[(String, Option<String>)]) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::Schema("region tree is empty".into()));
        }
        let mut input_index = HashMap::new();
        for (i, (id, _)) in nodes.iter().enumerate() {
            if input_index.insert(id.as_str(), i).is_some() {
                return Err(Error::Schema(format!("duplicate region id `{id}`")));
            }
        }
        let mut roots = Vec::new();
        let mut kids: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
        for (i, (id, parent)) in nodes.iter().enumerate() {
            match parent {
                None => roots.push(i),
                Some(p) => {
                    let &pi = input_index.get(p.as_str()).ok_or_else(|| {
                        Error::Schema(format!("region `{id}` has unknown parent `{p}`"))
                    })?;
                    kids[pi].push(i);
                }
            }
        }
        if roots.len() != 1 {
            return Err(Error::Schema(format!(
                "region tree needs exactly one root, found {}",
                roots.len()
            )));
        }

        // breadth-first relabeling
        let mut order = Vec::with_capacity(nodes.len());
        let mut depth = vec![0usize; nodes.len()];
        let mut queue = VecDeque::from([roots[0]]);
        while let Some(i) = queue.pop_front() {
            order.push(i);
            for &c in &kids[i] {
                depth[c] = depth[i] + 1;
                queue.push_back(c);
            }
        }
        if order.len() != nodes.len() {
            return Err(Error::Schema(
                "region tree contains a cycle or nodes unreachable from the root".into(),
            ));
        }
        let mut new_index = vec![0usize; nodes.len()];
        for (new, &old) in order.iter().enumerate() {
            new_index[old] = new;
        }
        let leaf_depth = order
            .iter()
            .filter(|&&i| kids[i].is_empty())
            .map(|&i| depth[i])
            .max()
            .unwrap_or(0);
        if let Some(&bad) = order
            .iter()
            .find(|&&i| kids[i].is_empty() && depth[i] != leaf_depth)
        {
            return Err(Error::Schema(format!(
                "leaf `{}` is at depth {}, but leaves must all be at depth {}",
                nodes[bad].0, depth[bad], leaf_depth
            )));
        }

        let mut tree_nodes: Vec<RegionNode> = order
            .iter()
            .map(|&old| RegionNode {
                id: nodes[old].0.clone(),
                parent: nodes[old].1.as_ref().map(|p| new_index[input_index[p.as_str()]]),
                children: kids[old].iter().map(|&c| new_index[c]).collect(),
                level: depth[old],
                leaf_span: 0..0,
            })
            .collect();
        let mut level_starts = vec![0usize];
        for (i, n) in tree_nodes.iter().enumerate().skip(1) {
            if n.level != tree_nodes[i - 1].level {
                level_starts.push(i);
            }
        }
        let leaf_start = *level_starts.last().unwrap();
        for i in (0..tree_nodes.len()).rev() {
            let span = if tree_nodes[i].children.is_empty() {
                (i - leaf_start)..(i - leaf_start + 1)
            } else {
                let first = tree_nodes[i].children[0];
                let last = *tree_nodes[i].children.last().unwrap();
                tree_nodes[first].leaf_span.start..tree_nodes[last].leaf_span.end
            };
            tree_nodes[i].leaf_span = span;
        }
        let index = tree_nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.clone(), i))
            .collect();
        Ok(Self {
            nodes: tree_nodes,
            level_starts,
            index,
        })
    }

    /// Balanced tree; node ids are dot-separated child paths below `root`.
    pub fn balanced(root: &str, branching: &[usize]) -> Result<Self> {
        if branching.iter().any(|&b| b == 0) {
            return Err(Error::Schema("branching factors must be positive".into()));
        }
        let mut pairs = vec![(root.to_string(), None)];
        let mut frontier = vec![root.to_string()];
        for &b in branching {
            let mut next = Vec::with_capacity(frontier.len() * b);
            for parent in &frontier {
                for c in 0..b {
                    let id = format!("{parent}.{c}");
                    pairs.push((id.clone(), Some(parent.clone())));
                    next.push(id);
                }
            }
            frontier = next;
        }
        Self::new(&pairs)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of levels, counting the root level.
    pub fn levels(&self) -> usize {
        self.level_starts.len()
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn id(&self, node: usize) -> &str {
        &self.nodes[node].id
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        self.nodes[node].parent
    }

    pub fn children(&self, node: usize) -> &[usize] {
        &self.nodes[node].children
    }

    pub fn level(&self, node: usize) -> usize {
        self.nodes[node].level
    }

    pub fn is_leaf(&self, node: usize) -> bool {
        self.nodes[node].children.is_empty()
    }

    /// Node indices at `level` (0 = root).
    pub fn level_nodes(&self, level: usize) -> Range<usize> {
        let start = self.level_starts[level];
        let end = self
            .level_starts
            .get(level + 1)
            .copied()
            .unwrap_or(self.nodes.len());
        start..end
    }

    pub fn num_leaves(&self) -> usize {
        self.level_nodes(self.levels() - 1).len()
    }

    /// Node index of the leaf with the given ordinal.
    pub fn leaf_node(&self, ordinal: usize) -> usize {
        self.level_starts[self.levels() - 1] + ordinal
    }

    pub fn leaf_ordinal(&self, node: usize) -> Option<usize> {
        self.is_leaf(node)
            .then(|| node - self.level_starts[self.levels() - 1])
    }

    /// Ordinals of the leaves in the subtree rooted at `node`.
    pub fn leaf_span(&self, node: usize) -> Range<usize> {
        self.nodes[node].leaf_span.clone()
    }

    pub fn ancestor_at_level(&self, mut node: usize, level: usize) -> usize {
        while self.nodes[node].level > level {
            node = self.nodes[node].parent.expect("non-root node has a parent");
        }
        node
    }

    pub fn to_spec(&self) -> TreeSpec {
        TreeSpec::Nodes(
            self.nodes
                .iter()
                .map(|n| RegionNodeSpec {
                    id: n.id.clone(),
                    parent: n.parent.map(|p| self.nodes[p].id.clone()),
                })
                .collect(),
        )
    }
}

/// A record attribute: one of the schema features, or the leaf region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Attribute {
    Feature(usize),
    Region,
}

/// Ground-truth (or synthetic) record table.
///
/// Regions are stored as leaf ordinals; ancestors are always derived from the tree.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    schema: Arc<FeatureSchema>,
    tree: Arc<RegionTree>,
    person_ids: Vec<u64>,
    values: Vec<u32>,
    leaves: Vec<u32>,
}

impl Population {
    /// `values` is row-major, `n * schema.len()` long; `leaves` holds leaf ordinals.
    pub fn new(
        schema: Arc<FeatureSchema>,
        tree: Arc<RegionTree>,
        person_ids: Vec<u64>,
        values: Vec<u32>,
        leaves: Vec<u32>,
    ) -> Result<Self> {
        let pop = Self {
            schema,
            tree,
            person_ids,
            values,
            leaves,
        };
        pop.validate()?;
        Ok(pop)
    }

    /// Like [`Population::new`] with person ids `0..n`.
    pub fn with_sequential_ids(
        schema: Arc<FeatureSchema>,
        tree: Arc<RegionTree>,
        values: Vec<u32>,
        leaves: Vec<u32>,
    ) -> Result<Self> {
        let ids = (0..leaves.len() as u64).collect();
        Self::new(schema, tree, ids, values, leaves)
    }

    /// Full re-validation of domains, regions, and id uniqueness.
    pub fn validate(&self) -> Result<()> {
        let m = self.schema.len();
        let n = self.leaves.len();
        if n == 0 {
            return Err(Error::Validation("population has no records".into()));
        }
        if self.person_ids.len() != n || self.values.len() != n * m {
            return Err(Error::Validation(format!(
                "inconsistent table dimensions: {} ids, {} leaves, {} values for {} features",
                self.person_ids.len(),
                n,
                self.values.len(),
                m
            )));
        }
        let mut ids = HashSet::with_capacity(n);
        for (row, &pid) in self.person_ids.iter().enumerate() {
            if !ids.insert(pid) {
                return Err(Error::Row {
                    row: row + 1,
                    column: "person_id".into(),
                    message: format!("duplicate person id {pid}"),
                });
            }
        }
        let leaves = self.tree.num_leaves() as u32;
        for row in 0..n {
            for (f, &v) in self.row(row).iter().enumerate() {
                let d = self.schema.features()[f].domain_size;
                if v >= d {
                    return Err(Error::Row {
                        row: row + 1,
                        column: self.schema.features()[f].name.clone(),
                        message: format!("value {v} outside domain 0..{d}"),
                    });
                }
            }
            if self.leaves[row] >= leaves {
                return Err(Error::Row {
                    row: row + 1,
                    column: "region".into(),
                    message: format!("leaf ordinal {} outside 0..{leaves}", self.leaves[row]),
                });
            }
        }
        Ok(())
    }

    pub fn schema(&self) -> &Arc<FeatureSchema> {
        &self.schema
    }

    pub fn tree(&self) -> &Arc<RegionTree> {
        &self.tree
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn person_ids(&self) -> &[u64] {
        &self.person_ids
    }

    pub fn row(&self, i: usize) -> &[u32] {
        let m = self.schema.len();
        &self.values[i * m..(i + 1) * m]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, u32> {
        self.values.chunks_exact(self.schema.len())
    }

    pub fn leaf_ordinals(&self) -> &[u32] {
        &self.leaves
    }

    /// Leaf region node index of record `i`.
    pub fn region_node(&self, i: usize) -> usize {
        self.tree.leaf_node(self.leaves[i] as usize)
    }

    pub fn attribute_domain(&self, attr: Attribute) -> usize {
        match attr {
            Attribute::Feature(m) => self.schema.domain_size(m),
            Attribute::Region => self.tree.num_leaves(),
        }
    }

    pub fn attribute_value(&self, i: usize, attr: Attribute) -> usize {
        match attr {
            Attribute::Feature(m) => self.values[i * self.schema.len() + m] as usize,
            Attribute::Region => self.leaves[i] as usize,
        }
    }

    pub(crate) fn check_attribute(&self, attr: Attribute) -> Result<()> {
        match attr {
            Attribute::Feature(m) if m >= self.schema.len() => Err(Error::invalid(format!(
                "feature index {m} out of range for {} features",
                self.schema.len()
            ))),
            _ => Ok(()),
        }
    }

    /// Row-major joint counts over the given attributes.
    pub fn joint_counts(&self, attrs: &[Attribute]) -> Result<Vec<f64>> {
        for &a in attrs {
            self.check_attribute(a)?;
        }
        let dims: Vec<usize> = attrs.iter().map(|&a| self.attribute_domain(a)).collect();
        let cells: usize = dims.iter().product();
        let mut counts = vec![0.0; cells];
        for i in 0..self.len() {
            let mut idx = 0;
            for (&a, &d) in attrs.iter().zip(&dims) {
                idx = idx * d + self.attribute_value(i, a);
            }
            counts[idx] += 1.0;
        }
        Ok(counts)
    }

    pub fn read_csv<R: Read>(
        reader: R,
        schema: Arc<FeatureSchema>,
        region_column: &str,
        tree: Arc<RegionTree>,
    ) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let mut positions = Vec::with_capacity(schema.len());
        for f in schema.features() {
            let pos = headers.iter().position(|h| h == f.name).ok_or_else(|| {
                Error::Schema(format!("missing column `{}` in CSV header", f.name))
            })?;
            positions.push(pos);
        }
        let region_pos = headers
            .iter()
            .position(|h| h == region_column)
            .ok_or_else(|| Error::Schema(format!("missing region column `{region_column}`")))?;
        if let Some(extra) = headers
            .iter()
            .find(|h| *h != region_column && schema.index_of(h).is_none())
        {
            return Err(Error::Schema(format!("unexpected column `{extra}` in CSV header")));
        }

        let mut values = Vec::new();
        let mut leaves = Vec::new();
        for (r, record) in rdr.records().enumerate() {
            let row = r + 1;
            let record = record?;
            for (f, &pos) in schema.features().iter().zip(&positions) {
                let cell = record.get(pos).unwrap_or("").trim();
                let v: u32 = cell.parse().map_err(|_| Error::Row {
                    row,
                    column: f.name.clone(),
                    message: format!("`{cell}` is not a non-negative integer"),
                })?;
                if v >= f.domain_size {
                    return Err(Error::Row {
                        row,
                        column: f.name.clone(),
                        message: format!("value {v} outside domain 0..{}", f.domain_size),
                    });
                }
                values.push(v);
            }
            let region = record.get(region_pos).unwrap_or("").trim();
            let leaf = tree
                .node_index(region)
                .and_then(|node| tree.leaf_ordinal(node))
                .ok_or_else(|| Error::Row {
                    row,
                    column: region_column.to_string(),
                    message: format!("`{region}` is not a leaf of the region tree"),
                })?;
            leaves.push(leaf as u32);
        }
        Self::with_sequential_ids(schema, tree, values, leaves)
    }

    pub fn write_csv<W: Write>(&self, writer: W, region_column: &str) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.schema.features().iter().map(|f| f.name.as_str()).collect();
        header.push(region_column);
        wtr.write_record(&header)?;
        let mut fields = Vec::with_capacity(header.len());
        for i in 0..self.len() {
            fields.clear();
            fields.extend(self.row(i).iter().map(|v| v.to_string()));
            fields.push(self.tree.id(self.region_node(i)).to_string());
            wtr.write_record(&fields)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Reads a population CSV; person ids are assigned `0..n` in row order.
pub fn ingest_csv(
    path: impl AsRef<Path>,
    schema: Arc<FeatureSchema>,
    region_column: &str,
    tree: Arc<RegionTree>,
) -> Result<Population> {
    let file = std::fs::File::open(path)?;
    Population::read_csv(std::io::BufReader::new(file), schema, region_column, tree)
}

/// Leaf probabilities of the planted population: proportional to `ordinal + 1`.
pub fn planted_leaf_weights(num_leaves: usize) -> Vec<f64> {
    let total = (num_leaves * (num_leaves + 1)) as f64 / 2.0;
    (0..num_leaves).map(|j| (j + 1) as f64 / total).collect()
}

/// Seeded population from a planted chain model.
///
/// Feature 0 is uniform. Each later feature copies the previous value (reduced
/// modulo its own domain) with probability `correlation`, and is otherwise
/// uniform. Regions are drawn independently from [`planted_leaf_weights`].
pub fn generate_population(
    seed: u64,
    n: usize,
    schema: Arc<FeatureSchema>,
    tree: Arc<RegionTree>,
    correlation: f64,
) -> Result<Population> {
    if n == 0 {
        return Err(Error::invalid("population size must be at least 1"));
    }
    if !(0.0..=1.0).contains(&correlation) {
        return Err(Error::invalid(format!(
            "correlation must lie in [0, 1], got {correlation}"
        )));
    }
    let mut rng = RandomSource::new(seed);
    let m = schema.len();
    let leaf_weights = planted_leaf_weights(tree.num_leaves());
    let mut values = Vec::with_capacity(n * m);
    let mut leaves = Vec::with_capacity(n);
    for _ in 0..n {
        let mut prev = 0u32;
        for f in 0..m {
            let d = schema.features()[f].domain_size;
            let v = if f > 0 && rng.random::<f64>() < correlation {
                prev % d
            } else {
                rng.random_range(0..d)
            };
            values.push(v);
            prev = v;
        }
        leaves.push(sample_index(&leaf_weights, &mut rng) as u32);
    }
    Population::with_sequential_ids(schema, tree, values, leaves)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_leaf_tree() -> Arc<RegionTree> {
        Arc::new(
            RegionTree::new(&[
                ("US".into(), None),
                ("A".into(), Some("US".into())),
                ("B".into(), Some("US".into())),
            ])
            .unwrap(),
        )
    }

    fn binary_schema() -> Arc<FeatureSchema> {
        Arc::new(FeatureSchema::from_domain_sizes(&[2, 2]).unwrap())
    }

    #[test]
    fn schema_invariants() {
        assert!(FeatureSchema::new(vec![]).is_err());
        assert!(FeatureSchema::from_domain_sizes(&[2, 1]).is_err());
        assert!(FeatureSchema::new(vec![Feature::new("a", 2), Feature::new("a", 3)]).is_err());
        let s: FeatureSchema =
            serde_json::from_str(r#"[{"name":"age","domain_size":4}]"#).unwrap();
        assert_eq!(s.domain_size(0), 4);
        assert!(serde_json::from_str::<FeatureSchema>(r#"[{"name":"age","domain_size":1}]"#).is_err());
    }

    #[test]
    fn tree_structure_is_breadth_first() {
        let t = RegionTree::new(&[
            ("a1".into(), Some("A".into())),
            ("US".into(), None),
            ("b1".into(), Some("B".into())),
            ("A".into(), Some("US".into())),
            ("B".into(), Some("US".into())),
            ("a2".into(), Some("A".into())),
        ])
        .unwrap();
        assert_eq!(t.levels(), 3);
        assert_eq!(t.id(0), "US");
        assert_eq!(t.level_nodes(1), 1..3);
        assert_eq!(t.num_leaves(), 3);
        let a = t.node_index("A").unwrap();
        assert_eq!(t.leaf_span(a).len(), 2);
        assert_eq!(t.leaf_span(t.root()), 0..3);
        let b1 = t.node_index("b1").unwrap();
        assert_eq!(t.ancestor_at_level(b1, 1), t.node_index("B").unwrap());
        assert_eq!(t.ancestor_at_level(b1, 0), 0);
    }

    #[test]
    fn tree_rejects_malformed_inputs() {
        assert!(RegionTree::new(&[]).is_err());
        assert!(RegionTree::new(&[("a".into(), None), ("b".into(), None)]).is_err());
        assert!(RegionTree::new(&[("a".into(), None), ("b".into(), Some("z".into()))]).is_err());
        // unequal leaf depth
        assert!(RegionTree::new(&[
            ("r".into(), None),
            ("a".into(), Some("r".into())),
            ("b".into(), Some("r".into())),
            ("c".into(), Some("a".into())),
        ])
        .is_err());
        // cycle detached from the root
        assert!(RegionTree::new(&[
            ("r".into(), None),
            ("a".into(), Some("b".into())),
            ("b".into(), Some("a".into())),
        ])
        .is_err());
    }

    #[test]
    fn balanced_tree_shape() {
        let t = RegionTree::balanced("R", &[20]).unwrap();
        assert_eq!(t.levels(), 2);
        assert_eq!(t.num_leaves(), 20);
        let t = RegionTree::balanced("R", &[3, 4]).unwrap();
        assert_eq!(t.levels(), 3);
        assert_eq!(t.num_leaves(), 12);
        let spec = t.to_spec();
        assert_eq!(spec.build().unwrap(), t);
    }

    #[test]
    fn csv_three_rows() {
        let data = "f0,f1,region\n1,0,A\n0,1,B\n1,1,A\n";
        let pop = Population::read_csv(data.as_bytes(), binary_schema(), "region", two_leaf_tree())
            .unwrap();
        assert_eq!(pop.len(), 3);
        assert_eq!(pop.row(0), &[1, 0]);
        assert_eq!(pop.row(2), &[1, 1]);
        assert_eq!(pop.tree().id(pop.region_node(1)), "B");
        assert_eq!(pop.person_ids(), &[0, 1, 2]);
    }

    #[test]
    fn csv_out_of_domain_value_names_row() {
        let schema = Arc::new(FeatureSchema::from_domain_sizes(&[4, 2]).unwrap());
        let data = "f0,f1,region\n1,0,A\n5,1,B\n";
        let err = Population::read_csv(data.as_bytes(), schema, "region", two_leaf_tree()).unwrap_err();
        match err {
            Error::Row { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "f0");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn csv_unknown_region() {
        let data = "f0,f1,region\n1,0,ZZ\n";
        let err = Population::read_csv(data.as_bytes(), binary_schema(), "region", two_leaf_tree())
            .unwrap_err();
        assert!(matches!(err, Error::Row { row: 1, .. }));
        // interior node is not a valid record region
        let data = "f0,f1,region\n1,0,US\n";
        assert!(Population::read_csv(data.as_bytes(), binary_schema(), "region", two_leaf_tree()).is_err());
    }

    #[test]
    fn csv_missing_column() {
        let data = "f0,region\n1,A\n";
        let err = Population::read_csv(data.as_bytes(), binary_schema(), "region", two_leaf_tree())
            .unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn csv_export_round_trips() {
        let tree = Arc::new(RegionTree::balanced("R", &[3]).unwrap());
        let schema = Arc::new(FeatureSchema::from_domain_sizes(&[3, 2, 4]).unwrap());
        let pop = generate_population(4, 50, schema.clone(), tree.clone(), 0.5).unwrap();
        let mut buf = Vec::new();
        pop.write_csv(&mut buf, "county").unwrap();
        let back = Population::read_csv(buf.as_slice(), schema, "county", tree).unwrap();
        assert_eq!(back, pop);
    }

    #[test]
    fn generated_population_is_deterministic() {
        let tree = Arc::new(RegionTree::balanced("R", &[5]).unwrap());
        let schema = Arc::new(FeatureSchema::from_domain_sizes(&[2, 3, 4]).unwrap());
        let a = generate_population(1, 500, schema.clone(), tree.clone(), 0.3).unwrap();
        let b = generate_population(1, 500, schema.clone(), tree.clone(), 0.3).unwrap();
        let c = generate_population(2, 500, schema, tree, 0.3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn generated_marginals_are_uniform_without_correlation() {
        let tree = Arc::new(RegionTree::balanced("R", &[4]).unwrap());
        let schema = Arc::new(FeatureSchema::from_domain_sizes(&[2, 3, 4]).unwrap());
        let n = 100;
        let pop = generate_population(1, n, schema.clone(), tree, 0.0).unwrap();
        for f in 0..schema.len() {
            let d = schema.domain_size(f);
            let counts = pop.joint_counts(&[Attribute::Feature(f)]).unwrap();
            let p = 1.0 / d as f64;
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            for c in counts {
                assert!((c - n as f64 * p).abs() <= 3.0 * sigma, "feature {f}: {c}");
            }
        }
    }

    #[test]
    fn partition_property_holds_at_every_level() {
        let tree = Arc::new(RegionTree::balanced("R", &[3, 2]).unwrap());
        let schema = Arc::new(FeatureSchema::from_domain_sizes(&[2]).unwrap());
        let pop = generate_population(9, 300, schema, tree.clone(), 0.0).unwrap();
        for level in 0..tree.levels() {
            let mut per_node = vec![0usize; tree.len()];
            for i in 0..pop.len() {
                per_node[tree.ancestor_at_level(pop.region_node(i), level)] += 1;
            }
            let total: usize = tree.level_nodes(level).map(|r| per_node[r]).sum();
            assert_eq!(total, pop.len());
        }
    }

    #[test]
    fn validation_catches_duplicates_and_bad_values() {
        let tree = two_leaf_tree();
        let schema = binary_schema();
        assert!(Population::new(schema.clone(), tree.clone(), vec![0, 0], vec![0, 1, 1, 0], vec![0, 1]).is_err());
        assert!(Population::new(schema.clone(), tree.clone(), vec![0, 1], vec![0, 2, 1, 0], vec![0, 1]).is_err());
        assert!(Population::new(schema.clone(), tree.clone(), vec![0], vec![0, 1], vec![2]).is_err());
        assert!(Population::new(schema, tree, vec![], vec![], vec![]).is_err());
    }
}
