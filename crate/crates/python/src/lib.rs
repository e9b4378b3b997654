use std::fs::File;
use std::sync::Arc;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use censusdp::hpd::{run_hpd, HpdConfig};
use censusdp::mst::{mutual_information as mi, run_mst, MstConfig};
use censusdp::population::{generate_population, ingest_csv, Attribute};
use censusdp::query::sample_query_sets;
use censusdp::query::ProbabilityTable;
use censusdp::topdown::{run_topdown, TopDownConfig};

fn err(e: censusdp::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err(e: std::io::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "Schema", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PySchema(Arc<censusdp::FeatureSchema>);

#[pymethods]
impl PySchema {
    /// `features` is a list of (name, domain_size) pairs.
    #[new]
    fn new(features: Vec<(String, u32)>) -> PyResult<Self> {
        let f = features.into_iter().map(|(n, d)| censusdp::Feature::new(n, d)).collect();
        Ok(Self(Arc::new(censusdp::FeatureSchema::new(f).map_err(err)?)))
    }

    #[staticmethod]
    fn from_domain_sizes(sizes: Vec<u32>) -> PyResult<Self> {
        Ok(Self(Arc::new(censusdp::FeatureSchema::from_domain_sizes(&sizes).map_err(err)?)))
    }

    fn names(&self) -> Vec<String> {
        self.0.features().iter().map(|f| f.name.clone()).collect()
    }

    fn domain_sizes(&self) -> Vec<usize> {
        (0..self.0.len()).map(|f| self.0.domain_size(f)).collect()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyclass(name = "RegionTree", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyRegionTree(Arc<censusdp::RegionTree>);

#[pymethods]
impl PyRegionTree {
    /// `nodes` is a list of (id, parent_id or None) pairs.
    #[new]
    fn new(nodes: Vec<(String, Option<String>)>) -> PyResult<Self> {
        Ok(Self(Arc::new(censusdp::RegionTree::new(&nodes).map_err(err)?)))
    }

    #[staticmethod]
    #[pyo3(signature = (branching, root = "R"))]
    fn balanced(branching: Vec<usize>, root: &str) -> PyResult<Self> {
        Ok(Self(Arc::new(censusdp::RegionTree::balanced(root, &branching).map_err(err)?)))
    }

    /// Node ids in breadth-first order.
    fn ids(&self) -> Vec<String> {
        (0..self.0.len()).map(|n| self.0.id(n).to_string()).collect()
    }

    fn levels(&self) -> usize {
        self.0.levels()
    }

    fn num_leaves(&self) -> usize {
        self.0.num_leaves()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyclass(name = "Population", frozen)]
struct PyPopulation(censusdp::Population);

#[pymethods]
impl PyPopulation {
    #[staticmethod]
    #[pyo3(signature = (seed, n, schema, tree, correlation = 0.5))]
    fn generate(seed: u64, n: usize, schema: &PySchema, tree: &PyRegionTree, correlation: f64) -> PyResult<Self> {
        Ok(Self(generate_population(seed, n, schema.0.clone(), tree.0.clone(), correlation).map_err(err)?))
    }

    #[staticmethod]
    #[pyo3(signature = (path, schema, tree, region_column = "region"))]
    fn read_csv(path: &str, schema: &PySchema, tree: &PyRegionTree, region_column: &str) -> PyResult<Self> {
        Ok(Self(ingest_csv(path, schema.0.clone(), region_column, tree.0.clone()).map_err(err)?))
    }

    #[pyo3(signature = (path, region_column = "region"))]
    fn write_csv(&self, path: &str, region_column: &str) -> PyResult<()> {
        self.0.write_csv(File::create(path).map_err(io_err)?, region_column).map_err(err)
    }

    fn rows(&self) -> Vec<Vec<u32>> {
        self.0.rows().map(|r| r.to_vec()).collect()
    }

    /// Leaf region id of every record.
    fn regions(&self) -> Vec<String> {
        (0..self.0.len()).map(|i| self.0.tree().id(self.0.region_node(i)).to_string()).collect()
    }

    fn schema(&self) -> PySchema {
        PySchema(self.0.schema().clone())
    }

    fn tree(&self) -> PyRegionTree {
        PyRegionTree(self.0.tree().clone())
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyclass(name = "QuerySet", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyQuerySet(Arc<censusdp::QuerySet>);

#[pymethods]
impl PyQuerySet {
    /// `queries` is a list of queries, each a list of (feature_index, value) predicates.
    #[new]
    fn new(queries: Vec<Vec<(usize, u32)>>, schema: &PySchema) -> PyResult<Self> {
        let qs = queries
            .into_iter()
            .map(|p| censusdp::MarginalQuery::new(p, &schema.0))
            .collect::<censusdp::Result<Vec<_>>>()
            .map_err(err)?;
        Ok(Self(Arc::new(censusdp::QuerySet::new(qs).map_err(err)?)))
    }

    /// Disjoint (in-distribution, out-of-distribution) k-way query sets.
    #[staticmethod]
    fn sample(seed: u64, schema: &PySchema, k: usize, count_in: usize, count_out: usize) -> PyResult<(Self, Self)> {
        let (a, b) = sample_query_sets(seed, &schema.0, k, count_in, count_out).map_err(err)?;
        Ok((Self(Arc::new(a)), Self(Arc::new(b))))
    }

    #[staticmethod]
    fn from_json(json: &str, schema: &PySchema) -> PyResult<Self> {
        Ok(Self(Arc::new(censusdp::QuerySet::from_json(json, &schema.0).map_err(err)?)))
    }

    fn to_json(&self, schema: &PySchema) -> PyResult<String> {
        self.0.to_json(&schema.0).map_err(err)
    }

    fn predicates(&self) -> Vec<Vec<(usize, u32)>> {
        self.0.queries().iter().map(|q| q.predicates().to_vec()).collect()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyclass(name = "AnswerTable", frozen)]
struct PyAnswerTable(censusdp::AnswerTable);

#[pymethods]
impl PyAnswerTable {
    /// One row per query, one column per region node (breadth-first order).
    fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.0.num_queries()).map(|q| self.0.row(q).to_vec()).collect()
    }

    fn get(&self, query: usize, region_id: &str) -> PyResult<f64> {
        let node = self
            .0
            .tree()
            .node_index(region_id)
            .ok_or_else(|| PyValueError::new_err(format!("unknown region {region_id}")))?;
        if query >= self.0.num_queries() {
            return Err(PyValueError::new_err(format!("query {query} out of range")));
        }
        Ok(self.0.get(query, node))
    }

    fn write_csv(&self, path: &str) -> PyResult<()> {
        self.0.write_csv(File::create(path).map_err(io_err)?).map_err(err)
    }

    fn region_ids(&self) -> Vec<String> {
        (0..self.0.num_nodes()).map(|n| self.0.tree().id(n).to_string()).collect()
    }
}

#[pyfunction]
fn evaluate(population: &PyPopulation, queries: &PyQuerySet) -> PyResult<PyAnswerTable> {
    Ok(PyAnswerTable(censusdp::evaluate(&population.0, &queries.0).map_err(err)?))
}

#[pyfunction]
fn topdown(truth: &PyAnswerTable, epsilon: f64, seed: u64) -> PyResult<PyAnswerTable> {
    let config = TopDownConfig::new(epsilon, seed).map_err(err)?;
    Ok(PyAnswerTable(run_topdown(&truth.0, &config).map_err(err)?))
}

#[pyfunction]
#[pyo3(signature = (table, truth = None))]
fn validate_constraints<'py>(py: Python<'py>, table: &PyAnswerTable, truth: Option<&PyAnswerTable>) -> PyResult<Bound<'py, PyDict>> {
    let report = match truth {
        Some(t) => censusdp::validate_against_truth(&table.0, &t.0).map_err(err)?,
        None => censusdp::validate_constraints(&table.0),
    };
    let d = PyDict::new(py);
    d.set_item("consistency", report.consistency)?;
    d.set_item("validity", report.validity)?;
    d.set_item("faithfulness", report.faithfulness)?;
    d.set_item("root_invariant", report.root_invariant)?;
    Ok(d)
}

fn default_delta(population: &censusdp::Population, delta: Option<f64>) -> f64 {
    delta.unwrap_or(1.0 / (population.len() as f64).powi(2))
}

#[pyfunction]
#[pyo3(signature = (population, epsilon, seed, delta = None))]
fn mst_synthesize(population: &PyPopulation, epsilon: f64, seed: u64, delta: Option<f64>) -> PyResult<PyPopulation> {
    let config = MstConfig { epsilon, delta: default_delta(&population.0, delta), ..MstConfig::default() };
    let release = run_mst(&population.0, &config, &mut censusdp::RandomSource::new(seed)).map_err(err)?;
    Ok(PyPopulation(release.synthetic))
}

#[pyfunction]
#[pyo3(signature = (population, queries, epsilon, seed, delta = None, rounds = 100, learning_rate = 0.1, components = 32))]
#[allow(clippy::too_many_arguments)]
fn hpd_synthesize(
    population: &PyPopulation,
    queries: &PyQuerySet,
    epsilon: f64,
    seed: u64,
    delta: Option<f64>,
    rounds: usize,
    learning_rate: f64,
    components: usize,
) -> PyResult<PyPopulation> {
    let config = HpdConfig {
        epsilon,
        delta: default_delta(&population.0, delta),
        rounds,
        learning_rate,
        components,
        ..HpdConfig::default()
    };
    Ok(PyPopulation(run_hpd(&population.0, &queries.0, &config, seed).map_err(err)?.synthetic))
}

#[pyfunction]
fn absolute_errors<'py>(py: Python<'py>, released: &PyAnswerTable, truth: &PyAnswerTable) -> PyResult<Bound<'py, PyDict>> {
    let dist = censusdp::metrics::absolute_errors(&released.0, &truth.0).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("mean", dist.mean)?;
    d.set_item("median", dist.median)?;
    d.set_item("p90", dist.p90)?;
    d.set_item("p99", dist.p99)?;
    d.set_item("errors", dist.errors)?;
    Ok(d)
}

#[pyfunction]
fn accuracy(released: &PyAnswerTable, truth: &PyAnswerTable) -> PyResult<f64> {
    censusdp::metrics::accuracy(&released.0, &truth.0).map_err(err)
}

#[pyfunction]
fn quality_report<'py>(py: Python<'py>, synthetic: &PyPopulation, truth: &PyPopulation) -> PyResult<Bound<'py, PyDict>> {
    let q = censusdp::metrics::quality_report(&synthetic.0, &truth.0).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("ind", q.ind)?;
    d.set_item("pair", q.pair)?;
    d.set_item("corr", q.corr)?;
    Ok(d)
}

/// Total variation distance between two flat probability vectors.
#[pyfunction]
fn tvd(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    let p = ProbabilityTable::new(vec![p.len()], p).map_err(err)?;
    let q = ProbabilityTable::new(vec![q.len()], q).map_err(err)?;
    censusdp::metrics::tvd(&p, &q).map_err(err)
}

#[pyfunction]
fn cramers_v(table: Vec<Vec<f64>>) -> PyResult<f64> {
    censusdp::metrics::cramers_v(&table).map_err(err)
}

/// Mutual information (nats) between two features; index `len(schema)` is the region.
#[pyfunction]
fn mutual_information(population: &PyPopulation, a: usize, b: usize) -> PyResult<f64> {
    let m = population.0.schema().len();
    let attr = |i: usize| if i == m { Attribute::Region } else { Attribute::Feature(i) };
    mi(&population.0, attr(a), attr(b)).map_err(err)
}

#[pyfunction]
fn project_children(values: Vec<f64>, total: f64) -> Vec<f64> {
    censusdp::simplex::project_children(&values, total)
}

#[pyfunction]
fn round_preserving_sum(values: Vec<f64>, target: u64) -> PyResult<Vec<u64>> {
    censusdp::simplex::round_preserving_sum(&values, target).map_err(err)
}

#[pymodule]
#[pyo3(name = "censusdp")]
fn censusdp_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySchema>()?;
    m.add_class::<PyRegionTree>()?;
    m.add_class::<PyPopulation>()?;
    m.add_class::<PyQuerySet>()?;
    m.add_class::<PyAnswerTable>()?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(topdown, m)?)?;
    m.add_function(wrap_pyfunction!(validate_constraints, m)?)?;
    m.add_function(wrap_pyfunction!(mst_synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(hpd_synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(absolute_errors, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(quality_report, m)?)?;
    m.add_function(wrap_pyfunction!(tvd, m)?)?;
    m.add_function(wrap_pyfunction!(cramers_v, m)?)?;
    m.add_function(wrap_pyfunction!(mutual_information, m)?)?;
    m.add_function(wrap_pyfunction!(project_children, m)?)?;
    m.add_function(wrap_pyfunction!(round_preserving_sum, m)?)?;
    Ok(())
}
