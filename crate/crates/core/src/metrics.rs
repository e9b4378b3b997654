//! Utility metrics: per-cell absolute errors, exact-match accuracy, and the
//! Ind / Pair / Corr synthetic data quality scores.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::population::{Attribute, Population};
use crate::query::{attribute_table, AnswerTable, ProbabilityTable};

/// Number of points in every reported CDF grid.
pub const CDF_GRID_POINTS: usize = 512;

/// Empirical CDF sampled on an evenly spaced grid from the smallest to the
/// largest observed value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmpiricalCdf {
    pub points: Vec<(f64, f64)>,
}

impl EmpiricalCdf {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Validation("cannot build a CDF from no values".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let lo = sorted[0];
        let hi = sorted[sorted.len() - 1];
        let n = sorted.len() as f64;
        let points = (0..CDF_GRID_POINTS)
            .map(|i| {
                let x = if i + 1 == CDF_GRID_POINTS {
                    hi
                } else {
                    lo + (hi - lo) * i as f64 / (CDF_GRID_POINTS - 1) as f64
                };
                let below = sorted.partition_point(|&v| v <= x);
                (x, below as f64 / n)
            })
            .collect();
        Ok(Self { points })
    }

    /// CSV with columns `error_value, cumulative_fraction`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["error_value", "cumulative_fraction"])?;
        for (x, f) in &self.points {
            wtr.write_record([x.to_string(), f.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Smallest sample `x` with `F(x) >= p` (inverse of the empirical CDF).
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorDistribution {
    /// Row-major by (query, region node).
    pub errors: Vec<f64>,
    pub mean: f64,
    pub median: f64,
    pub p90: f64,
    pub p99: f64,
    pub cdf: EmpiricalCdf,
}

impl ErrorDistribution {
    pub fn from_errors(errors: Vec<f64>) -> Result<Self> {
        if errors.iter().any(|e| !(*e >= 0.0)) {
            return Err(Error::Validation("absolute errors must be non-negative".into()));
        }
        let cdf = EmpiricalCdf::from_values(&errors)?;
        let mut sorted = errors.clone();
        sorted.sort_by(f64::total_cmp);
        Ok(Self {
            mean: pairwise_sum(&errors) / errors.len() as f64,
            median: quantile(&sorted, 0.5),
            p90: quantile(&sorted, 0.9),
            p99: quantile(&sorted, 0.99),
            errors,
            cdf,
        })
    }
}

/// Pairwise (cascade) summation; result depends only on input order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 16 {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

pub fn absolute_errors(released: &AnswerTable, truth: &AnswerTable) -> Result<ErrorDistribution> {
    released.ensure_same_shape(truth)?;
    let errors = released
        .values()
        .iter()
        .zip(truth.values())
        .map(|(r, t)| (r - t).abs())
        .collect();
    ErrorDistribution::from_errors(errors)
}

/// `|a - truth| - |b - truth|` per cell; positive where `a` is worse.
pub fn error_difference(a: &AnswerTable, b: &AnswerTable, truth: &AnswerTable) -> Result<Vec<f64>> {
    a.ensure_same_shape(truth)?;
    b.ensure_same_shape(truth)?;
    Ok(a
        .values()
        .iter()
        .zip(b.values())
        .zip(truth.values())
        .map(|((x, y), t)| (x - t).abs() - (y - t).abs())
        .collect())
}

/// Fraction of (query, region node) cells answered exactly.
pub fn accuracy(released: &AnswerTable, truth: &AnswerTable) -> Result<f64> {
    released.ensure_same_shape(truth)?;
    let cells = released.values().len();
    if cells == 0 {
        return Err(Error::Validation("accuracy of an empty table is undefined".into()));
    }
    let hits = released
        .values()
        .iter()
        .zip(truth.values())
        .filter(|(r, t)| r == t)
        .count();
    Ok(hits as f64 / cells as f64)
}

const NORMALIZATION_TOLERANCE: f64 = 1e-6;

/// Total variation distance `0.5 * sum |p - q|`.
pub fn tvd(p: &ProbabilityTable, q: &ProbabilityTable) -> Result<f64> {
    if p.dims != q.dims || p.values.len() != q.values.len() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", p.dims, q.dims)));
    }
    for t in [p, q] {
        if (t.total() - 1.0).abs() > NORMALIZATION_TOLERANCE || t.values.iter().any(|v| *v < 0.0) {
            return Err(Error::Validation(format!(
                "table is not a probability distribution (total {})",
                t.total()
            )));
        }
    }
    let diffs: Vec<f64> = p.values.iter().zip(&q.values).map(|(a, b)| (a - b).abs()).collect();
    Ok(0.5 * pairwise_sum(&diffs))
}

/// Cramer's V of a two-way count table, without bias correction. Rows and
/// columns with zero margin are dropped first.
pub fn cramers_v(table: &[Vec<f64>]) -> Result<f64> {
    let cols = table.first().map_or(0, |r| r.len());
    if table.is_empty() || cols == 0 || table.iter().any(|r| r.len() != cols) {
        return Err(Error::ShapeMismatch("contingency table must be a non-empty rectangle".into()));
    }
    let row_sums: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<f64> = (0..cols).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let total: f64 = row_sums.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Validation("contingency table has zero total count".into()));
    }
    let rows_kept: Vec<usize> = (0..table.len()).filter(|&i| row_sums[i] > 0.0).collect();
    let cols_kept: Vec<usize> = (0..cols).filter(|&j| col_sums[j] > 0.0).collect();
    let min_dim = rows_kept.len().min(cols_kept.len());
    if min_dim < 2 {
        return Ok(0.0);
    }
    let mut chi2 = 0.0;
    for &i in &rows_kept {
        for &j in &cols_kept {
            let expected = row_sums[i] * col_sums[j] / total;
            chi2 += (table[i][j] - expected).powi(2) / expected;
        }
    }
    Ok((chi2 / (total * (min_dim - 1) as f64)).sqrt().min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationLevel {
    Low,
    Weak,
    Middle,
    Strong,
}

impl CorrelationLevel {
    /// Buckets `[0, .1)`, `[.1, .3)`, `[.3, .5)`, `[.5, 1]`.
    pub fn of(v: f64) -> Self {
        if v < 0.1 {
            CorrelationLevel::Low
        } else if v < 0.3 {
            CorrelationLevel::Weak
        } else if v < 0.5 {
            CorrelationLevel::Middle
        } else {
            CorrelationLevel::Strong
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QualityReport {
    pub ind: f64,
    pub pair: f64,
    pub corr: f64,
}

fn to_rows(flat: &[f64], rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|i| flat[i * cols..(i + 1) * cols].to_vec()).collect()
}

pub fn pair_cramers_v(population: &Population, a: usize, b: usize) -> Result<f64> {
    let counts = population.joint_counts(&[Attribute::Feature(a), Attribute::Feature(b)])?;
    let schema = population.schema();
    cramers_v(&to_rows(&counts, schema.domain_size(a), schema.domain_size(b)))
}

/// Ind / Pair / Corr scores of a synthetic population against the original.
/// With a single feature there are no pairs; Pair is then 0 and Corr 1.
pub fn quality_report(synthetic: &Population, truth: &Population) -> Result<QualityReport> {
    if synthetic.schema() != truth.schema() {
        return Err(Error::Schema("synthetic and true populations have different schemas".into()));
    }
    let m = truth.schema().len();
    let one_way = |pop: &Population, f: usize| attribute_table(pop, &[Attribute::Feature(f)]);
    let mut ind = Vec::with_capacity(m);
    for f in 0..m {
        ind.push(tvd(&one_way(synthetic, f)?, &one_way(truth, f)?)?);
    }
    let mut pair = Vec::new();
    let mut matching = 0usize;
    for a in 0..m {
        for b in a + 1..m {
            let attrs = [Attribute::Feature(a), Attribute::Feature(b)];
            pair.push(tvd(&attribute_table(synthetic, &attrs)?, &attribute_table(truth, &attrs)?)?);
            let same = CorrelationLevel::of(pair_cramers_v(synthetic, a, b)?)
                == CorrelationLevel::of(pair_cramers_v(truth, a, b)?);
            matching += same as usize;
        }
    }
    let pairs = pair.len();
    Ok(QualityReport {
        ind: pairwise_sum(&ind) / m as f64,
        pair: if pairs == 0 { 0.0 } else { pairwise_sum(&pair) / pairs as f64 },
        corr: if pairs == 0 { 1.0 } else { matching as f64 / pairs as f64 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::population::{generate_population, FeatureSchema, RegionTree};
    use crate::query::{MarginalQuery, QuerySet};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn table(values: Vec<f64>) -> AnswerTable {
        let tree = Arc::new(RegionTree::balanced("R", &[values.len() - 1]).unwrap());
        let schema = FeatureSchema::from_domain_sizes(&[2]).unwrap();
        let qs = QuerySet::new(vec![MarginalQuery::new(vec![(0, 0)], &schema).unwrap()]).unwrap();
        AnswerTable::new(Arc::new(qs), tree, values).unwrap()
    }

    #[test]
    fn absolute_error_examples() {
        let t = table(vec![10.0, 5.0, 3.0, 2.0]);
        let same = absolute_errors(&t, &t).unwrap();
        assert!(same.errors.iter().all(|&e| e == 0.0));
        assert_eq!(same.mean, 0.0);
        let r = table(vec![9.0, 6.0, 3.0, 0.0]);
        let d = absolute_errors(&r, &t).unwrap();
        assert_eq!(&d.errors[1..], &[1.0, 0.0, 2.0]);
        assert_eq!(d.errors[0], 1.0);
        assert_eq!(d.median, 1.0);
        assert_eq!(d.cdf.points.len(), CDF_GRID_POINTS);
        assert_eq!(d.cdf.points.last().unwrap().1, 1.0);
    }

    #[test]
    fn difference_sign_convention() {
        let t = table(vec![5.0, 5.0]);
        let a = table(vec![7.0, 7.0]);
        let b = table(vec![5.0, 5.0]);
        assert_eq!(error_difference(&a, &b, &t).unwrap(), vec![2.0, 2.0]);
        assert_eq!(error_difference(&a, &a, &t).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn accuracy_examples() {
        let t = table(vec![10.0, 5.0, 4.0, 2.0]);
        let r = table(vec![10.0, 5.0, 3.0, 2.0]);
        assert_eq!(accuracy(&r, &t).unwrap(), 0.75);
        assert_eq!(accuracy(&t, &t).unwrap(), 1.0);
        let off = table(vec![11.0, 6.0, 5.0, 3.0]);
        assert_eq!(accuracy(&off, &t).unwrap(), 0.0);
        assert!(accuracy(&t, &table(vec![1.0, 1.0])).is_err());
    }

    #[test]
    fn tvd_examples() {
        let p = ProbabilityTable::new(vec![2], vec![0.5, 0.5]).unwrap();
        let q = ProbabilityTable::new(vec![2], vec![1.0, 0.0]).unwrap();
        assert_eq!(tvd(&p, &p).unwrap(), 0.0);
        assert_eq!(tvd(&p, &q).unwrap(), 0.5);
        let bad = ProbabilityTable::new(vec![2], vec![0.5, 0.6]).unwrap();
        assert!(tvd(&p, &bad).is_err());
        let other_shape = ProbabilityTable::new(vec![3], vec![0.5, 0.5, 0.0]).unwrap();
        assert!(tvd(&p, &other_shape).is_err());
    }

    #[test]
    fn cramers_v_examples() {
        assert_eq!(cramers_v(&[vec![5.0, 0.0], vec![0.0, 5.0]]).unwrap(), 1.0);
        assert_eq!(cramers_v(&[vec![3.0, 3.0], vec![3.0, 3.0]]).unwrap(), 0.0);
        assert!(cramers_v(&[vec![0.0, 0.0]]).is_err());
        assert_eq!(CorrelationLevel::of(1.0), CorrelationLevel::Strong);
        assert_eq!(CorrelationLevel::of(0.0), CorrelationLevel::Low);
        assert_eq!(CorrelationLevel::of(0.1), CorrelationLevel::Weak);
        assert_eq!(CorrelationLevel::of(0.3), CorrelationLevel::Middle);
        assert_eq!(CorrelationLevel::of(0.5), CorrelationLevel::Strong);
    }

    #[test]
    fn cramers_v_against_hand_chi_square() {
        // [[10,0],[5,5]]: N=20, row sums 10,10, col sums 15,5
        // expected [[7.5,2.5],[7.5,2.5]]; chi2 = 2*(2.5^2/7.5 + 2.5^2/2.5) = 6.6667
        let chi2 = 2.0 * (6.25 / 7.5 + 6.25 / 2.5);
        let v = cramers_v(&[vec![10.0, 0.0], vec![5.0, 5.0]]).unwrap();
        assert!((v - (chi2 / 20.0f64).sqrt()).abs() < 1e-10);
    }

    #[test]
    fn zero_margins_are_dropped() {
        let with_empty = cramers_v(&[vec![4.0, 0.0, 1.0], vec![0.0, 0.0, 0.0], vec![1.0, 0.0, 4.0]]).unwrap();
        let compact = cramers_v(&[vec![4.0, 1.0], vec![1.0, 4.0]]).unwrap();
        assert!((with_empty - compact).abs() < 1e-15);
    }

    #[test]
    fn quality_identity() {
        let tree = Arc::new(RegionTree::balanced("R", &[3]).unwrap());
        let schema = Arc::new(FeatureSchema::from_domain_sizes(&[2, 3, 4]).unwrap());
        let pop = generate_population(1, 500, schema, tree, 0.6).unwrap();
        let r = quality_report(&pop, &pop).unwrap();
        assert_eq!(r, QualityReport { ind: 0.0, pair: 0.0, corr: 1.0 });
    }

    #[test]
    fn quality_schema_mismatch() {
        let tree = Arc::new(RegionTree::balanced("R", &[3]).unwrap());
        let a = generate_population(1, 50, Arc::new(FeatureSchema::from_domain_sizes(&[2, 3]).unwrap()), tree.clone(), 0.0).unwrap();
        let b = generate_population(1, 50, Arc::new(FeatureSchema::from_domain_sizes(&[2, 4]).unwrap()), tree, 0.0).unwrap();
        assert!(quality_report(&a, &b).is_err());
    }

    fn dist(len: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..1.0, len).prop_filter_map("zero mass", |v| {
            let s: f64 = v.iter().sum();
            (s > 0.0).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn tvd_is_a_metric((p, q, r) in (1usize..12).prop_flat_map(|n| (dist(n), dist(n), dist(n)))) {
            let n = p.len();
            let t = |v: &Vec<f64>| ProbabilityTable::new(vec![n], v.clone()).unwrap();
            let (p, q, r) = (t(&p), t(&q), t(&r));
            let pq = tvd(&p, &q).unwrap();
            prop_assert!(pq >= 0.0 && pq <= 1.0 + 1e-12);
            prop_assert!((pq - tvd(&q, &p).unwrap()).abs() < 1e-15);
            prop_assert!(tvd(&p, &r).unwrap() <= pq + tvd(&q, &r).unwrap() + 1e-12);
        }

        #[test]
        fn cramers_v_bounded_and_transpose_invariant(
            (rows, cols, cells) in (1usize..5, 1usize..5).prop_flat_map(|(r, c)| {
                (Just(r), Just(c), proptest::collection::vec(0u32..20, r * c))
            })
        ) {
            let t: Vec<Vec<f64>> = (0..rows).map(|i| (0..cols).map(|j| cells[i * cols + j] as f64).collect()).collect();
            let tt: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| t[i][j]).collect()).collect();
            if cells.iter().any(|&c| c > 0) {
                let v = cramers_v(&t).unwrap();
                prop_assert!((0.0..=1.0).contains(&v));
                prop_assert!((v - cramers_v(&tt).unwrap()).abs() < 1e-12);
            }
        }

        #[test]
        fn accuracy_and_errors_are_permutation_equivariant(
            cells in proptest::collection::vec((0u32..5, 0u32..5), 2..30),
            seed in 0u64..1000,
        ) {
            use rand::seq::SliceRandom;
            let released: Vec<f64> = cells.iter().map(|c| c.0 as f64).collect();
            let truth: Vec<f64> = cells.iter().map(|c| c.1 as f64).collect();
            let mut perm: Vec<usize> = (0..cells.len()).collect();
            perm.shuffle(&mut crate::dp::RandomSource::new(seed));
            let pr: Vec<f64> = perm.iter().map(|&i| released[i]).collect();
            let pt: Vec<f64> = perm.iter().map(|&i| truth[i]).collect();
            let a = accuracy(&table(released.clone()), &table(truth.clone())).unwrap();
            let b = accuracy(&table(pr.clone()), &table(pt.clone())).unwrap();
            prop_assert_eq!(a, b);
            let ea = absolute_errors(&table(released), &table(truth)).unwrap();
            let eb = absolute_errors(&table(pr), &table(pt)).unwrap();
            let permuted: Vec<f64> = perm.iter().map(|&i| ea.errors[i]).collect();
            prop_assert_eq!(permuted, eb.errors);
            prop_assert!((ea.mean - eb.mean).abs() < 1e-12);
        }
    }
}
