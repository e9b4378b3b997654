//! Independent brute-force oracles. Nothing here calls the library's own
//! implementation of the quantity being checked.
#![allow(dead_code)]

use censusdp::population::Attribute;
use censusdp::{Population, QuerySet, RegionTree};

/// Maximum spanning tree by Kruskal over a dense symmetric weight matrix.
/// Returns edges as sorted `(min, max)` pairs.
pub fn kruskal_max_spanning_tree(n: usize, weight: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    let mut edges: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            edges.push((weight(i, j), i, j));
        }
    }
    edges.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut comp: Vec<usize> = (0..n).collect();
    let mut tree = Vec::new();
    for (_, i, j) in edges {
        let (ci, cj) = (comp[i], comp[j]);
        if ci != cj {
            for c in comp.iter_mut() {
                if *c == cj {
                    *c = ci;
                }
            }
            tree.push((i, j));
        }
    }
    tree.sort();
    tree
}

/// Euclidean projection onto `{x >= 0, sum x = total}` by enumerating every
/// active set: on the support `S`, `x_i = y_i + lambda` with one shared shift.
pub fn qp_projection_oracle(y: &[f64], total: f64) -> Vec<f64> {
    let n = y.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << n) {
        let support: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let lambda = (total - support.iter().map(|&i| y[i]).sum::<f64>()) / support.len() as f64;
        let mut x = vec![0.0; n];
        let mut feasible = true;
        for &i in &support {
            x[i] = y[i] + lambda;
            if x[i] < -1e-12 {
                feasible = false;
            }
        }
        if !feasible {
            continue;
        }
        for v in x.iter_mut() {
            *v = v.max(0.0);
        }
        let obj: f64 = x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum();
        if best.as_ref().map_or(true, |(o, _)| obj < *o) {
            best = Some((obj, x));
        }
    }
    best.expect("some active set is feasible").1
}

/// Smallest squared L2 distance from `y` to a non-negative integer vector
/// summing to `target`, by exhaustive enumeration.
pub fn best_integer_distance(y: &[f64], target: u64) -> f64 {
    fn rec(y: &[f64], left: u64, acc: f64, best: &mut f64) {
        if y.len() == 1 {
            let d = acc + (left as f64 - y[0]).powi(2);
            if d < *best {
                *best = d;
            }
            return;
        }
        for v in 0..=left {
            rec(&y[1..], left - v, acc + (v as f64 - y[0]).powi(2), best);
        }
    }
    let mut best = f64::INFINITY;
    rec(y, target, 0.0, &mut best);
    best
}

pub fn tvd_oracle(p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        s += (p[i] - q[i]).abs();
    }
    s / 2.0
}

/// Pearson chi-square over the non-empty rows and columns, then Cramer's V.
pub fn cramers_v_oracle(table: &[Vec<f64>]) -> f64 {
    let rows: Vec<&Vec<f64>> = table.iter().filter(|r| r.iter().sum::<f64>() > 0.0).collect();
    let cols: Vec<usize> = (0..table[0].len())
        .filter(|&j| table.iter().map(|r| r[j]).sum::<f64>() > 0.0)
        .collect();
    let k = rows.len().min(cols.len());
    if k < 2 {
        return 0.0;
    }
    let mut n = 0.0;
    for r in &rows {
        for &j in &cols {
            n += r[j];
        }
    }
    let mut chi2 = 0.0;
    for r in &rows {
        let rs: f64 = cols.iter().map(|&j| r[j]).sum();
        for &j in &cols {
            let cs: f64 = rows.iter().map(|r2| r2[j]).sum();
            let e = rs * cs / n;
            chi2 += (r[j] - e) * (r[j] - e) / e;
        }
    }
    (chi2 / (n * (k - 1) as f64)).sqrt()
}

/// Double loop over a count table given as nested rows.
pub fn mutual_information_oracle(table: &[Vec<f64>]) -> f64 {
    let n: f64 = table.iter().flatten().sum();
    let mut mi = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let pi: f64 = table[i].iter().sum::<f64>() / n;
            let pj: f64 = table.iter().map(|r| r[j]).sum::<f64>() / n;
            let pij = c / n;
            mi += pij * (pij / (pi * pj)).ln();
        }
    }
    mi
}

fn bucket(v: f64) -> u8 {
    match v {
        v if v < 0.1 => 0,
        v if v < 0.3 => 1,
        v if v < 0.5 => 2,
        _ => 3,
    }
}

/// Frequencies of `(a, b)` pairs by a record scan.
fn pair_counts(pop: &Population, a: usize, b: usize) -> Vec<Vec<f64>> {
    let da = pop.schema().domain_size(a);
    let db = pop.schema().domain_size(b);
    let mut t = vec![vec![0.0; db]; da];
    for i in 0..pop.len() {
        let r = pop.row(i);
        t[r[a] as usize][r[b] as usize] += 1.0;
    }
    t
}

/// Ind / Pair / Corr recomputed from record scans.
pub fn quality_oracle(synth: &Population, truth: &Population) -> (f64, f64, f64) {
    let m = truth.schema().len();
    let mut ind = 0.0;
    for f in 0..m {
        let d = truth.schema().domain_size(f);
        let mut p = vec![0.0; d];
        let mut q = vec![0.0; d];
        for i in 0..synth.len() {
            p[synth.row(i)[f] as usize] += 1.0 / synth.len() as f64;
        }
        for i in 0..truth.len() {
            q[truth.row(i)[f] as usize] += 1.0 / truth.len() as f64;
        }
        ind += tvd_oracle(&p, &q);
    }
    ind /= m as f64;
    let (mut pair, mut same, mut pairs) = (0.0, 0, 0);
    for a in 0..m {
        for b in a + 1..m {
            let ts = pair_counts(synth, a, b);
            let tt = pair_counts(truth, a, b);
            let norm = |t: &Vec<Vec<f64>>, n: usize| -> Vec<f64> { t.iter().flatten().map(|c| c / n as f64).collect() };
            pair += tvd_oracle(&norm(&ts, synth.len()), &norm(&tt, truth.len()));
            same += (bucket(cramers_v_oracle(&ts)) == bucket(cramers_v_oracle(&tt))) as usize;
            pairs += 1;
        }
    }
    if pairs == 0 {
        (ind, 0.0, 1.0)
    } else {
        (ind, pair / pairs as f64, same as f64 / pairs as f64)
    }
}

/// Answers every query at every node by scanning all records and walking each
/// record's leaf up the parent links.
pub fn naive_answers(pop: &Population, queries: &QuerySet) -> Vec<f64> {
    let tree: &RegionTree = pop.tree();
    let mut out = vec![0.0; queries.len() * tree.len()];
    for (q, query) in queries.queries().iter().enumerate() {
        for i in 0..pop.len() {
            let row = pop.row(i);
            if !query.predicates().iter().all(|&(f, v)| row[f] == v) {
                continue;
            }
            let mut node = Some(pop.region_node(i));
            while let Some(n) = node {
                out[q * tree.len() + n] += 1.0;
                node = tree.parent(n);
            }
        }
    }
    out
}

/// Empirical distribution of a pair of attributes, parent-major.
pub fn empirical_pair(pop: &Population, a: Attribute, b: Attribute) -> Vec<f64> {
    let da = pop.attribute_domain(a);
    let db = pop.attribute_domain(b);
    let mut t = vec![0.0; da * db];
    for i in 0..pop.len() {
        t[pop.attribute_value(i, a) * db + pop.attribute_value(i, b)] += 1.0 / pop.len() as f64;
    }
    t
}

/// Exact joint of consecutive planted-chain features `(m - 1, m)`.
pub fn planted_pair_joint(domains: &[usize], m: usize, correlation: f64) -> Vec<Vec<f64>> {
    let mut marginal = vec![1.0 / domains[0] as f64; domains[0]];
    let transition = |prev: &[f64], d: usize| -> Vec<Vec<f64>> {
        prev.iter()
            .enumerate()
            .map(|(u, &pu)| {
                (0..d)
                    .map(|v| pu * (correlation * ((u % d == v) as u8 as f64) + (1.0 - correlation) / d as f64))
                    .collect()
            })
            .collect()
    };
    for f in 1..m {
        let joint = transition(&marginal, domains[f]);
        marginal = (0..domains[f]).map(|v| joint.iter().map(|r| r[v]).sum()).collect();
    }
    transition(&marginal, domains[m])
}

pub fn lcg(state: &mut u64) -> f64 {
    *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (*state >> 11) as f64 / (1u64 << 53) as f64
}
