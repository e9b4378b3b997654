//! Euclidean projections onto scaled simplices and sum-preserving rounding.

use crate::error::{Error, Result};

/// L2 projection of `values` onto `{x >= 0, sum(x) = total}`.
///
/// Shift-and-clamp iteration: shift the active coordinates by a common constant
/// so they sum to `total`, drop any that went negative (fixing them at zero),
/// and repeat. Each pass removes at least one coordinate or terminates, and the
/// fixed point satisfies the KKT conditions of the projection.
pub fn project_children(values: &[f64], total: f64) -> Vec<f64> {
    let n = values.len();
    if n == 0 {
        return Vec::new();
    }
    let total = total.max(0.0);
    let mut active = vec![true; n];
    let mut out = vec![0.0; n];
    let mut n_active = n;
    loop {
        let sum: f64 = values
            .iter()
            .zip(&active)
            .filter(|(_, &a)| a)
            .map(|(v, _)| *v)
            .sum();
        let shift = (total - sum) / n_active as f64;
        let mut dropped = false;
        for i in 0..n {
            if active[i] {
                out[i] = values[i] + shift;
                if out[i] < 0.0 {
                    active[i] = false;
                    out[i] = 0.0;
                    n_active -= 1;
                    dropped = true;
                }
            }
        }
        if !dropped {
            return out;
        }
        if n_active == 0 {
            // only reachable for total == 0
            return vec![0.0; n];
        }
    }
}

/// Sort-and-threshold projection onto `{x >= 0, sum(x) = total}`.
pub fn project_to_simplex(values: &[f64], total: f64) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (j, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let t = (cumulative - total) / (j + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        }
    }
    values.iter().map(|&v| (v - theta).max(0.0)).collect()
}

/// Largest-remainder rounding: floor every value, then hand the missing units
/// to the largest fractional parts, lower index first on ties.
pub fn round_preserving_sum(values: &[f64], target: u64) -> Result<Vec<u64>> {
    if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::invalid("rounding input must be finite and non-negative"));
    }
    let floors: Vec<u64> = values.iter().map(|v| v.floor() as u64).collect();
    let floor_sum: u64 = floors.iter().sum();
    if floor_sum > target || target - floor_sum > values.len() as u64 {
        return Err(Error::invalid(format!(
            "cannot round {} values with floor sum {floor_sum} to target {target}",
            values.len()
        )));
    }
    let missing = (target - floor_sum) as usize;
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = values[a] - values[a].floor();
        let fb = values[b] - values[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut out = floors;
    for &i in order.iter().take(missing) {
        out[i] += 1;
    }
    Ok(out)
}
