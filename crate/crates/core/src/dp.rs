//! Differential privacy primitives shared by every release algorithm.
//!
//! All samplers draw from a [`RandomSource`], a seeded ChaCha stream. Given the
//! same parameters and stream state, every sampler returns the same value, which
//! is what makes whole experiment runs reproducible.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};

/// Relative slack allowed on the ledger so that splits like `eps / L` summed
/// `L` times do not trip the overdraft check through rounding.
pub const LEDGER_SLACK: f64 = 1e-12;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes a base seed with a path of tags into a new 64-bit seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

/// Seeded randomness. Sub-streams derived with [`RandomSource::substream`] are
/// independent of each other and of the parent stream's position.
#[derive(Debug, Clone)]
pub struct RandomSource {
    seed: u64,
    rng: ChaCha20Rng,
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn substream(&self, tags: &[u64]) -> RandomSource {
        RandomSource::new(derive_seed(self.seed, tags))
    }

    /// Uniform draw in (0, 1].
    fn open_unit(&mut self) -> f64 {
        1.0 - self.rng.random::<f64>()
    }
}

impl RngCore for RandomSource {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Probability mass of the two-sided geometric distribution with scale `b` at `k`.
pub fn double_geometric_pmf(scale: f64, k: i64) -> f64 {
    let alpha = (-1.0 / scale).exp();
    (1.0 - alpha) / (1.0 + alpha) * alpha.powf(k.unsigned_abs() as f64)
}

/// Draws integer noise `k` with `P(k) ∝ exp(-|k| / scale)`.
///
/// Sampled as the difference of two geometric variables (failures before the
/// first success, success probability `1 - exp(-1/scale)`), each by inversion.
pub fn double_geometric(scale: f64, rng: &mut RandomSource) -> Result<i64> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::invalid(format!(
            "double-geometric scale must be positive and finite, got {scale}"
        )));
    }
    // floor(ln U / ln alpha) with ln alpha = -1/scale
    let mut geometric = || (-scale * rng.open_unit().ln()).floor() as i64;
    let a = geometric();
    let b = geometric();
    Ok(a - b)
}

/// Standard deviation of the classic Gaussian mechanism.
pub fn gaussian_sigma(sensitivity: f64, epsilon: f64, delta: f64) -> Result<f64> {
    if !(sensitivity > 0.0) {
        return Err(Error::invalid(format!(
            "sensitivity must be positive, got {sensitivity}"
        )));
    }
    if !(epsilon > 0.0) {
        return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok(sensitivity * (2.0 * (1.25 / delta).ln()).sqrt() / epsilon)
}

pub fn gaussian_noise(
    sensitivity: f64,
    epsilon: f64,
    delta: f64,
    rng: &mut RandomSource,
) -> Result<f64> {
    let sigma = gaussian_sigma(sensitivity, epsilon, delta)?;
    let z: f64 = StandardNormal.sample(rng);
    Ok(sigma * z)
}

/// Selection probabilities of the exponential mechanism, `∝ exp(eps * s / (2 * sensitivity))`.
pub fn exponential_mechanism_probabilities(
    scores: &[f64],
    sensitivity: f64,
    epsilon: f64,
) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::invalid("exponential mechanism needs at least one candidate"));
    }
    if !(sensitivity > 0.0) {
        return Err(Error::invalid(format!(
            "sensitivity must be positive, got {sensitivity}"
        )));
    }
    if !(epsilon > 0.0) {
        return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("exponential mechanism scores must be finite"));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let factor = epsilon / (2.0 * sensitivity);
    let mut weights: Vec<f64> = scores.iter().map(|s| (factor * (s - max)).exp()).collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok(weights)
}

/// Returns the index of the selected candidate.
pub fn exponential_mechanism(
    scores: &[f64],
    sensitivity: f64,
    epsilon: f64,
    rng: &mut RandomSource,
) -> Result<usize> {
    let probs = exponential_mechanism_probabilities(scores, sensitivity, epsilon)?;
    Ok(sample_index(&probs, rng))
}

/// Inverse-CDF draw from a normalized weight vector.
pub(crate) fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_positive
}

/// Sequential-composition ledger for an (epsilon, delta) budget.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrivacyBudget {
    epsilon: f64,
    delta: f64,
    spent_epsilon: f64,
    spent_delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
        }
        if !(0.0..1.0).contains(&delta) {
            return Err(Error::invalid(format!("delta must lie in [0, 1), got {delta}")));
        }
        Ok(Self {
            epsilon,
            delta,
            spent_epsilon: 0.0,
            spent_delta: 0.0,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn spent_epsilon(&self) -> f64 {
        self.spent_epsilon
    }

    pub fn spent_delta(&self) -> f64 {
        self.spent_delta
    }

    pub fn remaining_epsilon(&self) -> f64 {
        (self.epsilon - self.spent_epsilon).max(0.0)
    }

    pub fn remaining_delta(&self) -> f64 {
        (self.delta - self.spent_delta).max(0.0)
    }

    /// Charges a cost against the ledger. The ledger is left untouched on error.
    pub fn spend(&mut self, epsilon: f64, delta: f64) -> Result<()> {
        if !(epsilon >= 0.0) || !(delta >= 0.0) {
            return Err(Error::invalid(format!(
                "privacy costs must be non-negative, got (eps={epsilon}, delta={delta})"
            )));
        }
        let next_epsilon = self.spent_epsilon + epsilon;
        let next_delta = self.spent_delta + delta;
        if next_epsilon > self.epsilon * (1.0 + LEDGER_SLACK)
            || next_delta > self.delta * (1.0 + LEDGER_SLACK)
        {
            return Err(Error::BudgetExceeded {
                requested_epsilon: epsilon,
                requested_delta: delta,
                remaining_epsilon: self.remaining_epsilon(),
                remaining_delta: self.remaining_delta(),
            });
        }
        self.spent_epsilon = next_epsilon;
        self.spent_delta = next_delta;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pmf_at_zero_for_scale_four() {
        // Normalization oracle: sum alpha^|k| over |k| <= 200.
        let alpha: f64 = (-0.25f64).exp();
        let z: f64 = (-200i64..=200).map(|k| alpha.powi(k.abs() as i32)).sum();
        assert!((1.0 / z - 0.1243).abs() < 1e-4);
        assert!((double_geometric_pmf(4.0, 0) - 1.0 / z).abs() < 1e-12);
    }

    #[test]
    fn double_geometric_rejects_bad_scale() {
        let mut rng = RandomSource::new(0);
        assert!(double_geometric(0.0, &mut rng).is_err());
        assert!(double_geometric(-1.0, &mut rng).is_err());
        assert!(double_geometric(f64::NAN, &mut rng).is_err());
    }

    #[test]
    fn double_geometric_is_centered() {
        let mut rng = RandomSource::new(11);
        let n = 1_000_000;
        let sum: i64 = (0..n).map(|_| double_geometric(4.0, &mut rng).unwrap()).sum();
        assert!((sum as f64 / n as f64).abs() <= 0.05);
    }

    #[test]
    fn double_geometric_tiny_scale_is_zero() {
        let mut rng = RandomSource::new(5);
        for _ in 0..10_000 {
            assert_eq!(double_geometric(4e-6, &mut rng).unwrap(), 0);
        }
    }

    #[test]
    fn double_geometric_symmetry() {
        let mut rng = RandomSource::new(3);
        let n = 1_000_000usize;
        let mut counts = std::collections::HashMap::<i64, usize>::new();
        for _ in 0..n {
            *counts.entry(double_geometric(4.0, &mut rng).unwrap()).or_default() += 1;
        }
        for k in 1..=5i64 {
            let p = double_geometric_pmf(4.0, k);
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            let pos = *counts.get(&k).unwrap_or(&0) as f64;
            let neg = *counts.get(&-k).unwrap_or(&0) as f64;
            // difference of two near-independent binomials
            assert!((pos - neg).abs() <= 3.0 * sigma * 2f64.sqrt(), "k={k}: {pos} vs {neg}");
        }
    }

    #[test]
    fn gaussian_sigma_reference_value() {
        let sigma = gaussian_sigma(1.0, 1.0, 1e-6).unwrap();
        assert!((sigma - (2.0 * (1.25e6f64).ln()).sqrt()).abs() < 1e-12);
        assert!((sigma - 5.2989).abs() < 1e-4);
        let doubled = gaussian_sigma(2.0, 1.0, 1e-6).unwrap();
        assert!((doubled - 2.0 * sigma).abs() < 1e-12);
    }

    #[test]
    fn gaussian_rejects_bad_parameters() {
        let mut rng = RandomSource::new(0);
        assert!(gaussian_noise(1.0, 0.0, 1e-6, &mut rng).is_err());
        assert!(gaussian_noise(1.0, 1.0, 0.0, &mut rng).is_err());
        assert!(gaussian_noise(1.0, 1.0, 1.0, &mut rng).is_err());
        assert!(gaussian_noise(0.0, 1.0, 0.5, &mut rng).is_err());
    }

    #[test]
    fn gaussian_sample_variance() {
        let mut rng = RandomSource::new(21);
        let n = 1_000_000;
        let sigma = gaussian_sigma(1.0, 1.0, 1e-6).unwrap();
        let draws: Vec<f64> = (0..n)
            .map(|_| gaussian_noise(1.0, 1.0, 1e-6, &mut rng).unwrap())
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var / (sigma * sigma) - 1.0).abs() < 0.02);
    }

    #[test]
    fn exponential_mechanism_equal_scores() {
        let mut rng = RandomSource::new(8);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| exponential_mechanism(&[1.0, 1.0], 1.0, 1.0, &mut rng).unwrap() == 1)
            .count();
        assert!((hits as f64 / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn exponential_mechanism_closed_form_softmax() {
        // eps * s / (2 * sens) = ln 9 gives odds 9:1
        let mut rng = RandomSource::new(9);
        let s = 2.0 * 9f64.ln();
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| exponential_mechanism(&[0.0, s], 1.0, 1.0, &mut rng).unwrap() == 1)
            .count();
        assert!((hits as f64 / n as f64 - 0.9).abs() < 0.01);
    }

    #[test]
    fn exponential_mechanism_argmax_limit() {
        let mut rng = RandomSource::new(10);
        for _ in 0..10_000 {
            assert_eq!(
                exponential_mechanism(&[0.3, 0.9, 0.1, 0.8], 1.0, 1e6, &mut rng).unwrap(),
                1
            );
        }
    }

    #[test]
    fn exponential_mechanism_rejects_empty() {
        let mut rng = RandomSource::new(0);
        assert!(exponential_mechanism(&[], 1.0, 1.0, &mut rng).is_err());
        assert!(exponential_mechanism(&[1.0], 0.0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn ledger_arithmetic() {
        let mut b = PrivacyBudget::new(1.0, 0.0).unwrap();
        b.spend(0.5, 0.0).unwrap();
        b.spend(0.5, 0.0).unwrap();
        let before = b.clone();
        assert!(matches!(b.spend(0.001, 0.0), Err(Error::BudgetExceeded { .. })));
        assert_eq!(b, before);
    }

    #[test]
    fn ledger_zero_spend_is_noop() {
        let mut b = PrivacyBudget::new(1.0, 1e-6).unwrap();
        let before = b.clone();
        b.spend(0.0, 0.0).unwrap();
        assert_eq!(b, before);
    }

    #[test]
    fn ledger_level_split_exhausts_budget() {
        for levels in 1..=6 {
            let eps = 0.3;
            let mut b = PrivacyBudget::new(eps, 0.0).unwrap();
            for _ in 0..levels {
                b.spend(eps / levels as f64, 0.0).unwrap();
            }
            assert!(b.remaining_epsilon() < 1e-12);
            assert!(b.spend(1e-9, 0.0).is_err());
        }
    }

    #[test]
    fn ledger_rejects_negative_cost() {
        let mut b = PrivacyBudget::new(1.0, 0.1).unwrap();
        assert!(b.spend(-0.1, 0.0).is_err());
        assert!(b.spend(0.0, -0.1).is_err());
    }

    #[test]
    fn substreams_are_reproducible_and_distinct() {
        let root = RandomSource::new(42);
        let mut a = root.substream(&[1, 2]);
        let mut b = root.substream(&[1, 2]);
        let mut c = root.substream(&[2, 1]);
        let xa: Vec<u64> = (0..4).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..4).map(|_| b.next_u64()).collect();
        let xc: Vec<u64> = (0..4).map(|_| c.next_u64()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn ledger_never_overdraws(
                eps in 0.01f64..5.0,
                delta in 0.0f64..0.1,
                spends in proptest::collection::vec((0.0f64..1.0, 0.0f64..0.05), 0..40),
            ) {
                let mut b = PrivacyBudget::new(eps, delta).unwrap();
                for (e, d) in spends {
                    let _ = b.spend(e, d);
                    prop_assert!(b.spent_epsilon() <= eps * (1.0 + LEDGER_SLACK));
                    prop_assert!(b.spent_delta() <= delta * (1.0 + LEDGER_SLACK));
                }
            }

            #[test]
            fn softmax_is_normalized(scores in proptest::collection::vec(-50.0f64..50.0, 1..10), eps in 0.01f64..100.0) {
                let p = exponential_mechanism_probabilities(&scores, 1.0, eps).unwrap();
                let total: f64 = p.iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
                prop_assert!(p.iter().all(|&x| x >= 0.0));
            }
        }
    }
}
