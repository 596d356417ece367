//! One-sided paired bootstrap.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_RESAMPLES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    /// `mean(a) − mean(b)` on the original items.
    pub observed_delta: f64,
    pub p_value: f64,
    pub n_resamples: usize,
    pub alpha: f64,
    pub significant: bool,
}

/// Tests whether system `a` scores higher than `b` on the same items.
///
/// Each resample draws `len` item indices with replacement (one
/// `random_range(0..len)` per draw from a ChaCha8 stream seeded with
/// `seed`). The p-value is the fraction of resamples whose mean difference
/// is not positive.
pub fn paired_bootstrap(a: &[f64], b: &[f64], alpha: f64, n: usize, seed: u64) -> Result<BootstrapResult> {
    if a.len() != b.len() {
        return Err(Error::Argument(format!("score sequences have lengths {} and {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::Argument("at least two paired items are required".into()));
    }
    if n < 1000 {
        return Err(Error::Argument(format!("{n} resamples; at least 1000 are required")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Argument(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Argument("scores must be finite".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let m = d.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut not_better = 0usize;
    for _ in 0..n {
        let mut s = 0.0;
        for _ in 0..m {
            s += d[rng.random_range(0..m)];
        }
        if s <= 0.0 {
            not_better += 1;
        }
    }
    let p_value = not_better as f64 / n as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(BootstrapResult {
        observed_delta: mean(a) - mean(b),
        p_value,
        n_resamples: n,
        alpha,
        significant: p_value < alpha,
    })
}
