use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::design::DesignMatrices;
use crate::error::{Error, Result};

/// Per-group weights with mean 1 and variance m²: Gamma(1/m², m²). With
/// m = 1 these are the unit exponentials of the plain Bayesian bootstrap.
pub fn group_weights(n_groups: usize, multiplier: f64, seed: u64, draw: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(draw + 1);
    let m2 = multiplier * multiplier;
    let gamma = Gamma::new(1.0 / m2, m2).expect("positive shape and scale");
    (0..n_groups).map(|_| gamma.sample(&mut rng)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub draws: Vec<Vec<f64>>,
    pub level: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Refits `fit` on `n_draws` Bayesian-bootstrap reweightings of `design`.
/// All rows of a group share one weight. Draw `i` depends only on
/// (`seed`, `i`), so results do not depend on scheduling.
pub fn bayesian_bootstrap<F>(
    design: &DesignMatrices,
    n_draws: usize,
    multiplier: f64,
    seed: u64,
    level: f64,
    fit: F,
) -> Result<BootstrapResult>
where
    F: Fn(&DesignMatrices) -> Result<Vec<f64>> + Sync,
{
    if n_draws < 2 {
        return Err(Error::config(format!("bootstrap needs at least 2 draws, got {n_draws}")));
    }
    if !(multiplier >= 1.0 && multiplier.is_finite()) {
        return Err(Error::config(format!("variance multiplier must be at least 1, got {multiplier}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::config(format!("confidence level must lie in (0, 1), got {level}")));
    }
    let draws: Vec<Vec<f64>> = (0..n_draws as u64)
        .into_par_iter()
        .map(|i| {
            let g = group_weights(design.n_groups, multiplier, seed, i);
            let factors: Vec<f64> = design.groups.iter().map(|&k| g[k]).collect();
            fit(&design.reweighted(&factors))
        })
        .collect::<Result<_>>()?;
    let (lower, upper) = intervals(&draws, level);
    Ok(BootstrapResult { draws, level, lower, upper })
}

/// Equal-tailed intervals from the draws, per coefficient.
pub fn intervals(draws: &[Vec<f64>], level: f64) -> (Vec<f64>, Vec<f64>) {
    let p = draws.first().map_or(0, Vec::len);
    let alpha = 0.5 * (1.0 - level);
    let mut lower = Vec::with_capacity(p);
    let mut upper = Vec::with_capacity(p);
    for j in 0..p {
        let mut col: Vec<f64> = draws.iter().map(|d| d[j]).collect();
        col.sort_by(f64::total_cmp);
        lower.push(quantile(&col, alpha));
        upper.push(quantile(&col, 1.0 - alpha));
    }
    (lower, upper)
}

/// Quantile of sorted data at plotting position p(n + 1), interpolating
/// linearly and clamping to the sample range.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = p * (n as f64 + 1.0);
    if h <= 1.0 {
        return sorted[0];
    }
    if h >= n as f64 {
        return sorted[n - 1];
    }
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    sorted[lo - 1] + frac * (sorted[lo] - sorted[lo - 1])
}
