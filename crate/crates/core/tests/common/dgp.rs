//! Small linear data-generating processes for estimator tests.

use incrementality::estimators::DesignMatrices;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// y = 1 + 2x + ε with x, ε independent standard normal.
pub fn exogenous(n: usize, seed: u64) -> DesignMatrices {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DMatrix::zeros(n, 2);
    let mut y = vec![0.0; n];
    for r in 0..n {
        let xr = normal(&mut rng);
        x[(r, 0)] = 1.0;
        x[(r, 1)] = xr;
        y[r] = 1.0 + 2.0 * xr + normal(&mut rng);
    }
    DesignMatrices::exogenous(x, y, vec![1.0; n], vec!["one".into(), "x".into()], Some(0)).unwrap()
}

/// One endogenous regressor x = π z + v, error ε = ρ v + √(1−ρ²) e, and
/// y = 0.5 + β x + ε. Returns the IV design (X = [1, x], Z = [1, z]).
pub struct Endogenous {
    pub design: DesignMatrices,
    pub beta: f64,
    pub pi: f64,
    pub rho: f64,
}

impl Endogenous {
    /// Probability limit of the OLS slope, β + cov(x, ε)/var(x).
    pub fn ols_limit(&self) -> f64 {
        self.beta + self.rho / (self.pi * self.pi + 1.0)
    }

    /// Asymptotic standard error of the 2SLS slope.
    pub fn iv_se(&self) -> f64 {
        1.0 / (self.pi * (self.design.nrows() as f64).sqrt())
    }

    /// Asymptotic standard error of the OLS slope.
    pub fn ols_se(&self) -> f64 {
        let var_x = self.pi * self.pi + 1.0;
        let resid_var = 1.0 - self.rho * self.rho / var_x;
        (resid_var / (var_x * self.design.nrows() as f64)).sqrt()
    }
}

pub fn endogenous(n: usize, rho: f64, pi: f64, seed: u64) -> Endogenous {
    let beta = 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DMatrix::zeros(n, 2);
    let mut z = DMatrix::zeros(n, 2);
    let mut y = vec![0.0; n];
    for r in 0..n {
        let zr = normal(&mut rng);
        let v = normal(&mut rng);
        let e = normal(&mut rng);
        let xr = pi * zr + v;
        let eps = rho * v + (1.0 - rho * rho).sqrt() * e;
        x[(r, 0)] = 1.0;
        x[(r, 1)] = xr;
        z[(r, 0)] = 1.0;
        z[(r, 1)] = zr;
        y[r] = 0.5 + beta * xr + eps;
    }
    let design = DesignMatrices::new(
        x,
        z,
        y,
        vec![1.0; n],
        vec!["one".into(), "x".into()],
        vec!["one".into(), "z".into()],
        Some(0),
    )
    .unwrap();
    Endogenous { design, beta, pi, rho }
}
