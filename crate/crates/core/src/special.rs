//! Special functions needed by the closed-form ad-stock integrals.
//!
//! The real-argument gamma functions come from `statrs`; the regularized
//! upper incomplete gamma function for complex arguments is evaluated here
//! by a power series near the origin and a Legendre continued fraction
//! (modified Lentz) elsewhere.

use num_complex::Complex64;
use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};

const EPS: f64 = 1e-16;
const TINY: f64 = 1e-300;
const MAX_ITER: usize = 20_000;

/// Regularized lower incomplete gamma P(k, x) for real x ≥ 0.
pub fn gamma_p(k: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x.is_infinite() {
        return 1.0;
    }
    gamma_lr(k, x)
}

/// Regularized upper incomplete gamma Q(k, x) = 1 − P(k, x) for real x ≥ 0.
pub fn gamma_q(k: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    gamma_ur(k, x)
}

pub fn ln_gamma_fn(k: f64) -> f64 {
    ln_gamma(k)
}

/// Regularized upper incomplete gamma Q(k, z) = Γ(k, z) / Γ(k) for real
/// k > 0 and complex z with Re z ≥ 0 (principal branch of z^k).
pub fn gamma_q_complex(k: f64, z: Complex64) -> Complex64 {
    debug_assert!(k > 0.0);
    if z.norm() == 0.0 {
        return Complex64::new(1.0, 0.0);
    }
    if z.norm() < k + 1.0 {
        Complex64::new(1.0, 0.0) - lower_series(k, z)
    } else {
        upper_continued_fraction(k, z)
    }
}

/// P(k, z) by the series z^k e^{-z} / Γ(k+1) · Σ z^n / ((k+1)…(k+n)).
fn lower_series(k: f64, z: Complex64) -> Complex64 {
    let mut term = Complex64::new(1.0, 0.0);
    let mut sum = term;
    let mut ap = k;
    for _ in 0..MAX_ITER {
        ap += 1.0;
        term *= z / ap;
        sum += term;
        if term.norm() < sum.norm() * EPS {
            break;
        }
    }
    let log_prefactor = k * z.ln() - z - ln_gamma(k + 1.0);
    log_prefactor.exp() * sum
}

/// Q(k, z) by the continued fraction
/// e^{-z} z^k / Γ(k) · 1/(z+1−k− 1(1−k)/(z+3−k− 2(2−k)/(z+5−k− …))).
fn upper_continued_fraction(k: f64, z: Complex64) -> Complex64 {
    let tiny = Complex64::new(TINY, 0.0);
    let mut b = z + 1.0 - k;
    let mut c = Complex64::new(1.0 / TINY, 0.0);
    let mut d = b.inv();
    let mut h = d;
    for i in 1..MAX_ITER {
        let an = -(i as f64) * (i as f64 - k);
        b += 2.0;
        d = b + d * an;
        if d.norm() < TINY {
            d = tiny;
        }
        c = b + c.inv() * an;
        if c.norm() < TINY {
            c = tiny;
        }
        d = d.inv();
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).norm() < EPS {
            break;
        }
    }
    let log_prefactor = k * z.ln() - z - ln_gamma(k);
    log_prefactor.exp() * h
}
