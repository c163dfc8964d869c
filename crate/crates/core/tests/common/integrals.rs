//! Randomized comparison of every closed-form kernel integral against
//! adaptive quadrature of the defining integrand.

use std::f64::consts::PI;

use incrementality::kernels::{
    density_and_cdf, fourier_exponential_delta, fourier_exponential_residual, gamma_fourier_delta,
    gamma_fourier_residual, retarget_product_delta, FourierSpec, KernelSpec,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::quadrature::{integrate, oscillation_breaks};

/// Lanczos approximation (g = 7, n = 9), independent of the library's.
pub fn ln_gamma(x: f64) -> f64 {
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

pub fn exp_density(tau: f64, truncation: Option<f64>, u: f64) -> f64 {
    if u < 0.0 {
        return 0.0;
    }
    match truncation {
        Some(t) if u >= t => 0.0,
        Some(t) => (-u / tau).exp() / (tau * (1.0 - (-t / tau).exp())),
        None => (-u / tau).exp() / tau,
    }
}

pub fn gamma_density(k: f64, tau: f64, u: f64) -> f64 {
    if u <= 0.0 {
        return if k == 1.0 && u == 0.0 { 1.0 / tau } else { 0.0 };
    }
    ((k - 1.0) * u.ln() - u / tau - ln_gamma(k) - k * tau.ln()).exp()
}

fn trig(period: f64, n: u32, a: u8, t: f64) -> f64 {
    let x = 2.0 * PI * n as f64 * t / period;
    if a == 1 {
        x.sin()
    } else {
        x.cos()
    }
}

/// ∫_lo^hi g(s) with breaks fine enough for the oscillation and the kernel.
pub fn quad(g: impl Fn(f64) -> f64, lo: f64, hi: f64, omega: f64, scale: f64) -> f64 {
    let breaks = oscillation_breaks(lo, hi, omega, scale);
    integrate(g, lo, hi, &breaks, 1e-14)
}

pub fn rel_err(got: f64, want: f64) -> f64 {
    if want == 0.0 {
        return got.abs();
    }
    (got - want).abs() / want.abs()
}

#[derive(Debug, Clone)]
pub struct Check {
    pub label: String,
    pub got: f64,
    pub want: f64,
}

impl Check {
    pub fn rel(&self) -> f64 {
        rel_err(self.got, self.want)
    }
}

/// Runs `draws` randomized parameter draws over all closed forms and
/// returns every comparison performed.
pub fn closed_form_suite(draws: usize, seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let periods: [f64; 3] = [1.0, 7.0, 24.0 * 3600.0];
    let mut out = Vec::new();
    for draw in 0..draws {
        let tau: f64 = rng.random_range(0.1..10.0);
        let k = [1.0, 2.0, 3.0][rng.random_range(0..3)];
        let n: u32 = rng.random_range(0..4);
        let a: u8 = rng.random_range(0..2);
        let period = periods[rng.random_range(0..3)];
        let t_j: f64 = rng.random_range(0.0..2.0 * period.min(50.0));
        let fourier = FourierSpec::new(period, n, a);
        let omega = fourier.omega();
        let tag = format!("draw {draw}: tau={tau:.4} k={k} n={n} a={a} S={period} t_j={t_j:.4}");

        // Exponential, untruncated.
        let exp = KernelSpec::exponential(tau);
        let span = 60.0 * tau;
        let want = quad(|s| exp_density(tau, None, s - t_j) * trig(period, n, a, s), t_j, t_j + span, omega, tau);
        out.push(Check { label: format!("fourier_exponential_delta {tag}"), got: fourier_exponential_delta(&exp, &fourier, t_j).unwrap(), want });

        // Exponential truncated at a whole number of periods.
        let bound = period * (1.0 + (3.0 * tau / period).ceil());
        let trunc = KernelSpec::exponential(tau).truncated(bound);
        let hi = t_j + bound.min(span);
        let want = quad(|s| exp_density(tau, Some(bound), s - t_j) * trig(period, n, a, s), t_j, hi, omega, tau);
        out.push(Check { label: format!("fourier_exponential_delta truncated T={bound} {tag}"), got: fourier_exponential_delta(&trunc, &fourier, t_j).unwrap(), want });

        // Exponential residual.
        let t = t_j + rng.random_range(0.0..3.0) * tau;
        let want = quad(|s| exp_density(tau, None, s - t_j) * trig(period, n, a, s), t, t_j + span, omega, tau);
        out.push(Check { label: format!("fourier_exponential_residual t={t:.4} {tag}"), got: fourier_exponential_residual(&exp, &fourier, t_j, t).unwrap(), want });

        // Gamma delta and residual.
        let gam = KernelSpec::gamma(k, tau);
        let gspan = (60.0 + 10.0 * k) * tau;
        let want = quad(|s| gamma_density(k, tau, s - t_j) * trig(period, n, a, s), t_j, t_j + gspan, omega, tau);
        out.push(Check { label: format!("gamma_fourier_delta {tag}"), got: gamma_fourier_delta(&gam, &fourier, t_j).unwrap(), want });
        let t = t_j + rng.random_range(0.0..3.0) * k * tau;
        let want = quad(|s| gamma_density(k, tau, s - t_j) * trig(period, n, a, s), t, t_j + gspan, omega, tau);
        out.push(Check { label: format!("gamma_fourier_residual t={t:.4} {tag}"), got: gamma_fourier_residual(&gam, &fourier, t_j, t).unwrap(), want });

        // Gamma CDF.
        let dt = rng.random_range(0.0..4.0) * k * tau;
        let want = quad(|s| gamma_density(k, tau, s), 0.0, dt, 0.0, tau);
        let (_, cdf) = density_and_cdf(&gam, dt).unwrap();
        out.push(Check { label: format!("gamma cdf dt={dt:.4} {tag}"), got: cdf, want });

        // Retargeting product.
        let tau_r: f64 = rng.random_range(0.1..10.0);
        let t_r = t_j - rng.random_range(0.0..5.0);
        let want = quad(
            |s| exp_density(tau, None, s - t_j) * exp_density(tau_r, None, s - t_r),
            t_j,
            t_j + 60.0 * tau.min(tau_r),
            0.0,
            tau.min(tau_r),
        );
        let got = retarget_product_delta(&exp, &KernelSpec::exponential(tau_r), t_j, t_r).unwrap();
        out.push(Check { label: format!("retarget_product_delta tau_r={tau_r:.4} t_r={t_r:.4} {tag}"), got, want });
    }
    out
}
