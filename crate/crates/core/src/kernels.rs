//! Ad-stock kernels and their analytic time integrals.
//!
//! A kernel is a probability density `f(dt | θ)` over the delay since an
//! impression. Each impression contributes one unit of ad stock, so the
//! incremental value of an impression is a plain coefficient sum unless the
//! feature is conjoined with a Fourier term or a retargeting event stock, in
//! which case the integrals below apply.

use std::f64::consts::PI;
use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{gamma_p, gamma_q, gamma_q_complex, ln_gamma_fn};

/// Fraction of unit mass below which a kernel tail is treated as dissipated.
pub const TAIL_MASS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Exponential,
    Gamma,
}

fn default_shape() -> f64 {
    1.0
}

/// Parameterization of an ad-stock density: scale `tau` (seconds), gamma
/// shape `k` (1 for exponential) and an optional finite support bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub tau: f64,
    #[serde(default = "default_shape")]
    pub k: f64,
    #[serde(default)]
    pub truncation: Option<f64>,
}

impl KernelSpec {
    pub fn exponential(tau: f64) -> Self {
        KernelSpec { family: KernelFamily::Exponential, tau, k: 1.0, truncation: None }
    }

    pub fn gamma(k: f64, tau: f64) -> Self {
        KernelSpec { family: KernelFamily::Gamma, tau, k, truncation: None }
    }

    pub fn truncated(mut self, bound: f64) -> Self {
        self.truncation = Some(bound);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::config(format!("kernel tau must be positive, got {}", self.tau)));
        }
        if !(self.k.is_finite() && self.k > 0.0) {
            return Err(Error::config(format!("kernel shape k must be positive, got {}", self.k)));
        }
        match (self.family, self.truncation) {
            (KernelFamily::Exponential, _) if self.k != 1.0 => {
                Err(Error::config("exponential kernels have shape k = 1"))
            }
            (KernelFamily::Gamma, Some(_)) => {
                Err(Error::config("gamma kernels are untruncated"))
            }
            (_, Some(t)) if !(t > 0.0) || t.is_nan() => {
                Err(Error::config(format!("kernel truncation must be positive, got {t}")))
            }
            _ => Ok(()),
        }
    }

    fn finite_truncation(&self) -> Option<f64> {
        self.truncation.filter(|t| t.is_finite())
    }

    /// Renormalizing mass of a truncated exponential, 1 − e^{−T̄/τ}.
    fn exp_mass(&self) -> f64 {
        match self.finite_truncation() {
            Some(t) => -(-t / self.tau).exp_m1(),
            None => 1.0,
        }
    }

    /// Density at delay `dt`; zero for negative delays and beyond truncation.
    pub fn density(&self, dt: f64) -> f64 {
        if dt < 0.0 || self.finite_truncation().is_some_and(|t| dt >= t) {
            return 0.0;
        }
        match self.family {
            KernelFamily::Exponential => (-dt / self.tau).exp() / (self.tau * self.exp_mass()),
            KernelFamily::Gamma => {
                if dt == 0.0 {
                    return if self.k == 1.0 {
                        1.0 / self.tau
                    } else if self.k > 1.0 {
                        0.0
                    } else {
                        f64::INFINITY
                    };
                }
                let ln = (self.k - 1.0) * dt.ln() - dt / self.tau
                    - ln_gamma_fn(self.k)
                    - self.k * self.tau.ln();
                ln.exp()
            }
        }
    }

    pub fn cdf(&self, dt: f64) -> f64 {
        if dt <= 0.0 {
            return 0.0;
        }
        if self.finite_truncation().is_some_and(|t| dt >= t) {
            return 1.0;
        }
        match self.family {
            KernelFamily::Exponential => -(-dt / self.tau).exp_m1() / self.exp_mass(),
            KernelFamily::Gamma => gamma_p(self.k, dt / self.tau),
        }
    }

    /// 1 − F(dt), computed without cancellation for the untruncated tail.
    pub fn survival(&self, dt: f64) -> f64 {
        if dt <= 0.0 {
            return 1.0;
        }
        match (self.family, self.finite_truncation()) {
            (_, Some(t)) if dt >= t => 0.0,
            (KernelFamily::Exponential, Some(t)) => {
                ((-dt / self.tau).exp() - (-t / self.tau).exp()) / self.exp_mass()
            }
            (KernelFamily::Exponential, None) => (-dt / self.tau).exp(),
            (KernelFamily::Gamma, _) => gamma_q(self.k, dt / self.tau),
        }
    }

    /// Delay after which less than [`TAIL_MASS`] of the unit remains.
    pub fn negligible_after(&self) -> f64 {
        let tail = match self.family {
            KernelFamily::Exponential => self.tau * (1.0 / TAIL_MASS).ln(),
            KernelFamily::Gamma => {
                let (mut lo, mut hi) = (0.0_f64, self.k + 10.0);
                while gamma_q(self.k, hi) > TAIL_MASS {
                    hi *= 2.0;
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if gamma_q(self.k, mid) > TAIL_MASS {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                hi * self.tau
            }
        };
        match self.finite_truncation() {
            Some(t) => tail.min(t),
            None => tail,
        }
    }

    /// Supremum of the density over delays in `[a, b]` (unimodal kernels).
    pub fn sup_density(&self, a: f64, b: f64) -> f64 {
        let a = a.max(0.0);
        if b < a {
            return 0.0;
        }
        let mode = match self.family {
            KernelFamily::Exponential => 0.0,
            KernelFamily::Gamma => ((self.k - 1.0) * self.tau).max(0.0),
        };
        if a <= mode && mode <= b {
            self.density(mode)
        } else {
            self.density(a).max(self.density(b))
        }
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.family {
            KernelFamily::Exponential => write!(f, "exp(tau={})", self.tau)?,
            KernelFamily::Gamma => write!(f, "gamma(k={},tau={})", self.k, self.tau)?,
        }
        if let Some(t) = self.finite_truncation() {
            write!(f, "[0,{t}]")?;
        }
        Ok(())
    }
}

/// A periodic conjunction term sin/cos(2πn t / S).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierSpec {
    #[serde(rename = "S")]
    pub period: f64,
    #[serde(rename = "n")]
    pub order: u32,
    /// 1 selects the sine term, 0 the cosine term.
    #[serde(rename = "a")]
    pub phase: u8,
}

impl FourierSpec {
    pub fn new(period: f64, order: u32, phase: u8) -> Self {
        FourierSpec { period, order, phase }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.period.is_finite() && self.period > 0.0) {
            return Err(Error::config(format!("fourier period S must be positive, got {}", self.period)));
        }
        if self.phase > 1 {
            return Err(Error::config(format!("fourier phase a must be 0 or 1, got {}", self.phase)));
        }
        Ok(())
    }

    pub fn is_sine(&self) -> bool {
        self.phase == 1
    }

    /// Angular frequency 2πn/S.
    pub fn omega(&self) -> f64 {
        2.0 * PI * self.order as f64 / self.period
    }

    /// The periodic factor evaluated at absolute time `t`.
    pub fn factor(&self, t: f64) -> f64 {
        let angle = self.omega() * t;
        if self.is_sine() {
            angle.sin()
        } else {
            angle.cos()
        }
    }

    fn project(&self, z: Complex64) -> f64 {
        if self.is_sine() {
            z.im
        } else {
            z.re
        }
    }
}

impl fmt::Display for FourierSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let phase = if self.is_sine() { "sin" } else { "cos" };
        write!(f, "fourier(S={},n={},{})", self.period, self.order, phase)
    }
}

/// Density and CDF of `kernel` at delay `dt`.
pub fn density_and_cdf(kernel: &KernelSpec, dt: f64) -> Result<(f64, f64)> {
    if dt.is_nan() || dt < 0.0 {
        return Err(Error::domain(format!("kernel evaluated at negative delay {dt}")));
    }
    Ok((kernel.density(dt), kernel.cdf(dt)))
}

fn require(kernel: &KernelSpec, family: KernelFamily) -> Result<()> {
    kernel.validate()?;
    if kernel.family != family {
        return Err(Error::UnsupportedFamily(format!("expected {family:?} kernel, got {kernel}")));
    }
    Ok(())
}

/// ∫_{d}^{T̄} f(u) e^{iω(t_j+u)} du for an exponential kernel, as a complex
/// number whose real/imaginary parts are the cosine/sine integrals.
fn exponential_conjunction(kernel: &KernelSpec, omega: f64, t_j: f64, d: f64) -> Complex64 {
    let rate = Complex64::new(1.0, -omega * kernel.tau);
    let phase = Complex64::from_polar(1.0, omega * t_j);
    let upper = match kernel.finite_truncation() {
        Some(t) if d >= t => return Complex64::new(0.0, 0.0),
        Some(t) => (-rate * (t / kernel.tau)).exp(),
        None => Complex64::new(0.0, 0.0),
    };
    let lower = (-rate * (d / kernel.tau)).exp();
    phase / rate * (lower - upper) / kernel.exp_mass()
}

/// Integral over [t_j, t_j + T̄] of the exponential ad stock of one unit
/// impression conjoined with a Fourier term.
pub fn fourier_exponential_delta(kernel: &KernelSpec, fourier: &FourierSpec, t_j: f64) -> Result<f64> {
    require(kernel, KernelFamily::Exponential)?;
    fourier.validate()?;
    Ok(fourier.project(exponential_conjunction(kernel, fourier.omega(), t_j, 0.0)))
}

/// Residual of the exponential Fourier conjunction integral on [t, t_j + T̄].
pub fn fourier_exponential_residual(
    kernel: &KernelSpec,
    fourier: &FourierSpec,
    t_j: f64,
    t: f64,
) -> Result<f64> {
    require(kernel, KernelFamily::Exponential)?;
    fourier.validate()?;
    if t < t_j {
        return Err(Error::domain(format!("residual at t={t} before exposure t_j={t_j}")));
    }
    Ok(fourier.project(exponential_conjunction(kernel, fourier.omega(), t_j, t - t_j)))
}

/// Imaginary residue tolerated before a real-valued complex expression is
/// considered numerically broken.
const IMAG_RESIDUE: f64 = 1e-10;

fn real_part(value: Complex64) -> Result<f64> {
    if value.im.abs() > IMAG_RESIDUE * value.re.abs().max(1.0) {
        return Err(Error::Numeric {
            message: "real-valued gamma Fourier integral has imaginary residue".into(),
            residual: value.im.abs(),
        });
    }
    Ok(value.re)
}

/// The F_a / F_{1−a} pair for a gamma kernel: the sine and cosine integrals
/// of the conjunction over [t, ∞), each carrying a factor of 2.
fn gamma_fourier_pair(kernel: &KernelSpec, fourier: &FourierSpec, t_j: f64, d: f64) -> (Complex64, Complex64) {
    let w = fourier.omega();
    let k = kernel.k;
    let (s, c) = (w * t_j).sin_cos();
    let i = Complex64::i();
    let minus = Complex64::new(1.0, -w * kernel.tau);
    let plus = Complex64::new(1.0, w * kernel.tau);
    let mut m = minus.powf(-k);
    let mut p = plus.powf(-k);
    if d > 0.0 {
        m *= gamma_q_complex(k, minus * (d / kernel.tau));
        p *= gamma_q_complex(k, plus * (d / kernel.tau));
    }
    let f_sin = (s - i * c) * m + (s + i * c) * p;
    let f_cos = (c - i * s) * p + (c + i * s) * m;
    (f_sin, f_cos)
}

/// Integral over [t_j, ∞) of the gamma ad stock of one unit impression
/// conjoined with a Fourier term.
pub fn gamma_fourier_delta(kernel: &KernelSpec, fourier: &FourierSpec, t_j: f64) -> Result<f64> {
    require(kernel, KernelFamily::Gamma)?;
    fourier.validate()?;
    let (f_sin, f_cos) = gamma_fourier_pair(kernel, fourier, t_j, 0.0);
    let a = fourier.phase as f64;
    real_part((f_sin * a + f_cos * (1.0 - a)) * 0.5)
}

/// Residual of the gamma Fourier conjunction integral on [t, ∞).
pub fn gamma_fourier_residual(kernel: &KernelSpec, fourier: &FourierSpec, t_j: f64, t: f64) -> Result<f64> {
    require(kernel, KernelFamily::Gamma)?;
    fourier.validate()?;
    if t < t_j {
        return Err(Error::domain(format!("residual at t={t} before exposure t_j={t_j}")));
    }
    let (f_sin, f_cos) = gamma_fourier_pair(kernel, fourier, t_j, t - t_j);
    let a = fourier.phase as f64;
    real_part((f_sin * a + f_cos * (1.0 - a)) * 0.5)
}

fn require_untruncated_exponential(kernel: &KernelSpec) -> Result<()> {
    require(kernel, KernelFamily::Exponential)?;
    if kernel.finite_truncation().is_some() {
        return Err(Error::UnsupportedFamily(format!(
            "retargeting conjunction needs untruncated exponential kernels, got {kernel}"
        )));
    }
    Ok(())
}

/// Scale factor and effective kernel of the product of an impression's
/// exponential ad stock and an earlier event's exponential event stock.
///
/// For t > t_j > t_r the product equals `scale · f(t − t_j | τ̃)` with
/// τ̃ = τ τ_R / (τ + τ_R).
pub fn retarget_product_kernel(
    ad_kernel: &KernelSpec,
    event_kernel: &KernelSpec,
    t_j: f64,
    t_r: f64,
) -> Result<(f64, KernelSpec)> {
    require_untruncated_exponential(ad_kernel)?;
    require_untruncated_exponential(event_kernel)?;
    let (tau, tau_r) = (ad_kernel.tau, event_kernel.tau);
    let effective = KernelSpec::exponential(tau * tau_r / (tau + tau_r));
    if t_j < t_r {
        return Ok((0.0, effective));
    }
    Ok(((-(t_j - t_r) / tau_r).exp() / (tau + tau_r), effective))
}

/// ∫_{t_j}^∞ x_ij(t) x_ir(t) dt for one impression/event pair; zero unless
/// the impression follows the event.
pub fn retarget_product_delta(ad_kernel: &KernelSpec, event_kernel: &KernelSpec, t_j: f64, t_r: f64) -> Result<f64> {
    Ok(retarget_product_kernel(ad_kernel, event_kernel, t_j, t_r)?.0)
}

/// Time integral over [t_j, ∞) of one unit impression's stock under an
/// optional Fourier conjunction.
pub fn unit_delta(kernel: &KernelSpec, fourier: Option<&FourierSpec>, t_j: f64) -> Result<f64> {
    match fourier {
        None => Ok(1.0),
        Some(fs) => match kernel.family {
            KernelFamily::Exponential => fourier_exponential_delta(kernel, fs, t_j),
            KernelFamily::Gamma => gamma_fourier_delta(kernel, fs, t_j),
        },
    }
}

/// Portion of [`unit_delta`] still pending at time `t ≥ t_j`.
pub fn unit_residual(kernel: &KernelSpec, fourier: Option<&FourierSpec>, t_j: f64, t: f64) -> Result<f64> {
    if t < t_j {
        return Err(Error::domain(format!("residual at t={t} before exposure t_j={t_j}")));
    }
    match fourier {
        None => Ok(kernel.survival(t - t_j)),
        Some(fs) => match kernel.family {
            KernelFamily::Exponential => fourier_exponential_residual(kernel, fs, t_j, t),
            KernelFamily::Gamma => gamma_fourier_residual(kernel, fs, t_j, t),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_at_zero() {
        let (d, c) = density_and_cdf(&KernelSpec::exponential(1.0), 0.0).unwrap();
        assert_eq!(d, 1.0);
        assert_eq!(c, 0.0);
    }

    #[test]
    fn negative_delay_is_domain_error() {
        assert!(matches!(density_and_cdf(&KernelSpec::exponential(1.0), -1e-9), Err(Error::Domain(_))));
    }

    #[test]
    fn gamma_cdf_tends_to_one() {
        let (_, c) = density_and_cdf(&KernelSpec::gamma(2.0, 1.0), 1e4).unwrap();
        assert!((c - 1.0).abs() < 1e-12);
    }

    #[test]
    fn beyond_truncation_is_spent() {
        let k = KernelSpec::exponential(2.0).truncated(5.0);
        assert_eq!(density_and_cdf(&k, 5.0).unwrap(), (0.0, 1.0));
        assert_eq!(density_and_cdf(&k, 9.0).unwrap(), (0.0, 1.0));
    }

    #[test]
    fn uniform_mass_convention() {
        // A kernel constant at 1/5 on [0, 5] spends its unit over five days.
        let density = 1.0 / 5.0;
        let mass: f64 = (0..5).map(|_| density).sum();
        assert!((mass - 1.0).abs() < 1e-15);
    }

    #[test]
    fn memoryless_exponential() {
        let k = KernelSpec::exponential(1.7);
        for &(t, s) in &[(0.0, 1.0), (0.3, 2.2), (4.0, 0.5)] {
            let lhs = k.density(t + s);
            let rhs = k.density(t) * (-s / 1.7_f64).exp();
            assert!((lhs - rhs).abs() <= 1e-15 * rhs.max(1.0));
        }
    }

    #[test]
    fn gamma_shape_must_be_untruncated() {
        assert!(KernelSpec::gamma(2.0, 1.0).truncated(3.0).validate().is_err());
        assert!(KernelSpec::exponential(0.0).validate().is_err());
    }

    #[test]
    fn zeroth_cosine_is_unit() {
        let f = FourierSpec::new(7.0, 0, 0);
        for &t_j in &[0.0, 1.3, 100.0] {
            let e = fourier_exponential_delta(&KernelSpec::exponential(0.4), &f, t_j).unwrap();
            assert!((e - 1.0).abs() < 1e-15);
            for &k in &[1.0, 2.0, 3.5] {
                let g = gamma_fourier_delta(&KernelSpec::gamma(k, 0.4), &f, t_j).unwrap();
                assert!((g - 1.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn first_sine_at_origin() {
        let v = fourier_exponential_delta(&KernelSpec::exponential(1.0), &FourierSpec::new(1.0, 1, 1), 0.0).unwrap();
        let expect = 2.0 * PI / (1.0 + 4.0 * PI * PI);
        assert!((v - expect).abs() < 1e-15);
    }

    #[test]
    fn printed_exponential_formula_when_period_divides_truncation() {
        // Closed form with the truncation factor cancelled.
        let kernel = KernelSpec::exponential(0.8).truncated(14.0);
        for &(n, a, t_j) in &[(1u32, 0u8, 0.3), (2, 1, 5.5), (3, 0, 12.0)] {
            let f = FourierSpec::new(7.0, n, a);
            let w = f.omega();
            let (s, c) = (w * t_j).sin_cos();
            let wt = w * 0.8;
            let a = a as f64;
            let printed = (a * (s + wt * c) + (1.0 - a) * (c - wt * s)) / (1.0 + wt * wt);
            let got = fourier_exponential_delta(&kernel, &f, t_j).unwrap();
            assert!((got - printed).abs() < 1e-13, "{got} vs {printed}");
        }
    }

    #[test]
    fn wrong_family_is_rejected() {
        let f = FourierSpec::new(7.0, 1, 0);
        assert!(matches!(
            fourier_exponential_delta(&KernelSpec::gamma(2.0, 1.0), &f, 0.0),
            Err(Error::UnsupportedFamily(_))
        ));
        assert!(matches!(
            gamma_fourier_delta(&KernelSpec::exponential(1.0), &f, 0.0),
            Err(Error::UnsupportedFamily(_))
        ));
    }

    #[test]
    fn gamma_residual_at_exposure_is_delta() {
        let kernel = KernelSpec::gamma(2.5, 0.9);
        for &(n, a) in &[(0u32, 0u8), (1, 0), (1, 1), (3, 1)] {
            let f = FourierSpec::new(7.0, n, a);
            let d = gamma_fourier_delta(&kernel, &f, 2.0).unwrap();
            let r = gamma_fourier_residual(&kernel, &f, 2.0, 2.0).unwrap();
            assert!((d - r).abs() < 1e-14);
        }
        assert!(gamma_fourier_residual(&kernel, &FourierSpec::new(7.0, 1, 0), 2.0, 1.0).is_err());
    }

    #[test]
    fn gamma_zeroth_residual_is_survival() {
        let kernel = KernelSpec::gamma(3.0, 0.5);
        let f = FourierSpec::new(7.0, 0, 0);
        for &t in &[0.1, 1.0, 2.5, 6.0] {
            let r = gamma_fourier_residual(&kernel, &f, 0.0, t).unwrap();
            assert!((r - gamma_q(3.0, t / 0.5)).abs() < 1e-13);
        }
    }

    #[test]
    fn retarget_closed_form() {
        let one = KernelSpec::exponential(1.0);
        assert!((retarget_product_delta(&one, &one, 3.0, 3.0).unwrap() - 0.5).abs() < 1e-15);
        let two = KernelSpec::exponential(2.0);
        let v = retarget_product_delta(&one, &two, 5.0, 3.0).unwrap();
        assert!((v - (-1.0_f64).exp() / 3.0).abs() < 1e-15);
        assert_eq!(retarget_product_delta(&one, &two, 1.0, 3.0).unwrap(), 0.0);
    }
}
