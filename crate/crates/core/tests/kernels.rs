mod common;

use common::integrals::{closed_form_suite, exp_density, gamma_density, quad, rel_err};
use incrementality::kernels::*;

#[test]
fn gamma_cdf_matches_quadrature() {
    let kernel = KernelSpec::gamma(3.0, 0.5);
    let (_, cdf) = density_and_cdf(&kernel, 1.7).unwrap();
    let want = quad(|s| gamma_density(3.0, 0.5, s), 0.0, 1.7, 0.0, 0.5);
    assert!(rel_err(cdf, want) <= 1e-9, "{cdf} vs {want}");
}

#[test]
fn exponential_cosine_matches_quadrature() {
    let f = FourierSpec::new(7.0, 2, 0);
    let got = fourier_exponential_delta(&KernelSpec::exponential(0.7), &f, 3.1).unwrap();
    let want = quad(|s| exp_density(0.7, None, s - 3.1) * f.factor(s), 3.1, 3.1 + 60.0 * 0.7, f.omega(), 0.7);
    assert!(rel_err(got, want) <= 1e-8, "{got} vs {want}");
}

#[test]
fn gamma_sine_matches_quadrature() {
    let f = FourierSpec::new(7.0, 1, 1);
    let got = gamma_fourier_delta(&KernelSpec::gamma(2.0, 1.0), &f, 0.5).unwrap();
    let want = quad(|s| gamma_density(2.0, 1.0, s - 0.5) * f.factor(s), 0.5, 80.5, f.omega(), 1.0);
    assert!(rel_err(got, want) <= 1e-8, "{got} vs {want}");
}

#[test]
fn gamma_residual_matches_quadrature() {
    let f = FourierSpec::new(7.0, 1, 0);
    for a in [0u8, 1] {
        let f = FourierSpec::new(f.period, f.order, a);
        let got = gamma_fourier_residual(&KernelSpec::gamma(2.0, 1.0), &f, 0.0, 2.3).unwrap();
        let want = quad(|s| gamma_density(2.0, 1.0, s) * f.factor(s), 2.3, 90.0, f.omega(), 1.0);
        assert!(rel_err(got, want) <= 1e-7, "a={a}: {got} vs {want}");
    }
}

#[test]
fn retarget_matches_quadrature() {
    let got = retarget_product_delta(&KernelSpec::exponential(0.5), &KernelSpec::exponential(3.0), 1.2, 0.0).unwrap();
    let want = quad(|s| exp_density(0.5, None, s - 1.2) * exp_density(3.0, None, s), 1.2, 1.2 + 30.0, 0.0, 0.5);
    assert!(rel_err(got, want) <= 1e-9, "{got} vs {want}");
}

#[test]
fn unit_mass() {
    let kernels = [
        KernelSpec::exponential(0.3),
        KernelSpec::exponential(2.0).truncated(3.0),
        KernelSpec::gamma(1.0, 1.5),
        KernelSpec::gamma(2.0, 0.4),
        KernelSpec::gamma(3.0, 2.0),
        KernelSpec::gamma(4.5, 1.0),
    ];
    for k in kernels {
        let hi = k.negligible_after() * 1.5;
        let mass = quad(|s| k.density(s), 0.0, hi, 0.0, k.tau);
        assert!((mass - 1.0).abs() <= 1e-9, "{k}: {mass}");
    }
}

#[test]
fn gamma_shape_one_is_exponential() {
    let mut count = 0;
    for &tau in &[0.2, 1.0, 3.7, 9.0] {
        for &(n, a) in &[(0u32, 0u8), (1, 0), (1, 1), (2, 1), (3, 0)] {
            let t_j = 0.37 * tau + n as f64;
            let f = FourierSpec::new(7.0, n, a);
            let e = KernelSpec::exponential(tau);
            let g = KernelSpec::gamma(1.0, tau);
            let de = fourier_exponential_delta(&e, &f, t_j).unwrap();
            let dg = gamma_fourier_delta(&g, &f, t_j).unwrap();
            assert!((de - dg).abs() < 1e-13 * de.abs().max(1.0), "{de} vs {dg}");
            let t = t_j + 0.8 * tau;
            let re = fourier_exponential_residual(&e, &f, t_j, t).unwrap();
            let rg = gamma_fourier_residual(&g, &f, t_j, t).unwrap();
            assert!((re - rg).abs() < 1e-12 * re.abs().max(1.0), "{re} vs {rg}");
            let (d1, c1) = density_and_cdf(&e, t - t_j).unwrap();
            let (d2, c2) = density_and_cdf(&g, t - t_j).unwrap();
            assert!((d1 - d2).abs() < 1e-13 && (c1 - c2).abs() < 1e-13);
            count += 1;
        }
    }
    assert_eq!(count, 20);
}

#[test]
fn residual_differences_are_interval_integrals() {
    let f = FourierSpec::new(7.0, 2, 1);
    let g = KernelSpec::gamma(2.0, 1.3);
    let (t_j, t, t2) = (0.4, 1.1, 3.9);
    let diff = gamma_fourier_residual(&g, &f, t_j, t).unwrap() - gamma_fourier_residual(&g, &f, t_j, t2).unwrap();
    let want = quad(|s| gamma_density(2.0, 1.3, s - t_j) * f.factor(s), t, t2, f.omega(), 1.0);
    assert!(rel_err(diff, want) <= 1e-8);

    let e = KernelSpec::exponential(1.3);
    let diff = fourier_exponential_residual(&e, &f, t_j, t).unwrap() - fourier_exponential_residual(&e, &f, t_j, t2).unwrap();
    let want = quad(|s| exp_density(1.3, None, s - t_j) * f.factor(s), t, t2, f.omega(), 1.0);
    assert!(rel_err(diff, want) <= 1e-8);
}

#[test]
fn residual_vanishes_in_the_tail() {
    let f = FourierSpec::new(7.0, 0, 0);
    let g = KernelSpec::gamma(2.0, 1.0);
    let mut prev = f64::INFINITY;
    for i in 0..50 {
        let r = gamma_fourier_residual(&g, &f, 0.0, i as f64).unwrap();
        assert!(r <= prev);
        prev = r;
    }
    assert!(prev < 1e-15);
}

#[test]
fn randomized_closed_forms() {
    let checks = closed_form_suite(250, 11);
    let worst = checks.iter().max_by(|a, b| a.rel().total_cmp(&b.rel())).unwrap();
    assert!(worst.rel() <= 1e-7, "{} got {} want {} rel {:e}", worst.label, worst.got, worst.want, worst.rel());
}

#[test]
fn cdf_is_monotone() {
    for k in [KernelSpec::exponential(1.0), KernelSpec::gamma(2.5, 0.7), KernelSpec::exponential(1.0).truncated(2.0)] {
        let mut prev = 0.0;
        for i in 0..400 {
            let (_, c) = density_and_cdf(&k, i as f64 * 0.02).unwrap();
            assert!(c >= prev && (0.0..=1.0).contains(&c));
            prev = c;
        }
    }
}
