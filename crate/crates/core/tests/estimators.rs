mod common;

use common::dgp::{self, endogenous, exogenous, normal};
use incrementality::estimators::{
    bayesian_bootstrap, control_function_2sls, first_stage, fit_2sls, fit_hcc, fit_ols, fit_ridge, gmm_iv,
    hausman_bootstrap, DesignMatrices, Weighting, LAMBDA_INF,
};
use incrementality::Error;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    let scale = b.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * scale)
}

fn names(prefix: &str, p: usize) -> Vec<String> {
    (0..p).map(|j| format!("{prefix}{j}")).collect()
}

/// diag(w) M without forming the diagonal matrix.
fn row_scaled(m: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)] * w[r])
}

/// Weighted least squares by LU on the dense normal equations.
fn dense_wls(x: &DMatrix<f64>, w: &[f64], y: &[f64]) -> Vec<f64> {
    let a = x.transpose() * row_scaled(x, w);
    let b = x.transpose() * row_scaled(&DMatrix::from_column_slice(y.len(), 1, y), w);
    a.lu().solve(&b).unwrap().iter().copied().collect()
}

#[test]
fn ridge_interpolates_noiseless_system() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let truth = [0.7, -1.5, 2.25];
    let x = DMatrix::from_fn(100, 3, |_, j| if j == 0 { 1.0 } else { normal(&mut rng) });
    let y: Vec<f64> = (0..100).map(|r| (0..3).map(|j| x[(r, j)] * truth[j]).sum()).collect();
    let d = DesignMatrices::exogenous(x, y, vec![1.0; 100], names("x", 3), Some(0)).unwrap();
    assert!(close(&fit_ridge(&d, 0.0).unwrap(), &truth, 1e-10));
}

#[test]
fn huge_ridge_penalty_leaves_weighted_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 500;
    let x = DMatrix::from_fn(n, 4, |_, j| if j == 0 { 1.0 } else { normal(&mut rng) * (j as f64) });
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..3.0)).collect();
    let y: Vec<f64> = (0..n).map(|r| 3.0 + x[(r, 1)] - 2.0 * x[(r, 3)] + normal(&mut rng)).collect();
    let mean = y.iter().zip(&w).map(|(y, w)| y * w).sum::<f64>() / w.iter().sum::<f64>();
    let d = DesignMatrices::exogenous(x, y, w, names("x", 4), Some(0)).unwrap();
    let b = fit_ridge(&d, 1e12).unwrap();
    assert!(b[1..].iter().all(|v| v.abs() < 1e-9), "{b:?}");
    // Centering uses unweighted column means, so the intercept absorbs the
    // (vanishing) slopes times those means.
    assert!((b[0] - mean).abs() < 1e-8, "{} vs {mean}", b[0]);
}

#[test]
fn weighted_ridge_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, p) = (2000, 10);
    let x = DMatrix::from_fn(n, p, |_, j| match j {
        0 => 1.0,
        _ => normal(&mut rng) * (1.0 + j as f64) + 0.3 * j as f64,
    });
    let w: Vec<f64> = (0..n).map(|r| if r % 97 == 0 { -0.5 } else { rng.random_range(0.1..4.0) }).collect();
    let y: Vec<f64> = (0..n).map(|r| (0..p).map(|j| x[(r, j)] * (j as f64 - 4.5) / 3.0).sum::<f64>() + normal(&mut rng)).collect();
    let oracle = dense_wls(&x, &w, &y);
    let d = DesignMatrices::exogenous(x.clone(), y.clone(), w.clone(), names("x", p), Some(0)).unwrap();
    let b = fit_ridge(&d, 0.0).unwrap();
    assert!(close(&b, &oracle, 1e-8), "{b:?}\n{oracle:?}");

    // With a penalty, the oracle works on standardized columns.
    let lambda = 0.37;
    let nf = n as f64;
    let means: Vec<f64> = (0..p).map(|j| if j == 0 { 0.0 } else { x.column(j).sum() / nf }).collect();
    let sds: Vec<f64> = (0..p)
        .map(|j| if j == 0 { 1.0 } else { (x.column(j).iter().map(|v| (v - means[j]).powi(2)).sum::<f64>() / nf).sqrt() })
        .collect();
    let xs = DMatrix::from_fn(n, p, |r, j| (x[(r, j)] - means[j]) / sds[j]);
    let mut a = xs.transpose() * row_scaled(&xs, &w) / nf;
    for j in 1..p {
        a[(j, j)] += lambda;
    }
    let rhs = row_scaled(&xs, &w).transpose() * DVector::from_column_slice(&y) / nf;
    let bs = a.lu().solve(&rhs).unwrap();
    let mut oracle: Vec<f64> = (0..p).map(|j| bs[j] / sds[j]).collect();
    oracle[0] -= (1..p).map(|j| oracle[j] * means[j]).sum::<f64>();
    let b = fit_ridge(&d, lambda).unwrap();
    assert!(close(&b, &oracle, 1e-8), "{b:?}\n{oracle:?}");
}

#[test]
fn coefficients_are_reported_in_original_units() {
    let d = exogenous(3000, 4);
    let base = fit_ridge(&d, 0.5).unwrap();
    let mut scaled = d.clone();
    scaled.x.column_mut(1).scale_mut(40.0);
    scaled.z = scaled.x.clone();
    let b = fit_ridge(&scaled, 0.5).unwrap();
    assert!((b[1] * 40.0 - base[1]).abs() < 1e-10 && (b[0] - base[0]).abs() < 1e-10);
}

#[test]
fn indefinite_weighted_gram_is_reported() {
    let mut d = exogenous(200, 5);
    d.w.iter_mut().enumerate().for_each(|(r, w)| *w = if r % 2 == 0 { -3.0 } else { 1.0 });
    assert!(matches!(fit_ols(&d), Err(Error::Numeric { .. })));
}

#[test]
fn control_function_is_ols_when_regressors_are_exogenous() {
    let d = exogenous(1000, 6);
    let ols = fit_ols(&d).unwrap();
    for lv in [0.0, 1.0, 1e6] {
        let (b, bv) = control_function_2sls(&d, lv).unwrap();
        assert!(bv.is_empty());
        assert!(close(&b, &ols, 1e-12));
    }
}

#[test]
fn endogenous_toy_recovers_beta_and_reproduces_ols_bias() {
    let e = endogenous(50_000, 0.8, 1.0, 7);
    let d = &e.design;
    let (b, bv) = control_function_2sls(d, 0.0).unwrap();
    assert!((b[1] - e.beta).abs() < 3.0 * e.iv_se(), "{} ± {}", b[1], e.iv_se());
    let ols = fit_ols(d).unwrap();
    assert!(ols[1] > e.beta + 0.3);
    assert!((ols[1] - e.ols_limit()).abs() < 3.0 * e.ols_se(), "{} vs {}", ols[1], e.ols_limit());

    // β_OLS − β_2SLS = (X'WX)⁻¹ X'W V̂ β_v̂, computed with dense algebra.
    let fs = first_stage(d).unwrap();
    let wx = row_scaled(&d.x, &d.w);
    let proj = (wx.transpose() * &d.x).lu().solve(&(wx.transpose() * &fs.v_hat)).unwrap();
    let implied = &proj * DVector::from_column_slice(&bv);
    let diff: Vec<f64> = ols.iter().zip(&b).map(|(o, i)| o - i).collect();
    assert!(close(&diff, implied.as_slice(), 1e-8), "{diff:?} {implied:?}");

    // The control-function coefficient alone is the slope difference
    // divided by the share of x variance left unexplained by z.
    let unexplained = proj[(1, 0)];
    assert!((bv[0] * unexplained - diff[1]).abs() < 1e-8 * diff[1].abs());
    assert!((unexplained - 0.5).abs() < 0.02);
}

#[test]
fn control_function_path_runs_from_2sls_to_ols() {
    let d = endogenous(5000, 0.6, 0.8, 8).design;
    let iv = fit_2sls(&d).unwrap();
    let ols = fit_ols(&d).unwrap();
    assert!(close(&control_function_2sls(&d, 0.0).unwrap().0, &iv, 1e-9));
    assert!(close(&control_function_2sls(&d, 1e12).unwrap().0, &ols, 1e-9));
    let mut prev = iv[1];
    for e in -40..=60 {
        let b = control_function_2sls(&d, 10f64.powf(e as f64 / 5.0)).unwrap().0[1];
        // Monotone between the endpoints for a single endogenous column.
        assert!(b >= prev - 1e-12 && b <= ols[1] + 1e-12, "{e}: {b} after {prev}");
        assert!(b - prev < 0.25 * (ols[1] - iv[1]));
        prev = b;
    }
}

#[test]
fn gmm_weightings_agree_when_exactly_identified() {
    let d = endogenous(20_000, 0.5, 0.7, 9).design;
    let (a, _) = gmm_iv(&d, 0.0, Weighting::Identity).unwrap();
    let (b, _) = gmm_iv(&d, 0.0, Weighting::DiagonalTwoStep).unwrap();
    assert!(close(&a, &b, 1e-6));
    let iv = fit_2sls(&d).unwrap();
    assert!(close(&a, &iv, 1e-8));
    assert!(close(&control_function_2sls(&d, 0.0).unwrap().0, &a, 1e-6));
}

#[test]
fn gmm_with_own_moments_is_ols() {
    let d = exogenous(4000, 10);
    let ols = fit_ols(&d).unwrap();
    for w in [Weighting::Identity, Weighting::DiagonalTwoStep] {
        let (b, obj) = gmm_iv(&d, 0.0, w).unwrap();
        assert!(close(&b, &ols, 1e-8));
        assert!(obj < 1e-20);
    }
}

#[test]
fn gmm_needs_as_many_instruments_as_regressors() {
    let mut d = endogenous(500, 0.5, 1.0, 11).design;
    d.z = d.z.columns(0, 1).into_owned();
    d.z_names.truncate(1);
    assert!(matches!(gmm_iv(&d, 0.0, Weighting::Identity), Err(Error::Identification(_))));
    assert!(matches!(fit_2sls(&d), Err(Error::Identification(_))));
}

fn over_identified(n: usize, rng: &mut ChaCha8Rng) -> DesignMatrices {
    // Instruments on very different scales and of very different strength:
    // raw identity weighting leans on the large, weak one.
    let scales = [1.0, 20.0, 3.0];
    let pis = [0.8, 0.002, 0.05];
    let mut x = DMatrix::zeros(n, 2);
    let mut z = DMatrix::zeros(n, 4);
    let mut y = vec![0.0; n];
    for r in 0..n {
        let zs: Vec<f64> = scales.iter().map(|s| s * normal(rng)).collect();
        let v = normal(rng);
        let eps = 0.6 * v + 0.8 * normal(rng);
        let xr = zs.iter().zip(&pis).map(|(z, p)| z * p).sum::<f64>() + v;
        x[(r, 0)] = 1.0;
        x[(r, 1)] = xr;
        z[(r, 0)] = 1.0;
        for k in 0..3 {
            z[(r, k + 1)] = zs[k];
        }
        y[r] = 0.2 + xr + eps;
    }
    DesignMatrices::new(x, z, y, vec![1.0; n], vec!["one".into(), "x".into()], names("z", 4), Some(0)).unwrap()
}

#[test]
fn diagonal_two_step_is_no_less_efficient() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let reps = 500;
    let (mut id, mut diag) = (Vec::with_capacity(reps), Vec::with_capacity(reps));
    for _ in 0..reps {
        let d = over_identified(400, &mut rng);
        id.push(gmm_iv(&d, 0.0, Weighting::Identity).unwrap().0[1]);
        diag.push(gmm_iv(&d, 0.0, Weighting::DiagonalTwoStep).unwrap().0[1]);
    }
    let var = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    };
    let (vi, vd) = (var(&id), var(&diag));
    assert!(vd <= vi, "diagonal {vd} identity {vi}");
}

#[test]
fn hcc_with_only_infinite_penalty_keeps_the_ridge_fit() {
    // x is exogenous; z is a valid but redundant instrument.
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let make = |n: usize, rng: &mut ChaCha8Rng| {
        let mut x = DMatrix::zeros(n, 2);
        let mut z = DMatrix::zeros(n, 2);
        let mut y = vec![0.0; n];
        for r in 0..n {
            let zr = normal(rng);
            let xr = zr + normal(rng);
            x[(r, 0)] = 1.0;
            x[(r, 1)] = xr;
            z[(r, 0)] = 1.0;
            z[(r, 1)] = zr;
            y[r] = 1.0 + 0.5 * xr + normal(rng);
        }
        DesignMatrices::new(x, z, y, vec![1.0; n], vec!["one".into(), "x".into()], vec!["one".into(), "z".into()], Some(0))
            .unwrap()
    };
    let train = make(5000, &mut rng);
    let holdout = make(2000, &mut rng);
    let fit = fit_hcc(&train, &[LAMBDA_INF], &holdout).unwrap();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(norm(&fit.beta_hcc) <= 1e-3 * norm(&fit.beta_corr));
    assert!(close(&fit.beta_corr, &fit_ridge(&train, LAMBDA_INF).unwrap(), 1e-12));
}

#[test]
fn hcc_with_zero_penalty_is_2sls() {
    let e = endogenous(8000, 0.7, 0.9, 14);
    let h = endogenous(3000, 0.7, 0.9, 15);
    let fit = fit_hcc(&e.design, &[0.0], &h.design).unwrap();
    let (cf, _) = control_function_2sls(&e.design, 0.0).unwrap();
    assert!(close(&fit.beta, &cf, 1e-6), "{:?} {cf:?}", fit.beta);
    assert!(close(&fit.beta_corr, &fit_ols(&e.design).unwrap(), 1e-12));
}

#[test]
fn hcc_selects_correction_under_strong_endogeneity() {
    let e = endogenous(40_000, 0.8, 1.0, 16);
    let h = endogenous(20_000, 0.8, 1.0, 17);
    let fit = fit_hcc(&e.design, &incrementality::estimators::default_lambda_grid(), &h.design).unwrap();
    assert!(fit.lambda_hcc <= 1e-2, "{}", fit.lambda_hcc);
    assert!((fit.beta[1] - e.beta).abs() < 4.0 * e.iv_se());
}

#[test]
fn hcc_rejects_bad_inputs() {
    let e = endogenous(500, 0.5, 1.0, 18);
    assert!(matches!(fit_hcc(&e.design, &[], &e.design), Err(Error::Config(_))));
    let mut empty = e.design.clone();
    empty.y.iter_mut().for_each(|y| *y = 0.0);
    assert!(matches!(fit_hcc(&e.design, &[0.0], &empty), Err(Error::NoPositives(_))));
}

#[test]
fn bootstrap_on_noiseless_data_is_degenerate() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let n = 300;
    let x = DMatrix::from_fn(n, 3, |_, j| if j == 0 { 1.0 } else { normal(&mut rng) });
    let y: Vec<f64> = (0..n).map(|r| 0.5 + 2.0 * x[(r, 1)] - x[(r, 2)]).collect();
    let d = DesignMatrices::exogenous(x, y, vec![1.0; n], names("x", 3), Some(0)).unwrap();
    let res = bayesian_bootstrap(&d, 20, 1.0, 3, 0.9, fit_ols).unwrap();
    for draw in &res.draws {
        assert!(close(draw, &[0.5, 2.0, -1.0], 1e-10), "{draw:?}");
    }
    assert!(res.lower.iter().zip(&res.upper).all(|(l, u)| u - l < 1e-9));
}

#[test]
fn bootstrap_multiplier_scales_dispersion() {
    let d = exogenous(2000, 20);
    let sd = |m: f64| {
        let r = bayesian_bootstrap(&d, 400, m, 21, 0.9, fit_ols).unwrap();
        let v: Vec<f64> = r.draws.iter().map(|b| b[1]).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
    };
    let ratio = sd(2.0) / sd(1.0);
    assert!((1.7..=2.3).contains(&ratio), "{ratio}");
}

#[test]
fn bootstrap_is_deterministic_and_respects_groups() {
    let d = exogenous(600, 22).with_groups((0..600).map(|r| r / 3).collect()).unwrap();
    let a = bayesian_bootstrap(&d, 8, 1.0, 5, 0.9, fit_ols).unwrap();
    let b = bayesian_bootstrap(&d, 8, 1.0, 5, 0.9, fit_ols).unwrap();
    assert_eq!(a, b);
    let c = bayesian_bootstrap(&d, 8, 1.0, 6, 0.9, fit_ols).unwrap();
    assert_ne!(a.draws, c.draws);

    // One group weight per user: rows of a group are reweighted together.
    let res = bayesian_bootstrap(&d, 2, 1.0, 5, 0.9, |r| Ok(r.w.clone())).unwrap();
    for w in &res.draws {
        for g in w.chunks(3) {
            assert!(g.iter().all(|v| *v == g[0]));
        }
    }
    assert!(bayesian_bootstrap(&d, 1, 1.0, 5, 0.9, fit_ols).is_err());
    assert!(bayesian_bootstrap(&d, 4, 0.5, 5, 0.9, fit_ols).is_err());
}

#[test]
fn hausman_detects_strong_endogeneity() {
    let e = endogenous(50_000, 0.8, 1.0, 23);
    let t = hausman_bootstrap(&e.design, 60, 24).unwrap();
    assert_eq!(t.dof, 1);
    assert!(t.p_value < 0.01, "{t:?}");
}

#[test]
fn hausman_is_quiet_without_endogeneity() {
    let e = endogenous(20_000, 0.0, 1.0, 25);
    let t = hausman_bootstrap(&e.design, 60, 26).unwrap();
    assert!(t.p_value > 0.01, "{t:?}");
}

#[test]
fn exogenous_fixture_is_well_specified() {
    let d = dgp::exogenous(10_000, 27);
    let b = fit_ols(&d).unwrap();
    assert!((b[0] - 1.0).abs() < 0.05 && (b[1] - 2.0).abs() < 0.05);
}
