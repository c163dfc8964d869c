use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::design::DesignMatrices;
use super::linalg::{check_psd, condition_ratio, pcg, weighted_cross, weighted_cross_vec};
use super::ridge::{penalized_least_squares, Scaling};
use crate::error::{Error, Result};

/// Below this scaled condition ratio a cross-product matrix is treated as
/// rank deficient.
const RANK_TOL: f64 = 1e-13;

fn jacobi_scaled_condition(a: &DMatrix<f64>) -> f64 {
    let d: Vec<f64> = a.diagonal().iter().map(|v| if *v > 0.0 { 1.0 / v.sqrt() } else { 0.0 }).collect();
    let scaled = DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] * d[i] * d[j]);
    condition_ratio(&scaled)
}

/// Fitted first stage: X̂ = Z π̂ for every X column (exogenous columns
/// reproduce themselves) and the residuals V̂ of the endogenous ones.
#[derive(Clone, Debug)]
pub struct FirstStage {
    pub x_hat: DMatrix<f64>,
    pub endogenous: Vec<usize>,
    pub v_hat: DMatrix<f64>,
}

pub fn first_stage(design: &DesignMatrices) -> Result<FirstStage> {
    let endogenous = design.endogenous();
    let excluded = design.z.ncols() as isize - (design.x.ncols() - endogenous.len()) as isize;
    if excluded < endogenous.len() as isize {
        return Err(Error::Identification(format!(
            "{} endogenous regressor(s) but only {} excluded instrument(s)",
            endogenous.len(),
            excluded.max(0)
        )));
    }
    let n = design.nrows() as f64;
    let zz = weighted_cross(&design.z, &design.w, &design.z) / n;
    check_psd(&zz, "instrument Gram matrix")?;
    if jacobi_scaled_condition(&zz) < RANK_TOL {
        return Err(Error::Identification("instrument columns are collinear".into()));
    }
    let mut x_hat = design.x.clone();
    let mut v_hat = DMatrix::zeros(design.nrows(), endogenous.len());
    for (k, &j) in endogenous.iter().enumerate() {
        let xj: Vec<f64> = design.x.column(j).iter().copied().collect();
        let rhs = weighted_cross_vec(&design.z, &design.w, &xj) / n;
        let pi = pcg(&zz, &rhs)?;
        let fitted = &design.z * pi;
        for r in 0..design.nrows() {
            x_hat[(r, j)] = fitted[r];
            v_hat[(r, k)] = xj[r] - fitted[r];
        }
    }
    let gram = weighted_cross(&x_hat, &design.w, &x_hat) / n;
    if jacobi_scaled_condition(&gram) < RANK_TOL {
        return Err(Error::Identification("instruments do not span the endogenous regressors".into()));
    }
    Ok(FirstStage { x_hat, endogenous, v_hat })
}

/// Two-stage least squares.
pub fn fit_2sls(design: &DesignMatrices) -> Result<Vec<f64>> {
    let fs = first_stage(design)?;
    let penalty = vec![0.0; design.x.ncols()];
    penalized_least_squares(&fs.x_hat, &design.w, &design.y, &penalty, design.intercept)
}

/// Control-function estimator: regresses y on X and the first-stage
/// residuals V̂, penalizing only the V̂ coefficients. Returns (β, β_v̂).
///
/// `lambda_v = 0` gives 2SLS; as `lambda_v → ∞` β tends to OLS.
pub fn control_function_2sls(design: &DesignMatrices, lambda_v: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(lambda_v >= 0.0) {
        return Err(Error::config(format!("lambda_v must be non-negative, got {lambda_v}")));
    }
    let fs = first_stage(design)?;
    let p = design.x.ncols();
    let q = fs.endogenous.len();
    let mut aug = DMatrix::zeros(design.nrows(), p + q);
    aug.view_mut((0, 0), (design.nrows(), p)).copy_from(&design.x);
    aug.view_mut((0, p), (design.nrows(), q)).copy_from(&fs.v_hat);
    let mut penalty = vec![0.0; p + q];
    penalty[p..].fill(lambda_v);
    let b = penalized_least_squares(&aug, &design.w, &design.y, &penalty, design.intercept)?;
    Ok((b[..p].to_vec(), b[p..].to_vec()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Identity,
    #[default]
    DiagonalTwoStep,
}

/// Moment vector ĝ = Z' W ε / n.
pub fn moments(design: &DesignMatrices, beta: &[f64]) -> DVector<f64> {
    let pred = design.predict(beta);
    let resid: Vec<f64> = design.y.iter().zip(&pred).map(|(y, p)| y - p).collect();
    weighted_cross_vec(&design.z, &design.w, &resid) / design.nrows() as f64
}

/// Per-instrument variance of the moment contributions w z ε.
fn moment_variance(design: &DesignMatrices, beta: &[f64]) -> Vec<f64> {
    let n = design.nrows() as f64;
    let pred = design.predict(beta);
    let g = moments(design, beta);
    let mut v = vec![0.0; design.z.ncols()];
    for (k, col) in design.z.column_iter().enumerate() {
        let ss: f64 = (0..design.nrows())
            .map(|r| (design.w[r] * col[r] * (design.y[r] - pred[r])).powi(2))
            .sum();
        v[k] = ss / n - g[k] * g[k];
    }
    let max = v.iter().fold(0.0_f64, |m, &x| m.max(x));
    let floor = if max > 0.0 { max * 1e-12 } else { 1.0 };
    v.iter().map(|&x| x.max(floor)).collect()
}

fn gmm_solve(design: &DesignMatrices, lambda: f64, omega_inv: &[f64]) -> Result<Vec<f64>> {
    let n = design.nrows() as f64;
    let scaling = Scaling::fit(&design.x, design.intercept);
    let xs = scaling.apply(&design.x);
    let szx = weighted_cross(&design.z, &design.w, &xs) / n;
    let szy = weighted_cross_vec(&design.z, &design.w, &design.y) / n;
    let oinv = DVector::from_column_slice(omega_inv);
    let weighted = DMatrix::from_fn(szx.nrows(), szx.ncols(), |i, j| szx[(i, j)] * oinv[i]);
    let mut a = szx.transpose() * &weighted;
    if jacobi_scaled_condition(&a) < RANK_TOL * RANK_TOL {
        return Err(Error::Identification("instruments do not span the regressors".into()));
    }
    for j in 0..a.nrows() {
        if Some(j) != design.intercept {
            a[(j, j)] += lambda;
        }
    }
    let b = weighted.transpose() * szy;
    Ok(scaling.unscale(&pcg(&a, &b)?))
}

/// GMM objective ĝ' Ω⁻¹ ĝ at `beta`.
pub fn gmm_objective(design: &DesignMatrices, beta: &[f64], omega_inv: &[f64]) -> f64 {
    moments(design, beta).iter().zip(omega_inv).map(|(g, o)| g * g * o).sum()
}

/// Ridge-penalized linear GMM with identity or diagonal two-step weighting.
/// Returns (β, ĝ'Ω⁻¹ĝ).
pub fn gmm_iv(design: &DesignMatrices, lambda: f64, weighting: Weighting) -> Result<(Vec<f64>, f64)> {
    if !(lambda >= 0.0) {
        return Err(Error::config(format!("GMM lambda must be non-negative, got {lambda}")));
    }
    let endogenous = design.endogenous().len();
    let exogenous = design.x.ncols() - endogenous;
    if design.z.ncols() < exogenous + endogenous {
        return Err(Error::Identification(format!(
            "{} instruments for {} regressors",
            design.z.ncols(),
            design.x.ncols()
        )));
    }
    let identity = vec![1.0; design.z.ncols()];
    let beta = gmm_solve(design, lambda, &identity)?;
    match weighting {
        Weighting::Identity => {
            let obj = gmm_objective(design, &beta, &identity);
            Ok((beta, obj))
        }
        Weighting::DiagonalTwoStep => {
            let omega_inv: Vec<f64> = moment_variance(design, &beta).iter().map(|v| 1.0 / v).collect();
            let beta = gmm_solve(design, lambda, &omega_inv)?;
            let obj = gmm_objective(design, &beta, &omega_inv);
            Ok((beta, obj))
        }
    }
}
