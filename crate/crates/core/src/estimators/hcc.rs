//! Hausman Causal Correction by regression on the residual: a ridge
//! (correlational) fit, then a penalized IV fit of its residual, with both
//! penalties chosen on held-out users.

use serde::{Deserialize, Serialize};

use super::design::DesignMatrices;
use super::iv::{first_stage, moments, FirstStage};
use super::ridge::{fit_ridge, penalized_least_squares};
use crate::error::{Error, Result};

/// Stand-in for an infinite penalty.
pub const LAMBDA_INF: f64 = 1e12;

pub fn default_lambda_grid() -> Vec<f64> {
    let mut grid = vec![0.0];
    grid.extend((-4..=4).map(|e| 10f64.powi(e)));
    grid.push(LAMBDA_INF);
    grid
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HccFit {
    pub beta: Vec<f64>,
    pub beta_corr: Vec<f64>,
    pub beta_hcc: Vec<f64>,
    pub lambda_ridge: f64,
    pub lambda_hcc: f64,
    /// Held-out moment norm at the selected penalty.
    pub holdout_objective: f64,
    /// (λ, holdout MSE) of the correlational stage.
    pub ridge_path: Vec<(f64, f64)>,
    /// (λ, holdout moment norm) of the correction stage.
    pub hcc_path: Vec<(f64, f64)>,
}

/// Root mean square of each instrument column, used to make the held-out
/// moment norm invariant to instrument units.
fn instrument_scale(design: &DesignMatrices) -> Vec<f64> {
    let n = design.nrows().max(1) as f64;
    design
        .z
        .column_iter()
        .map(|c| {
            let rms = (c.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
            if rms > 0.0 {
                rms
            } else {
                1.0
            }
        })
        .collect()
}

/// ‖Z̃' W ε / n‖² on `design` with instruments divided by `scale`.
pub fn scaled_moment_norm(design: &DesignMatrices, beta: &[f64], scale: &[f64]) -> f64 {
    moments(design, beta).iter().zip(scale).map(|(g, s)| (g / s).powi(2)).sum()
}

fn correction(design: &DesignMatrices, fs: &FirstStage, beta_corr: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let pred = design.predict(beta_corr);
    let resid: Vec<f64> = design.y.iter().zip(&pred).map(|(y, p)| y - p).collect();
    let penalty = vec![lambda; design.x.ncols()];
    penalized_least_squares(&fs.x_hat, &design.w, &resid, &penalty, design.intercept)
}

pub fn fit_hcc(design: &DesignMatrices, lambda_grid: &[f64], holdout: &DesignMatrices) -> Result<HccFit> {
    if lambda_grid.is_empty() {
        return Err(Error::config("empty lambda grid"));
    }
    if let Some(bad) = lambda_grid.iter().find(|l| !(**l >= 0.0)) {
        return Err(Error::config(format!("lambda grid value {bad} is negative")));
    }
    if holdout.nrows() == 0 || holdout.y.iter().all(|y| *y == 0.0) {
        return Err(Error::NoPositives("holdout sample has no positive outcomes".into()));
    }
    if holdout.x_names != design.x_names || holdout.z_names != design.z_names {
        return Err(Error::Dimension("holdout columns differ from the training design".into()));
    }

    let mut ridge_path = Vec::with_capacity(lambda_grid.len());
    let mut best: Option<(f64, f64, Vec<f64>)> = None;
    for &lam in lambda_grid {
        let beta = fit_ridge(design, lam)?;
        let mse = holdout.mse(&beta);
        ridge_path.push((lam, mse));
        if best.as_ref().is_none_or(|(_, m, _)| mse < *m) {
            best = Some((lam, mse, beta));
        }
    }
    let (lambda_ridge, _, beta_corr) = best.expect("non-empty grid");

    let fs = first_stage(design)?;
    let scale = instrument_scale(design);
    let mut hcc_path = Vec::with_capacity(lambda_grid.len());
    let mut best: Option<(f64, f64, Vec<f64>)> = None;
    for &lam in lambda_grid {
        let corr = correction(design, &fs, &beta_corr, lam)?;
        let beta: Vec<f64> = beta_corr.iter().zip(&corr).map(|(a, b)| a + b).collect();
        let obj = scaled_moment_norm(holdout, &beta, &scale);
        hcc_path.push((lam, obj));
        if best.as_ref().is_none_or(|(_, o, _)| obj < *o) {
            best = Some((lam, obj, corr));
        }
    }
    let (lambda_hcc, holdout_objective, beta_hcc) = best.expect("non-empty grid");
    let beta = beta_corr.iter().zip(&beta_hcc).map(|(a, b)| a + b).collect();
    Ok(HccFit { beta, beta_corr, beta_hcc, lambda_ridge, lambda_hcc, holdout_objective, ridge_path, hcc_path })
}

/// HCC at fixed penalties, as refit inside bootstrap draws.
pub fn fit_hcc_fixed(design: &DesignMatrices, lambda_ridge: f64, lambda_hcc: f64) -> Result<Vec<f64>> {
    let beta_corr = fit_ridge(design, lambda_ridge)?;
    let fs = first_stage(design)?;
    let corr = correction(design, &fs, &beta_corr, lambda_hcc)?;
    Ok(beta_corr.iter().zip(&corr).map(|(a, b)| a + b).collect())
}
