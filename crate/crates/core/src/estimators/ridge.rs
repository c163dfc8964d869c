use nalgebra::{DMatrix, DVector};

use super::design::DesignMatrices;
use super::linalg::{check_psd, pcg, weighted_cross, weighted_cross_vec};
use crate::error::{Error, Result};

/// Column centering and scaling used so that one penalty fits all
/// features. The intercept column is left untouched; other columns are
/// centered only when an intercept is present to absorb the shift.
#[derive(Clone, Debug)]
pub struct Scaling {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub intercept: Option<usize>,
}

impl Scaling {
    pub fn fit(x: &DMatrix<f64>, intercept: Option<usize>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mut mean = vec![0.0; x.ncols()];
        let mut scale = vec![1.0; x.ncols()];
        for (j, col) in x.column_iter().enumerate() {
            if Some(j) == intercept {
                continue;
            }
            let m = col.sum() / n;
            let centered = intercept.is_some();
            let ss: f64 = col.iter().map(|v| if centered { (v - m).powi(2) } else { v * v }).sum();
            let sd = (ss / n).sqrt();
            if centered {
                mean[j] = m;
            }
            if sd > 0.0 && sd.is_finite() {
                scale[j] = sd;
            }
        }
        Scaling { mean, scale, intercept }
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let (m, s) = (self.mean[j], self.scale[j]);
            if m != 0.0 || s != 1.0 {
                col.apply(|v| *v = (*v - m) / s);
            }
        }
        out
    }

    /// Coefficients on the original columns from standardized ones.
    pub fn unscale(&self, b: &DVector<f64>) -> Vec<f64> {
        let mut beta: Vec<f64> = b.iter().zip(&self.scale).map(|(b, s)| b / s).collect();
        if let Some(i) = self.intercept {
            let shift: f64 = beta.iter().zip(&self.mean).map(|(b, m)| b * m).sum();
            beta[i] -= shift;
        }
        beta
    }
}

/// Minimizes (1/n) Σ w (y − Xβ)² + Σ_j penalty_j β̃_j² over standardized
/// coefficients β̃, returning β in original units.
pub fn penalized_least_squares(
    x: &DMatrix<f64>,
    w: &[f64],
    y: &[f64],
    penalty: &[f64],
    intercept: Option<usize>,
) -> Result<Vec<f64>> {
    if x.nrows() == 0 {
        return Err(Error::Dimension("no rows to fit".into()));
    }
    let n = x.nrows() as f64;
    let scaling = Scaling::fit(x, intercept);
    let xs = scaling.apply(x);
    let mut gram = weighted_cross(&xs, w, &xs) / n;
    check_psd(&gram, "weighted Gram matrix")?;
    for (j, &lam) in penalty.iter().enumerate() {
        if Some(j) != intercept {
            gram[(j, j)] += lam;
        }
    }
    let rhs = weighted_cross_vec(&xs, w, y) / n;
    let b = pcg(&gram, &rhs)?;
    Ok(scaling.unscale(&b))
}

/// Weighted ridge regression with every non-intercept coefficient
/// penalized by `lambda` on the standardized scale.
pub fn fit_ridge(design: &DesignMatrices, lambda: f64) -> Result<Vec<f64>> {
    if !(lambda >= 0.0) {
        return Err(Error::config(format!("ridge lambda must be non-negative, got {lambda}")));
    }
    let penalty = vec![lambda; design.x.ncols()];
    penalized_least_squares(&design.x, &design.w, &design.y, &penalty, design.intercept)
}

pub fn fit_ols(design: &DesignMatrices) -> Result<Vec<f64>> {
    fit_ridge(design, 0.0)
}
