use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::linalg::clipped_pinv;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HausmanTest {
    pub h: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// H = d' (V_iv − V_ols)⁺ d with d = β_iv − β_ols. The variance difference
/// is clipped to its positive eigen-directions before inversion and the
/// degrees of freedom are the rank that survives.
pub fn hausman_statistic(
    beta_iv: &[f64],
    beta_ols: &[f64],
    var_iv: &DMatrix<f64>,
    var_ols: &DMatrix<f64>,
) -> Result<HausmanTest> {
    let p = beta_iv.len();
    if beta_ols.len() != p || var_iv.shape() != (p, p) || var_ols.shape() != (p, p) {
        return Err(Error::Dimension(format!(
            "hausman inputs: beta {} and {}, variances {:?} and {:?}",
            p,
            beta_ols.len(),
            var_iv.shape(),
            var_ols.shape()
        )));
    }
    let d = DVector::from_iterator(p, beta_iv.iter().zip(beta_ols).map(|(a, b)| a - b));
    let (inv, dof) = clipped_pinv(&(var_iv - var_ols));
    if dof == 0 {
        return Ok(HausmanTest { h: 0.0, dof: 0, p_value: 1.0 });
    }
    let h = d.dot(&(&inv * &d)).max(0.0);
    let chi = ChiSquared::new(dof as f64).expect("positive degrees of freedom");
    Ok(HausmanTest { h, dof, p_value: chi.sf(h) })
}

/// Sample covariance of the rows of `draws` restricted to `columns`.
pub fn draw_covariance(draws: &[Vec<f64>], columns: &[usize]) -> DMatrix<f64> {
    let m = draws.len() as f64;
    let p = columns.len();
    let mean: Vec<f64> = columns.iter().map(|&j| draws.iter().map(|d| d[j]).sum::<f64>() / m).collect();
    DMatrix::from_fn(p, p, |a, b| {
        draws.iter().map(|d| (d[columns[a]] - mean[a]) * (d[columns[b]] - mean[b])).sum::<f64>() / (m - 1.0)
    })
}
