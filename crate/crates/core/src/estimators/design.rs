use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::panel::Panel;

/// Aligned regressors X, instruments Z, outcomes and sample weights.
///
/// Columns named in both X and Z are exogenous; X columns absent from Z
/// are endogenous. `groups` maps rows to resampling units (users).
#[derive(Clone, Debug)]
pub struct DesignMatrices {
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub y: Vec<f64>,
    pub w: Vec<f64>,
    pub groups: Vec<usize>,
    pub n_groups: usize,
    pub x_names: Vec<String>,
    pub z_names: Vec<String>,
    /// Index of the unpenalized intercept column in X.
    pub intercept: Option<usize>,
}

impl DesignMatrices {
    pub fn new(
        x: DMatrix<f64>,
        z: DMatrix<f64>,
        y: Vec<f64>,
        w: Vec<f64>,
        x_names: Vec<String>,
        z_names: Vec<String>,
        intercept: Option<usize>,
    ) -> Result<Self> {
        let n = x.nrows();
        if z.nrows() != n || y.len() != n || w.len() != n {
            return Err(Error::Dimension(format!(
                "rows: X {n}, Z {}, y {}, w {}",
                z.nrows(),
                y.len(),
                w.len()
            )));
        }
        if x_names.len() != x.ncols() || z_names.len() != z.ncols() {
            return Err(Error::Dimension("column names do not match matrix widths".into()));
        }
        if intercept.is_some_and(|i| i >= x.ncols()) {
            return Err(Error::Dimension("intercept index outside X".into()));
        }
        Ok(DesignMatrices { x, z, y, w, groups: (0..n).collect(), n_groups: n, x_names, z_names, intercept })
    }

    /// Ordinary regression design: every regressor instruments itself.
    pub fn exogenous(x: DMatrix<f64>, y: Vec<f64>, w: Vec<f64>, names: Vec<String>, intercept: Option<usize>) -> Result<Self> {
        Self::new(x.clone(), x, y, w, names.clone(), names, intercept)
    }

    pub fn with_groups(mut self, groups: Vec<usize>) -> Result<Self> {
        if groups.len() != self.nrows() {
            return Err(Error::Dimension("group labels do not match rows".into()));
        }
        self.n_groups = groups.iter().copied().max().map_or(0, |m| m + 1);
        self.groups = groups;
        Ok(self)
    }

    /// X from ad-effect and exogenous keys, Z from instruments and
    /// exogenous keys; rows grouped by user.
    pub fn from_panel(panel: &Panel, features: &FeatureSet) -> Result<Self> {
        if panel.names != features.names() {
            return Err(Error::config("panel columns do not match the feature configuration"));
        }
        let keys = features.keys();
        let x_idx: Vec<usize> = (0..keys.len()).filter(|&i| keys[i].is_ad_effect() || keys[i].is_exogenous()).collect();
        let z_idx: Vec<usize> = (0..keys.len()).filter(|&i| keys[i].is_instrument() || keys[i].is_exogenous()).collect();
        let n = panel.rows.len();
        let x = DMatrix::from_fn(n, x_idx.len(), |r, c| panel.rows[r].frame.columns[x_idx[c]]);
        let z = DMatrix::from_fn(n, z_idx.len(), |r, c| panel.rows[r].frame.columns[z_idx[c]]);
        let y = panel.rows.iter().map(|r| r.frame.y).collect();
        let w = panel.rows.iter().map(|r| r.frame.weight).collect();
        let names = features.names();
        let intercept = x_idx.iter().position(|&i| keys[i].is_intercept());
        let mut groups = Vec::with_capacity(n);
        let mut g = 0;
        for (r, row) in panel.rows.iter().enumerate() {
            if r > 0 && row.frame.user_id != panel.rows[r - 1].frame.user_id {
                g += 1;
            }
            groups.push(g);
        }
        Self::new(
            x,
            z,
            y,
            w,
            x_idx.iter().map(|&i| names[i].clone()).collect(),
            z_idx.iter().map(|&i| names[i].clone()).collect(),
            intercept,
        )?
        .with_groups(groups)
    }

    pub fn nrows(&self) -> usize {
        self.x.nrows()
    }

    /// X columns that do not appear among the instruments.
    pub fn endogenous(&self) -> Vec<usize> {
        (0..self.x_names.len()).filter(|&j| !self.z_names.contains(&self.x_names[j])).collect()
    }

    /// Same design with the sample weights multiplied row-wise.
    pub fn reweighted(&self, factors: &[f64]) -> Self {
        let mut d = self.clone();
        for (w, f) in d.w.iter_mut().zip(factors) {
            *w *= f;
        }
        d
    }

    /// Rows whose group satisfies `keep`.
    pub fn select_groups(&self, keep: impl Fn(usize) -> bool) -> Self {
        let rows: Vec<usize> = (0..self.nrows()).filter(|&r| keep(self.groups[r])).collect();
        let x = self.x.select_rows(rows.iter());
        let z = self.z.select_rows(rows.iter());
        let pick = |v: &[f64]| rows.iter().map(|&r| v[r]).collect::<Vec<_>>();
        let mut remap = std::collections::BTreeMap::new();
        let groups: Vec<usize> = rows
            .iter()
            .map(|&r| {
                let next = remap.len();
                *remap.entry(self.groups[r]).or_insert(next)
            })
            .collect();
        DesignMatrices {
            x,
            z,
            y: pick(&self.y),
            w: pick(&self.w),
            n_groups: remap.len(),
            groups,
            x_names: self.x_names.clone(),
            z_names: self.z_names.clone(),
            intercept: self.intercept,
        }
    }

    /// Weighted residual sum of squares of `beta`, per row.
    pub fn mse(&self, beta: &[f64]) -> f64 {
        let pred = self.predict(beta);
        let s: f64 = pred.iter().zip(&self.y).zip(&self.w).map(|((p, y), w)| w * (y - p).powi(2)).sum();
        s / self.nrows() as f64
    }

    pub fn predict(&self, beta: &[f64]) -> Vec<f64> {
        let b = nalgebra::DVector::from_column_slice(beta);
        (&self.x * b).iter().copied().collect()
    }

    /// Weighted R², negative when the fit is worse than the weighted mean.
    pub fn r_squared(&self, beta: &[f64]) -> f64 {
        let sw: f64 = self.w.iter().sum();
        let mean = self.y.iter().zip(&self.w).map(|(y, w)| y * w).sum::<f64>() / sw;
        let tss: f64 = self.y.iter().zip(&self.w).map(|(y, w)| w * (y - mean).powi(2)).sum();
        let rss = self.mse(beta) * self.nrows() as f64;
        if tss == 0.0 {
            return if rss == 0.0 { 1.0 } else { f64::NEG_INFINITY };
        }
        1.0 - rss / tss
    }
}
