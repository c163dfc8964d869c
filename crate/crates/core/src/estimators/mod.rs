//! Weighted ridge, instrumental-variable estimators, the Hausman test and
//! statistic-driven blending between them, with Bayesian-bootstrap
//! inference.

pub mod bootstrap;
pub mod design;
pub mod hausman;
pub mod hcc;
pub mod iv;
pub mod linalg;
pub mod ridge;

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

pub use bootstrap::{bayesian_bootstrap, BootstrapResult};
pub use design::DesignMatrices;
pub use hausman::{hausman_statistic, HausmanTest};
pub use hcc::{default_lambda_grid, fit_hcc, fit_hcc_fixed, HccFit, LAMBDA_INF};
pub use iv::{control_function_2sls, first_stage, fit_2sls, gmm_iv, Weighting};
pub use ridge::{fit_ols, fit_ridge};

use crate::error::{Error, Result};
use crate::features::FeatureSet;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub r_squared: f64,
    pub gmm_objective: f64,
    pub hausman_h: f64,
    pub hausman_dof: usize,
    pub hausman_p_value: f64,
}

/// Fitted coefficients on the regressor columns, named by their canonical
/// feature-key strings, with bootstrap replicates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSet {
    pub keys: Vec<String>,
    pub beta: Vec<f64>,
    pub lambda_ridge: f64,
    pub lambda_hcc: f64,
    #[serde(default)]
    pub draws: Vec<Vec<f64>>,
    pub diagnostics: Diagnostics,
    #[serde(default)]
    pub feature_config_hash: String,
}

impl CoefficientSet {
    /// A coefficient set over every key of `features` (zero for keys absent
    /// from `named`), for hand-specified models.
    pub fn from_named(features: &FeatureSet, named: &[(&str, f64)]) -> Result<Self> {
        let keys = features.names();
        let mut beta = vec![0.0; keys.len()];
        for (name, b) in named {
            let i = keys
                .iter()
                .position(|k| k == name)
                .ok_or_else(|| Error::config(format!("unknown feature key {name}")))?;
            beta[i] = *b;
        }
        Ok(CoefficientSet {
            keys,
            beta,
            lambda_ridge: 0.0,
            lambda_hcc: 0.0,
            draws: Vec::new(),
            diagnostics: Diagnostics::default(),
            feature_config_hash: features.config_hash(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta.len() != self.keys.len() {
            return Err(Error::config(format!("{} coefficients for {} keys", self.beta.len(), self.keys.len())));
        }
        if let Some(d) = self.draws.iter().find(|d| d.len() != self.keys.len()) {
            return Err(Error::config(format!("bootstrap draw has {} entries for {} keys", d.len(), self.keys.len())));
        }
        Ok(())
    }

    fn align(&self, features: &FeatureSet, beta: &[f64]) -> Result<Vec<f64>> {
        let names = features.names();
        for k in &self.keys {
            if !names.contains(k) {
                return Err(Error::config(format!("coefficient key {k} is not in the feature configuration")));
            }
        }
        names
            .iter()
            .zip(features.keys())
            .map(|(name, key)| match self.keys.iter().position(|k| k == name) {
                Some(i) => Ok(beta[i]),
                None if key.is_instrument() => Ok(0.0),
                None => Err(Error::config(format!("feature key {name} has no coefficient"))),
            })
            .collect()
    }

    /// Coefficients aligned with the keys of `features` (instruments get 0).
    pub fn aligned(&self, features: &FeatureSet) -> Result<Vec<f64>> {
        self.align(features, &self.beta)
    }

    pub fn aligned_draws(&self, features: &FeatureSet) -> Result<Vec<Vec<f64>>> {
        self.draws.iter().map(|d| self.align(features, d)).collect()
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }

    pub fn read_json<R: Read>(input: R) -> Result<Self> {
        let c: CoefficientSet = serde_json::from_reader(input)?;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    #[serde(default = "default_lambda_grid")]
    pub lambda_grid: Vec<f64>,
    #[serde(default)]
    pub weighting: Weighting,
    /// Bootstrap draws kept with the coefficients (CIs, Thompson sampling).
    #[serde(default = "default_draws")]
    pub n_draws: usize,
    #[serde(default = "default_multiplier")]
    pub variance_multiplier: f64,
    #[serde(default = "default_level")]
    pub ci_level: f64,
    /// Bootstrap draws used for the Hausman variances (0 disables the test).
    #[serde(default = "default_hausman_draws")]
    pub hausman_draws: usize,
}

fn default_draws() -> usize {
    20
}

fn default_multiplier() -> f64 {
    1.0
}

fn default_level() -> f64 {
    0.9
}

fn default_hausman_draws() -> usize {
    100
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            lambda_grid: default_lambda_grid(),
            weighting: Weighting::default(),
            n_draws: default_draws(),
            variance_multiplier: default_multiplier(),
            ci_level: default_level(),
            hausman_draws: default_hausman_draws(),
        }
    }
}

/// Hausman test of OLS against 2SLS on the endogenous coefficients, with
/// both variances taken from the same Bayesian-bootstrap draws.
pub fn hausman_bootstrap(design: &DesignMatrices, n_draws: usize, seed: u64) -> Result<HausmanTest> {
    let endog = design.endogenous();
    let p = design.x.ncols();
    let both = bayesian_bootstrap(design, n_draws, 1.0, seed, 0.9, |d| {
        let mut b = fit_2sls(d)?;
        b.extend(fit_ols(d)?);
        Ok(b)
    })?;
    let iv_cols: Vec<usize> = endog.clone();
    let ols_cols: Vec<usize> = endog.iter().map(|j| j + p).collect();
    let var_iv = hausman::draw_covariance(&both.draws, &iv_cols);
    let var_ols = hausman::draw_covariance(&both.draws, &ols_cols);
    let b_iv = fit_2sls(design)?;
    let b_ols = fit_ols(design)?;
    let pick = |b: &[f64]| endog.iter().map(|&j| b[j]).collect::<Vec<_>>();
    hausman_statistic(&pick(&b_iv), &pick(&b_ols), &var_iv, &var_ols)
}

/// Full fit: HCC with held-out penalty selection, bootstrap draws at the
/// selected penalties and the Hausman diagnostic.
pub fn fit_model(
    train: &DesignMatrices,
    holdout: &DesignMatrices,
    config: &EstimatorConfig,
    seed: u64,
) -> Result<CoefficientSet> {
    let fit = fit_hcc(train, &config.lambda_grid, holdout)?;
    let draws = if config.n_draws >= 2 {
        bayesian_bootstrap(train, config.n_draws, config.variance_multiplier, seed, config.ci_level, |d| {
            fit_hcc_fixed(d, fit.lambda_ridge, fit.lambda_hcc)
        })?
        .draws
    } else {
        Vec::new()
    };
    let mut diagnostics = Diagnostics {
        r_squared: train.r_squared(&fit.beta),
        gmm_objective: fit.holdout_objective,
        hausman_p_value: 1.0,
        ..Default::default()
    };
    if config.hausman_draws >= 2 && !train.endogenous().is_empty() {
        let test = hausman_bootstrap(train, config.hausman_draws, seed ^ 0x4841_5553)?;
        diagnostics.hausman_h = test.h;
        diagnostics.hausman_dof = test.dof;
        diagnostics.hausman_p_value = test.p_value;
    }
    Ok(CoefficientSet {
        keys: train.x_names.clone(),
        beta: fit.beta,
        lambda_ridge: fit.lambda_ridge,
        lambda_hcc: fit.lambda_hcc,
        draws,
        diagnostics,
        feature_config_hash: String::new(),
    })
}
