//! End-to-end Monte Carlo scenarios on synthetic ground truth: feedback
//! bias under coarse aggregation, the HCC drift from OLS to 2SLS with
//! sample size, negative down-sampling efficiency, Hausman and bootstrap
//! calibration, and campaign attribution identities.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{Attribution, SliceFilter};
use crate::bidding::RandomizationLevel;
use crate::error::{Error, Result};
use crate::estimators::{
    bayesian_bootstrap, default_lambda_grid, fit_2sls, fit_hcc, fit_ols, gmm_iv, hausman_bootstrap, DesignMatrices,
    Weighting,
};
use crate::events::EventTimeline;
use crate::features::{FeatureKey, FeatureSet};
use crate::kernels::{FourierSpec, KernelSpec};
use crate::panel::{build_panel, PanelConfig};
use crate::simulator::{
    simulate, AlphaSpec, CharacteristicSpec, ClearingPrice, Confounding, Feedback, MarketConfig, TrueCoefficient,
};

const HOUR: f64 = 3600.0;
const DAY: f64 = 86_400.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Fig6,
    Fig10,
    Downsample,
    Calibration,
    Attribution,
}

impl Scenario {
    pub const ALL: [Scenario; 5] =
        [Scenario::Fig6, Scenario::Fig10, Scenario::Downsample, Scenario::Calibration, Scenario::Attribution];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Fig6 => "fig6",
            Scenario::Fig10 => "fig10",
            Scenario::Downsample => "downsample",
            Scenario::Calibration => "calibration",
            Scenario::Attribution => "attribution",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::config(format!("unknown scenario {s:?}; expected one of fig6, fig10, downsample, calibration, attribution")))
    }
}

/// Mean, standard deviation and standard error of the mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub se: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if n == 0.0 {
            return Summary::default();
        }
        let mean = values.iter().sum::<f64>() / n;
        let var = if n > 1.0 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        Summary { mean, sd: var.sqrt(), se: (var / n).sqrt() }
    }

    pub fn variance(&self) -> f64 {
        self.sd * self.sd
    }
}

/// Independent seed for replication `rep` of a scenario.
pub fn replication_seed(seed: u64, rep: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep + 1);
    rng.random()
}

fn ad_key_index(names: &[String]) -> Result<usize> {
    names
        .iter()
        .position(|n| n.starts_with("ad_stock"))
        .ok_or_else(|| Error::config("model has no ad_stock column"))
}

// ---------------------------------------------------------------- fig6

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fig6Config {
    pub market: MarketConfig,
    pub replications: usize,
    /// Aggregation window of the discretized baseline, seconds.
    pub bin_width: f64,
    pub panel_ratio_c: f64,
}

impl Default for Fig6Config {
    fn default() -> Self {
        Fig6Config {
            market: MarketConfig {
                n_users: 100_000,
                horizon: 8.0 * HOUR,
                auction_end: None,
                auction_rate: 2.0 / HOUR,
                clearing_price: ClearingPrice { mu: 2.5f64.ln(), sigma: 0.5 },
                true_alpha: AlphaSpec { constant: 0.05 / HOUR, amplitude: 0.0, period: DAY },
                true_beta: vec![TrueCoefficient {
                    key: FeatureKey::ad_stock(KernelSpec::exponential(600.0)),
                    beta: 0.05,
                }],
                confounding: Confounding::None,
                feedback: Feedback::NegativeTargeting { cooldown: 2700.0 },
                randomization_level: RandomizationLevel::BidLevel,
                submit_probability_p: 0.5,
                margin_value_mv: 50.0,
                bid_noise_sd: 0.3,
                characteristics: Vec::new(),
                p_viewable: 1.0,
                retarget_rate: 0.0,
                retarget_kinds: vec!["homepage".into()],
                p_win_noise_sd: 0.0,
                conversion_value: 1.0,
                margin: 1.0,
                rng_seed: 0,
            },
            replications: 50,
            bin_width: HOUR,
            panel_ratio_c: 5.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fig6Replication {
    pub binned_ols: f64,
    pub continuous_ols: f64,
    pub continuous_iv: f64,
    pub realized_incremental: f64,
    pub conversions: usize,
    pub impressions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fig6Report {
    pub true_beta: f64,
    pub n_users: usize,
    pub bin_width: f64,
    pub cooldown: Option<f64>,
    pub binned_ols: Summary,
    pub continuous_ols: Summary,
    pub continuous_iv: Summary,
    pub replications: Vec<Fig6Replication>,
}

impl Fig6Report {
    /// Relative error of the mean binned estimate.
    pub fn binned_relative_bias(&self) -> f64 {
        (self.binned_ols.mean - self.true_beta) / self.true_beta
    }

    /// Distance of the mean IV estimate from the truth in standard errors.
    pub fn iv_z(&self) -> f64 {
        (self.continuous_iv.mean - self.true_beta) / self.continuous_iv.se
    }

    pub fn table(&self) -> String {
        let mut s = String::from("estimator,mean,sd,se,relative_bias\n");
        for (name, v) in
            [("binned_ols", &self.binned_ols), ("continuous_ols", &self.continuous_ols), ("continuous_iv", &self.continuous_iv)]
        {
            let _ = writeln!(s, "{name},{},{},{},{}", v.mean, v.sd, v.se, (v.mean - self.true_beta) / self.true_beta);
        }
        s
    }
}

/// Per-bin OLS of conversion counts on impression counts in the same and
/// the previous bin; the effect estimate is the sum of both slopes.
pub fn binned_ols(timelines: &[EventTimeline], bin_width: f64) -> Result<f64> {
    let mut rows: Vec<[f64; 4]> = Vec::new();
    for tl in timelines {
        let n_bins = ((tl.t_end - tl.t_start) / bin_width).floor() as usize;
        if n_bins == 0 {
            continue;
        }
        let bin = |t: f64| ((t - tl.t_start) / bin_width) as usize;
        let mut imps = vec![0.0; n_bins];
        let mut convs = vec![0.0; n_bins];
        for b in tl.bids.iter().filter(|b| b.won) {
            if let Some(v) = imps.get_mut(bin(b.t_j)) {
                *v += 1.0;
            }
        }
        for c in &tl.conversions {
            if let Some(v) = convs.get_mut(bin(c.t_c)) {
                *v += 1.0;
            }
        }
        for h in 0..n_bins {
            let lag = if h > 0 { imps[h - 1] } else { 0.0 };
            rows.push([1.0, imps[h], lag, convs[h]]);
        }
    }
    let n = rows.len();
    let x = DMatrix::from_fn(n, 3, |r, c| rows[r][c]);
    let y = rows.iter().map(|r| r[3]).collect();
    let names = vec!["one".into(), "impressions".into(), "impressions_lag".into()];
    let design = DesignMatrices::exogenous(x, y, vec![1.0; n], names, Some(0))?;
    let b = fit_ols(&design)?;
    Ok(b[1] + b[2])
}

fn single_ad_kernel(market: &MarketConfig) -> Result<(KernelSpec, f64)> {
    match market.true_beta.as_slice() {
        [c] if c.key.fourier.is_none() && c.key.retarget_tau.is_none() => {
            Ok((c.key.kernel.expect("ad-effect key"), c.beta))
        }
        _ => Err(Error::config("this scenario needs exactly one plain ad-stock coefficient")),
    }
}

pub fn run_fig6(config: &Fig6Config, seed: u64) -> Result<Fig6Report> {
    if config.replications < 2 || !(config.bin_width > 0.0) {
        return Err(Error::config("fig6 needs at least 2 replications and a positive bin width"));
    }
    let (kernel, beta) = single_ad_kernel(&config.market)?;
    let features = FeatureSet::new(vec![
        FeatureKey::intercept(),
        FeatureKey::ghost(kernel),
        FeatureKey::ad_stock(kernel),
        FeatureKey::potential(kernel),
    ])?;
    let mut reps = Vec::with_capacity(config.replications);
    for rep in 0..config.replications {
        let rep_seed = replication_seed(seed, rep as u64);
        let market = MarketConfig { rng_seed: rep_seed, ..config.market.clone() };
        let sim = simulate(&market)?;
        let binned = binned_ols(&sim.timelines, config.bin_width)?;
        let panel_config =
            PanelConfig { ratio_c: config.panel_ratio_c, rng_seed: rep_seed, add_double_negatives: true, holdout_fraction: 0.0 };
        let panel = build_panel(&sim.timelines, &features, &panel_config)?;
        let design = DesignMatrices::from_panel(&panel, &features)?;
        let ad = ad_key_index(&design.x_names)?;
        let ols = fit_ols(&design)?;
        let (iv, _) = gmm_iv(&design, 0.0, Weighting::DiagonalTwoStep)?;
        log::info!("fig6 replication {rep}: binned {binned:.4}, ols {:.4}, iv {:.4}", ols[ad], iv[ad]);
        reps.push(Fig6Replication {
            binned_ols: binned,
            continuous_ols: ols[ad],
            continuous_iv: iv[ad],
            realized_incremental: sim.truth.realized_incremental,
            conversions: sim.truth.n_conversions,
            impressions: sim.truth.n_impressions,
        });
    }
    let pick = |f: fn(&Fig6Replication) -> f64| Summary::of(&reps.iter().map(f).collect::<Vec<_>>());
    Ok(Fig6Report {
        true_beta: beta,
        n_users: config.market.n_users,
        bin_width: config.bin_width,
        cooldown: match config.market.feedback {
            Feedback::NegativeTargeting { cooldown } => Some(cooldown),
            _ => None,
        },
        binned_ols: pick(|r| r.binned_ols),
        continuous_ols: pick(|r| r.continuous_ols),
        continuous_iv: pick(|r| r.continuous_iv),
        replications: reps,
    })
}

// ---------------------------------------------------------------- linear DGP

/// Linear model with one endogenous regressor: x = πz + v,
/// ε = ρv + √(1−ρ²)e, y = 0.5 + βx + ε, each row its own group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearDgp {
    pub beta: f64,
    pub rho: f64,
    pub pi: f64,
}

impl LinearDgp {
    pub fn design(&self, n: usize, seed: u64) -> Result<DesignMatrices> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = DMatrix::zeros(n, 2);
        let mut z = DMatrix::zeros(n, 2);
        let mut y = Vec::with_capacity(n);
        let s = (1.0 - self.rho * self.rho).sqrt();
        for r in 0..n {
            let zr: f64 = rng.sample(StandardNormal);
            let v: f64 = rng.sample(StandardNormal);
            let e: f64 = rng.sample(StandardNormal);
            let xr = self.pi * zr + v;
            x[(r, 0)] = 1.0;
            x[(r, 1)] = xr;
            z[(r, 0)] = 1.0;
            z[(r, 1)] = zr;
            y.push(0.5 + self.beta * xr + self.rho * v + s * e);
        }
        DesignMatrices::new(x, z, y, vec![1.0; n], vec!["one".into(), "x".into()], vec!["one".into(), "z".into()], Some(0))
    }

    /// Training and holdout designs from one sample of n rows.
    pub fn split(&self, n: usize, holdout_fraction: f64, seed: u64) -> Result<(DesignMatrices, DesignMatrices)> {
        let all = self.design(n, seed)?;
        let n_hold = ((n as f64) * holdout_fraction).round() as usize;
        let cut = n - n_hold;
        Ok((all.select_groups(|g| g < cut), all.select_groups(|g| g >= cut)))
    }
}

// ---------------------------------------------------------------- fig10

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fig10Config {
    pub dgp: LinearDgp,
    pub sizes: Vec<usize>,
    pub replications: Vec<usize>,
    pub holdout_fraction: f64,
    pub lambda_grid: Vec<f64>,
}

impl Default for Fig10Config {
    fn default() -> Self {
        Fig10Config {
            dgp: LinearDgp { beta: 1.0, rho: 0.1, pi: 0.1 },
            sizes: vec![4_000, 43_344, 400_000],
            replications: vec![200, 200, 30],
            holdout_fraction: 0.2,
            lambda_grid: default_lambda_grid(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fig10Row {
    pub n: usize,
    pub replications: usize,
    pub rmse_hcc_ols: f64,
    pub rmse_hcc_2sls: f64,
    pub mean_hcc: f64,
    pub mean_ols: f64,
    pub mean_2sls: f64,
    /// Share of replications selecting the unpenalized correction.
    pub share_lambda_zero: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fig10Report {
    pub dgp: LinearDgp,
    pub rows: Vec<Fig10Row>,
}

impl Fig10Report {
    pub fn table(&self) -> String {
        let mut s = String::from("n,replications,rmse_hcc_ols,rmse_hcc_2sls,mean_hcc,mean_ols,mean_2sls,share_lambda_zero\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.n, r.replications, r.rmse_hcc_ols, r.rmse_hcc_2sls, r.mean_hcc, r.mean_ols, r.mean_2sls, r.share_lambda_zero
            );
        }
        s
    }
}

pub fn run_fig10(config: &Fig10Config, seed: u64) -> Result<Fig10Report> {
    if config.sizes.len() != config.replications.len() {
        return Err(Error::config("fig10 sizes and replications differ in length"));
    }
    let mut rows = Vec::new();
    for (k, (&n, &reps)) in config.sizes.iter().zip(&config.replications).enumerate() {
        if reps == 0 {
            return Err(Error::config("fig10 needs at least one replication per size"));
        }
        let size_seed = replication_seed(seed, k as u64);
        let fits: Vec<[f64; 4]> = (0..reps as u64)
            .into_par_iter()
            .map(|rep| {
                let (train, holdout) = config.dgp.split(n, config.holdout_fraction, replication_seed(size_seed, rep))?;
                let hcc = fit_hcc(&train, &config.lambda_grid, &holdout)?;
                let ols = fit_ols(&train)?;
                let iv = fit_2sls(&train)?;
                Ok([hcc.beta[1], ols[1], iv[1], f64::from(u8::from(hcc.lambda_hcc == 0.0))])
            })
            .collect::<Result<_>>()?;
        let m = reps as f64;
        let rmse = |j: usize| (fits.iter().map(|f| (f[0] - f[j]).powi(2)).sum::<f64>() / m).sqrt();
        let mean = |j: usize| fits.iter().map(|f| f[j]).sum::<f64>() / m;
        rows.push(Fig10Row {
            n,
            replications: reps,
            rmse_hcc_ols: rmse(1),
            rmse_hcc_2sls: rmse(2),
            mean_hcc: mean(0),
            mean_ols: mean(1),
            mean_2sls: mean(2),
            share_lambda_zero: mean(3),
        });
    }
    Ok(Fig10Report { dgp: config.dgp, rows })
}

// ---------------------------------------------------------------- downsample

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DownsampleConfig {
    pub market: MarketConfig,
    pub replications: usize,
    pub ratio_c: f64,
    pub reference_ratio_c: f64,
}

/// Many impressions with small effects each: the ad stock is smooth and
/// ads are a small share of conversions. Sparse ad stock or intensity
/// that moves with it makes sampled negatives cost more than 1/C.
impl Default for DownsampleConfig {
    fn default() -> Self {
        DownsampleConfig {
            market: MarketConfig {
                n_users: 800,
                horizon: 10.0 * DAY,
                auction_end: Some(7.0 * DAY),
                auction_rate: 30.0 / (7.0 * DAY),
                clearing_price: ClearingPrice { mu: 2.5f64.ln(), sigma: 0.5 },
                true_alpha: AlphaSpec { constant: 0.4 / (10.0 * DAY), amplitude: 0.1, period: DAY },
                true_beta: vec![TrueCoefficient { key: FeatureKey::ad_stock(KernelSpec::exponential(2.0 * DAY)), beta: 0.005 }],
                confounding: Confounding::None,
                feedback: Feedback::None,
                randomization_level: RandomizationLevel::BidLevel,
                submit_probability_p: 0.8,
                margin_value_mv: 500.0,
                bid_noise_sd: 0.3,
                characteristics: Vec::new(),
                p_viewable: 1.0,
                retarget_rate: 0.0,
                retarget_kinds: vec!["homepage".into()],
                p_win_noise_sd: 0.0,
                conversion_value: 1.0,
                margin: 1.0,
                rng_seed: 0,
            },
            replications: 800,
            ratio_c: 10.0,
            reference_ratio_c: 200.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DownsampleReport {
    pub true_beta: f64,
    pub ratio_c: f64,
    pub reference_ratio_c: f64,
    pub sampled: Summary,
    pub reference: Summary,
    /// var(sampled) / var(reference).
    pub variance_ratio: f64,
    /// 1 + 1/C relative to 1 + 1/C_ref.
    pub predicted_ratio: f64,
    pub estimates: Vec<(f64, f64)>,
}

impl DownsampleReport {
    pub fn table(&self) -> String {
        let mut s = String::from("ratio_c,mean,sd,se,variance\n");
        for (c, v) in [(self.ratio_c, &self.sampled), (self.reference_ratio_c, &self.reference)] {
            let _ = writeln!(s, "{c},{},{},{},{}", v.mean, v.sd, v.se, v.variance());
        }
        let _ = writeln!(s, "variance_ratio,{},predicted,{}", self.variance_ratio, self.predicted_ratio);
        s
    }
}

/// Intercept and first-order daily harmonics plus the true ad keys.
fn baseline_and_ad_features(market: &MarketConfig) -> Result<FeatureSet> {
    let period = market.true_alpha.period;
    let mut keys = vec![
        FeatureKey::intercept(),
        FeatureKey::intercept().with_fourier(FourierSpec::new(period, 1, 1)),
        FeatureKey::intercept().with_fourier(FourierSpec::new(period, 1, 0)),
    ];
    keys.extend(market.true_beta.iter().map(|c| c.key.clone()));
    FeatureSet::new(keys)
}

pub fn run_downsample(config: &DownsampleConfig, seed: u64) -> Result<DownsampleReport> {
    if config.replications < 2 {
        return Err(Error::config("downsample needs at least 2 replications"));
    }
    let (_, beta) = single_ad_kernel(&config.market)?;
    let features = baseline_and_ad_features(&config.market)?;
    let mut estimates = Vec::with_capacity(config.replications);
    for rep in 0..config.replications {
        let rep_seed = replication_seed(seed, rep as u64);
        let sim = simulate(&MarketConfig { rng_seed: rep_seed, ..config.market.clone() })?;
        let fit = |c: f64| -> Result<f64> {
            let panel_config = PanelConfig { ratio_c: c, rng_seed: rep_seed, add_double_negatives: true, holdout_fraction: 0.0 };
            let panel = build_panel(&sim.timelines, &features, &panel_config)?;
            let design = DesignMatrices::from_panel(&panel, &features)?;
            Ok(fit_ols(&design)?[ad_key_index(&design.x_names)?])
        };
        estimates.push((fit(config.ratio_c)?, fit(config.reference_ratio_c)?));
    }
    let sampled = Summary::of(&estimates.iter().map(|e| e.0).collect::<Vec<_>>());
    let reference = Summary::of(&estimates.iter().map(|e| e.1).collect::<Vec<_>>());
    Ok(DownsampleReport {
        true_beta: beta,
        ratio_c: config.ratio_c,
        reference_ratio_c: config.reference_ratio_c,
        variance_ratio: sampled.variance() / reference.variance(),
        predicted_ratio: (1.0 + 1.0 / config.ratio_c) / (1.0 + 1.0 / config.reference_ratio_c),
        sampled,
        reference,
        estimates,
    })
}

// ---------------------------------------------------------------- calibration

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HausmanArm {
    pub dgp: LinearDgp,
    pub n: usize,
    pub replications: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    pub exogenous: HausmanArm,
    pub endogenous: HausmanArm,
    pub hausman_draws: usize,
    pub level: f64,
    /// Bootstrap coverage of the slope of the exogenous arm's DGP.
    pub coverage_n: usize,
    pub coverage_replications: usize,
    pub coverage_draws: usize,
    pub ci_level: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            exogenous: HausmanArm { dgp: LinearDgp { beta: 1.0, rho: 0.0, pi: 0.5 }, n: 2_000, replications: 500 },
            endogenous: HausmanArm { dgp: LinearDgp { beta: 1.0, rho: 0.8, pi: 0.5 }, n: 50_000, replications: 100 },
            hausman_draws: 200,
            level: 0.05,
            coverage_n: 1_000,
            coverage_replications: 1_000,
            coverage_draws: 20,
            ci_level: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub level: f64,
    pub exogenous_rejection_rate: f64,
    pub endogenous_rejection_rate: f64,
    pub endogenous_p_below_001: f64,
    pub ci_level: f64,
    pub coverage: f64,
    pub exogenous_p_values: Vec<f64>,
    pub endogenous_p_values: Vec<f64>,
}

impl CalibrationReport {
    pub fn table(&self) -> String {
        format!(
            "check,value\nexogenous_rejection_rate,{}\nendogenous_rejection_rate,{}\nendogenous_p_below_0.01,{}\ncoverage,{}\n",
            self.exogenous_rejection_rate, self.endogenous_rejection_rate, self.endogenous_p_below_001, self.coverage
        )
    }
}

fn hausman_p_values(arm: &HausmanArm, draws: usize, seed: u64) -> Result<Vec<f64>> {
    (0..arm.replications as u64)
        .into_par_iter()
        .map(|rep| {
            let s = replication_seed(seed, rep);
            let design = arm.dgp.design(arm.n, s)?;
            Ok(hausman_bootstrap(&design, draws, s ^ 0x6861_7573)?.p_value)
        })
        .collect()
}

pub fn run_calibration(config: &CalibrationConfig, seed: u64) -> Result<CalibrationReport> {
    let exo = hausman_p_values(&config.exogenous, config.hausman_draws, replication_seed(seed, 0))?;
    let endo = hausman_p_values(&config.endogenous, config.hausman_draws, replication_seed(seed, 1))?;
    let rate = |p: &[f64], level: f64| p.iter().filter(|&&v| v < level).count() as f64 / p.len().max(1) as f64;

    let cover_seed = replication_seed(seed, 2);
    let dgp = config.exogenous.dgp;
    let covered: Vec<bool> = (0..config.coverage_replications as u64)
        .into_par_iter()
        .map(|rep| {
            let s = replication_seed(cover_seed, rep);
            let design = dgp.design(config.coverage_n, s)?;
            let boot = bayesian_bootstrap(&design, config.coverage_draws, 1.0, s ^ 0x626f_6f74, config.ci_level, fit_ols)?;
            Ok(boot.lower[1] <= dgp.beta && dgp.beta <= boot.upper[1])
        })
        .collect::<Result<_>>()?;
    Ok(CalibrationReport {
        level: config.level,
        exogenous_rejection_rate: rate(&exo, config.level),
        endogenous_rejection_rate: rate(&endo, config.level),
        endogenous_p_below_001: rate(&endo, 0.01),
        ci_level: config.ci_level,
        coverage: covered.iter().filter(|&&c| c).count() as f64 / covered.len().max(1) as f64,
        exogenous_p_values: exo,
        endogenous_p_values: endo,
    })
}

// ---------------------------------------------------------------- attribution

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributionScenarioConfig {
    pub market: MarketConfig,
}

impl Default for AttributionScenarioConfig {
    fn default() -> Self {
        AttributionScenarioConfig {
            market: MarketConfig {
                n_users: 10_000,
                horizon: 10.0 * DAY,
                auction_end: Some(7.0 * DAY),
                auction_rate: 6.0 / (7.0 * DAY),
                clearing_price: ClearingPrice { mu: 2.0f64.ln(), sigma: 0.5 },
                true_alpha: AlphaSpec { constant: 0.3 / (10.0 * DAY), amplitude: 0.5, period: DAY },
                true_beta: vec![
                    TrueCoefficient { key: FeatureKey::ad_stock(KernelSpec::exponential(6.0 * HOUR)), beta: 0.03 },
                    TrueCoefficient {
                        key: FeatureKey::ad_stock(KernelSpec::gamma(2.0, 3.0 * HOUR)).with_characteristic("mobile"),
                        beta: 0.02,
                    },
                ],
                confounding: Confounding::None,
                feedback: Feedback::None,
                randomization_level: RandomizationLevel::BidLevel,
                submit_probability_p: 0.9,
                margin_value_mv: 50.0,
                bid_noise_sd: 0.3,
                characteristics: vec![CharacteristicSpec { name: "mobile".into(), probability: 0.5 }],
                p_viewable: 1.0,
                retarget_rate: 0.0,
                retarget_kinds: vec!["homepage".into()],
                p_win_noise_sd: 0.0,
                conversion_value: 1.0,
                margin: 1.0,
                rng_seed: 0,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionScenarioReport {
    pub n_users: usize,
    pub conversions: usize,
    pub impressions: usize,
    pub incr_conversion_side: f64,
    pub incr_impression_side: f64,
    pub incr_model_side: f64,
    pub incr_residual: f64,
    pub realized_incremental: f64,
    pub realized_incremental_se: f64,
    /// Largest |c_j − accumulated − residual| over impressions.
    pub max_cost_split_error: f64,
    pub degenerate_conversions: usize,
}

impl AttributionScenarioReport {
    pub fn table(&self) -> String {
        format!(
            "quantity,value\nincr_conversion_side,{}\nincr_impression_side,{}\nincr_model_side,{}\nincr_residual,{}\nrealized_incremental,{}\nrealized_incremental_se,{}\nmax_cost_split_error,{}\n",
            self.incr_conversion_side,
            self.incr_impression_side,
            self.incr_model_side,
            self.incr_residual,
            self.realized_incremental,
            self.realized_incremental_se,
            self.max_cost_split_error
        )
    }
}

pub fn run_attribution(config: &AttributionScenarioConfig, seed: u64) -> Result<AttributionScenarioReport> {
    let market = MarketConfig { rng_seed: replication_seed(seed, 0), ..config.market.clone() };
    if market.confounding != Confounding::None {
        return Err(Error::config("the attribution scenario needs a market without confounding"));
    }
    let sim = simulate(&market)?;
    let features = baseline_and_ad_features(&market)?;
    let alpha = market.true_alpha;
    let mut beta = vec![alpha.constant, alpha.constant * alpha.amplitude, 0.0];
    beta.extend(market.true_beta.iter().map(|c| c.beta));
    let model = Attribution::from_beta(&features, beta)?;
    let as_of = market.horizon;
    let rollup = model.campaign_rollup(&sim.timelines, as_of, &[SliceFilter::all()])?;
    let all = &rollup[0];
    let max_cost_split_error = sim
        .timelines
        .par_iter()
        .map(|tl| -> Result<f64> {
            let mut worst: f64 = 0.0;
            for j in (0..tl.bids.len()).filter(|&j| tl.bids[j].won) {
                let rec = model.impression_accounting(tl, j, as_of)?;
                if let (Some(acc), Some(res)) = (rec.accumulated_cost, rec.residual_cost) {
                    worst = worst.max((rec.cost - acc - res).abs());
                }
            }
            Ok(worst)
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    Ok(AttributionScenarioReport {
        n_users: market.n_users,
        conversions: sim.truth.n_conversions,
        impressions: sim.truth.n_impressions,
        incr_conversion_side: all.incr_conversion_side,
        incr_impression_side: all.incr_impression_side,
        incr_model_side: all.incr_model_side,
        incr_residual: all.incr_residual,
        realized_incremental: sim.truth.realized_incremental,
        realized_incremental_se: sim.truth.realized_incremental_se,
        max_cost_split_error,
        degenerate_conversions: all.n_degenerate_conversions,
    })
}

// ---------------------------------------------------------------- dispatch

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplicateConfig {
    pub fig6: Fig6Config,
    pub fig10: Fig10Config,
    pub downsample: DownsampleConfig,
    pub calibration: CalibrationConfig,
    pub attribution: AttributionScenarioConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scenario", rename_all = "snake_case")]
pub enum ScenarioReport {
    Fig6(Fig6Report),
    Fig10(Fig10Report),
    Downsample(DownsampleReport),
    Calibration(CalibrationReport),
    Attribution(AttributionScenarioReport),
}

impl ScenarioReport {
    /// Human-readable CSV summary.
    pub fn table(&self) -> String {
        match self {
            ScenarioReport::Fig6(r) => r.table(),
            ScenarioReport::Fig10(r) => r.table(),
            ScenarioReport::Downsample(r) => r.table(),
            ScenarioReport::Calibration(r) => r.table(),
            ScenarioReport::Attribution(r) => r.table(),
        }
    }
}

pub fn run_scenario(scenario: Scenario, config: &ReplicateConfig, seed: u64) -> Result<ScenarioReport> {
    Ok(match scenario {
        Scenario::Fig6 => ScenarioReport::Fig6(run_fig6(&config.fig6, seed)?),
        Scenario::Fig10 => ScenarioReport::Fig10(run_fig10(&config.fig10, seed)?),
        Scenario::Downsample => ScenarioReport::Downsample(run_downsample(&config.downsample, seed)?),
        Scenario::Calibration => ScenarioReport::Calibration(run_calibration(&config.calibration, seed)?),
        Scenario::Attribution => ScenarioReport::Attribution(run_attribution(&config.attribution, seed)?),
    })
}
