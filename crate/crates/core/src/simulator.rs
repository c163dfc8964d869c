//! Synthetic real-time-bidding market with known ground truth.
//!
//! Each user gets Poisson auction opportunities, second-price auctions
//! against lognormal clearing prices and conversions from an
//! inhomogeneous Poisson process drawn by thinning. A counterfactual twin
//! without ads thins the same candidate stream, so the two differ only in
//! conversions caused by ads.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, LogNormal as LogNormalCdf};

use crate::bidding::RandomizationLevel;
use crate::error::{Error, Result};
use crate::events::{BidEvent, ConversionEvent, EventTimeline, RetargetEvent};
use crate::features::{BidScorer, FeatureKey, FeatureSet};
use crate::kernels::KernelFamily;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClearingPrice {
    pub mu: f64,
    pub sigma: f64,
}

impl Default for ClearingPrice {
    fn default() -> Self {
        ClearingPrice { mu: -3.0, sigma: 0.5 }
    }
}

/// α(t) = constant · (1 + amplitude · sin(2πt / period)), conversions per
/// second.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphaSpec {
    pub constant: f64,
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default = "day")]
    pub period: f64,
}

fn day() -> f64 {
    86_400.0
}

impl AlphaSpec {
    pub fn at(&self, t: f64) -> f64 {
        self.constant * (1.0 + self.amplitude * (2.0 * PI * t / self.period).sin())
    }

    pub fn max(&self) -> f64 {
        self.constant * (1.0 + self.amplitude.abs())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrueCoefficient {
    pub key: FeatureKey,
    pub beta: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Confounding {
    #[default]
    None,
    /// Users differ in conversion propensity exp(s·z − s²/2), and their
    /// auction rate scales with exp(ρ·s·z − (ρs)²/2).
    TargetedProspects {
        strength: f64,
        #[serde(default = "unit_sd")]
        propensity_sd: f64,
    },
}

fn unit_sd() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Feedback {
    #[default]
    None,
    /// No bidding intent for `cooldown` seconds after a conversion.
    NegativeTargeting { cooldown: f64 },
    /// No bidding intent once `cap` impressions were won.
    FrequencyCap { cap: usize },
}

/// A binary impression characteristic present with `probability`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CharacteristicSpec {
    pub name: String,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketConfig {
    pub n_users: usize,
    pub horizon: f64,
    /// Auctions stop here (defaults to the horizon), letting ad stock decay
    /// inside the window.
    #[serde(default)]
    pub auction_end: Option<f64>,
    /// Auction opportunities per user per second.
    pub auction_rate: f64,
    #[serde(default)]
    pub clearing_price: ClearingPrice,
    pub true_alpha: AlphaSpec,
    pub true_beta: Vec<TrueCoefficient>,
    #[serde(default)]
    pub confounding: Confounding,
    #[serde(default)]
    pub feedback: Feedback,
    #[serde(default)]
    pub randomization_level: RandomizationLevel,
    #[serde(default = "one")]
    pub submit_probability_p: f64,
    /// Value of an incremental conversion used to price bids.
    #[serde(default = "default_mv")]
    pub margin_value_mv: f64,
    /// Lognormal dispersion of bids around the valuation.
    #[serde(default)]
    pub bid_noise_sd: f64,
    #[serde(default)]
    pub characteristics: Vec<CharacteristicSpec>,
    #[serde(default = "one")]
    pub p_viewable: f64,
    /// Retargeting events per user per second.
    #[serde(default)]
    pub retarget_rate: f64,
    #[serde(default = "default_kinds")]
    pub retarget_kinds: Vec<String>,
    /// Gaussian noise added to the logged win probabilities.
    #[serde(default)]
    pub p_win_noise_sd: f64,
    #[serde(default = "one")]
    pub conversion_value: f64,
    #[serde(default = "one")]
    pub margin: f64,
    #[serde(default)]
    pub rng_seed: u64,
}

fn one() -> f64 {
    1.0
}

fn default_mv() -> f64 {
    50.0
}

fn default_kinds() -> Vec<String> {
    vec!["homepage".into()]
}

impl MarketConfig {
    pub fn auction_end(&self) -> f64 {
        self.auction_end.unwrap_or(self.horizon).min(self.horizon)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [("horizon", self.horizon), ("auction_rate", self.auction_rate), ("true_alpha.period", self.true_alpha.period)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("market.{name} must be positive, got {v}")));
            }
        }
        if !(self.true_alpha.constant >= 0.0) || !(self.true_alpha.amplitude.abs() <= 1.0) {
            return Err(Error::config("market.true_alpha needs constant ≥ 0 and |amplitude| ≤ 1"));
        }
        if self.auction_end.is_some_and(|e| !(e >= 0.0)) {
            return Err(Error::config("market.auction_end must be non-negative"));
        }
        if !(self.submit_probability_p > 0.0 && self.submit_probability_p <= 1.0) {
            return Err(Error::config("market.submit_probability_p must lie in (0, 1]"));
        }
        if !(self.clearing_price.sigma > 0.0) {
            return Err(Error::config("market.clearing_price.sigma must be positive"));
        }
        for (name, p) in [("p_viewable", self.p_viewable)].into_iter().chain(self.characteristics.iter().map(|c| ("characteristics.probability", c.probability))) {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("market.{name} must lie in [0, 1], got {p}")));
            }
        }
        let non_negative = [
            ("bid_noise_sd", self.bid_noise_sd),
            ("retarget_rate", self.retarget_rate),
            ("p_win_noise_sd", self.p_win_noise_sd),
            ("margin_value_mv", self.margin_value_mv),
            ("conversion_value", self.conversion_value),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("market.{name} must be non-negative, got {v}")));
            }
        }
        if let Confounding::TargetedProspects { strength, propensity_sd } = self.confounding {
            if !(0.0..1.0).contains(&strength) || !(propensity_sd >= 0.0) {
                return Err(Error::config("market.confounding needs strength in [0, 1) and propensity_sd ≥ 0"));
            }
        }
        if let Feedback::NegativeTargeting { cooldown } = self.feedback {
            if !(cooldown >= 0.0) {
                return Err(Error::config("market.feedback.cooldown must be non-negative"));
            }
        }
        if self.retarget_rate > 0.0 && self.retarget_kinds.is_empty() {
            return Err(Error::config("market.retarget_kinds is empty"));
        }
        for c in &self.true_beta {
            if !c.key.is_ad_effect() {
                return Err(Error::config(format!("true coefficient on {} is not an ad-effect key", c.key)));
            }
            if !c.beta.is_finite() {
                return Err(Error::config(format!("true coefficient on {} is not finite", c.key)));
            }
            let k = c.key.kernel.expect("ad-effect keys carry a kernel");
            if k.family == KernelFamily::Gamma && k.k < 1.0 {
                return Err(Error::config(format!("{}: gamma shape below 1 has unbounded density", c.key)));
            }
        }
        self.truth_features()?;
        Ok(())
    }

    /// The true ad-effect keys as a feature set, with their coefficients.
    pub fn truth_features(&self) -> Result<(FeatureSet, Vec<f64>)> {
        let fs = FeatureSet::new(self.true_beta.iter().map(|c| c.key.clone()).collect())?;
        Ok((fs, self.true_beta.iter().map(|c| c.beta).collect()))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub true_beta: Vec<(String, f64)>,
    pub true_alpha: Option<AlphaSpec>,
    pub n_users: usize,
    pub n_auctions: usize,
    pub n_impressions: usize,
    pub n_conversions: usize,
    /// Conversions of the twin market with ads forced off.
    pub n_twin_conversions: usize,
    /// n_conversions − n_twin_conversions.
    pub realized_incremental: f64,
    /// Monte Carlo standard error of the realized total, from per-user
    /// differences.
    pub realized_incremental_se: f64,
    /// Σ Δy_ij under the true coefficients.
    pub expected_incremental: f64,
    /// Σ Δy_ij minus the part still pending at the horizon.
    pub expected_incremental_in_window: f64,
    /// Conversion candidates where the intensity was negative and was
    /// clamped at zero.
    pub clamped_intensity: usize,
}

#[derive(Clone, Debug)]
pub struct Simulation {
    pub timelines: Vec<EventTimeline>,
    pub truth: GroundTruth,
    /// Per user: (factual conversions, twin conversions).
    pub per_user: Vec<(usize, usize)>,
}

struct UserResult {
    timeline: EventTimeline,
    twin: usize,
    auctions: usize,
    expected: f64,
    expected_in_window: f64,
    clamped: usize,
}

pub fn user_id(i: usize) -> String {
    format!("u{i:07}")
}

pub fn simulate(config: &MarketConfig) -> Result<Simulation> {
    config.validate()?;
    let (fs, beta) = config.truth_features()?;
    let scorer = fs.scorer(&beta)?;
    let price = LogNormalCdf::new(config.clearing_price.mu, config.clearing_price.sigma)
        .map_err(|e| Error::config(format!("clearing price: {e}")))?;
    let market = Market { config, fs: &fs, beta: &beta, scorer: &scorer, price };
    let results: Vec<UserResult> = (0..config.n_users).into_par_iter().map(|i| market.user(i)).collect::<Result<_>>()?;

    let mut truth = GroundTruth {
        true_beta: fs.names().into_iter().zip(beta.iter().copied()).collect(),
        true_alpha: Some(config.true_alpha),
        n_users: config.n_users,
        ..Default::default()
    };
    let mut per_user = Vec::with_capacity(results.len());
    let mut timelines = Vec::with_capacity(results.len());
    for r in results {
        let n = r.timeline.conversions.len();
        truth.n_auctions += r.auctions;
        truth.n_impressions += r.timeline.bids.iter().filter(|b| b.won).count();
        truth.n_conversions += n;
        truth.n_twin_conversions += r.twin;
        truth.expected_incremental += r.expected;
        truth.expected_incremental_in_window += r.expected_in_window;
        truth.clamped_intensity += r.clamped;
        per_user.push((n, r.twin));
        timelines.push(r.timeline);
    }
    truth.realized_incremental = truth.n_conversions as f64 - truth.n_twin_conversions as f64;
    let n = per_user.len() as f64;
    if n > 1.0 {
        let mean = truth.realized_incremental / n;
        let ss: f64 = per_user.iter().map(|&(a, b)| (a as f64 - b as f64 - mean).powi(2)).sum();
        truth.realized_incremental_se = (ss / (n - 1.0) * n).sqrt();
    }
    Ok(Simulation { timelines, truth, per_user })
}

struct Market<'a> {
    config: &'a MarketConfig,
    fs: &'a FeatureSet,
    beta: &'a [f64],
    scorer: &'a BidScorer,
    price: LogNormalCdf,
}

enum Next {
    Auction,
    Retarget,
    End,
}

impl Market<'_> {
    fn rng(&self, user: usize, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.rng_seed);
        rng.set_stream(4 * user as u64 + stream);
        rng
    }

    fn user(&self, i: usize) -> Result<UserResult> {
        let cfg = self.config;
        let id = user_id(i);
        let horizon = cfg.horizon;
        let mut rng_user = self.rng(i, 0);
        let mut rng_auction = self.rng(i, 1);
        let mut rng_conv = self.rng(i, 2);
        let mut rng_retarget = self.rng(i, 3);

        let z: f64 = rng_user.sample(StandardNormal);
        let (alpha_mult, rate_mult) = match cfg.confounding {
            Confounding::None => (1.0, 1.0),
            Confounding::TargetedProspects { strength, propensity_sd: s } => {
                let r = strength * s;
                ((s * z - 0.5 * s * s).exp(), (r * z - 0.5 * r * r).exp())
            }
        };
        let treated_user = rng_user.random::<f64>() < cfg.submit_probability_p;

        let auction_gap = Exp::new(cfg.auction_rate * rate_mult).map_err(|e| Error::config(e.to_string()))?;
        let retarget_gap = (cfg.retarget_rate > 0.0)
            .then(|| Exp::new(cfg.retarget_rate).map_err(|e| Error::config(e.to_string())))
            .transpose()?;
        let clearing = LogNormal::new(cfg.clearing_price.mu, cfg.clearing_price.sigma)
            .map_err(|e| Error::config(e.to_string()))?;
        let auction_end = cfg.auction_end();
        let alpha_max = alpha_mult * cfg.true_alpha.max();

        let mut tl = EventTimeline::new(id.clone(), 0.0, horizon);
        let mut next_auction = auction_gap.sample(&mut rng_auction);
        let mut next_retarget = retarget_gap.map_or(f64::INFINITY, |g| g.sample(&mut rng_retarget));
        let mut columns = vec![0.0; self.fs.len()];
        let (mut twin, mut auctions, mut clamped, mut won_count) = (0usize, 0usize, 0usize, 0usize);
        let mut last_conversion = f64::NEG_INFINITY;
        let mut t = 0.0;
        loop {
            let a = if next_auction < auction_end { next_auction } else { f64::INFINITY };
            let (seg_end, next) = if a.min(next_retarget) >= horizon {
                (horizon, Next::End)
            } else if a <= next_retarget {
                (a, Next::Auction)
            } else {
                (next_retarget, Next::Retarget)
            };

            // Conversion candidates on [t, seg_end) at a rate bounding the
            // intensity over the whole segment.
            let bound = alpha_max + self.ad_bound(&tl, t, seg_end);
            if bound > 0.0 {
                let gap = Exp::new(bound).map_err(|e| Error::config(e.to_string()))?;
                let mut s = t;
                loop {
                    s += gap.sample(&mut rng_conv);
                    if s >= seg_end {
                        break;
                    }
                    let u: f64 = rng_conv.random::<f64>() * bound;
                    let alpha = alpha_mult * cfg.true_alpha.at(s);
                    self.fs.evaluate_into(&tl, s, &mut columns);
                    let mut lambda = alpha + columns.iter().zip(self.beta).map(|(x, b)| x * b).sum::<f64>();
                    if lambda < 0.0 {
                        clamped += 1;
                        lambda = 0.0;
                    }
                    if u < lambda {
                        tl.conversions.push(ConversionEvent {
                            user_id: id.clone(),
                            t_c: s,
                            value: cfg.conversion_value,
                            margin: cfg.margin,
                        });
                        last_conversion = s;
                    }
                    if u < alpha {
                        twin += 1;
                    }
                }
            }
            t = seg_end;
            match next {
                Next::End => break,
                Next::Retarget => {
                    let k = rng_retarget.random_range(0..cfg.retarget_kinds.len());
                    tl.retargets.push(RetargetEvent { user_id: id.clone(), t_r: t, event_kind: cfg.retarget_kinds[k].clone() });
                    next_retarget = t + retarget_gap.expect("retargets enabled").sample(&mut rng_retarget);
                }
                Next::Auction => {
                    auctions += 1;
                    let suppressed = match cfg.feedback {
                        Feedback::None => false,
                        Feedback::NegativeTargeting { cooldown } => t - last_conversion <= cooldown,
                        Feedback::FrequencyCap { cap } => won_count >= cap,
                    };
                    let bid = self.auction(&mut tl, &mut rng_auction, &clearing, t, suppressed, treated_user)?;
                    won_count += usize::from(bid.won);
                    tl.bids.push(bid);
                    next_auction = t + auction_gap.sample(&mut rng_auction);
                }
            }
        }

        let mut expected = 0.0;
        let mut pending = 0.0;
        for bid in tl.bids.iter().filter(|b| b.won) {
            expected += self.fs.residual_value(bid, &tl.retargets, self.beta, bid.t_j, true)?;
            pending += self.fs.residual_value(bid, &tl.retargets, self.beta, horizon, true)?;
        }
        Ok(UserResult { timeline: tl, twin, auctions, expected, expected_in_window: expected - pending, clamped })
    }

    /// One auction at `t`: valuation, randomized submission, clearing.
    fn auction(
        &self,
        tl: &mut EventTimeline,
        rng: &mut ChaCha8Rng,
        clearing: &LogNormal<f64>,
        t: f64,
        suppressed: bool,
        treated_user: bool,
    ) -> Result<BidEvent> {
        let cfg = self.config;
        let characteristics: BTreeMap<String, f64> = cfg
            .characteristics
            .iter()
            .map(|c| (c.name.clone(), f64::from(u8::from(rng.random::<f64>() < c.probability))))
            .collect();
        let mut bid = BidEvent {
            user_id: tl.user_id.clone(),
            t_j: t,
            ghost_bid: 0.0,
            submitted: false,
            bid: 0.0,
            p_win_b: 0.0,
            p_win_g: 0.0,
            won: false,
            cost: None,
            viewable: None,
            p_viewable: cfg.p_viewable,
            characteristics,
        };
        let noise: f64 = rng.sample(StandardNormal);
        let assignment: f64 = rng.random();
        let price = clearing.sample(rng);
        let view: f64 = rng.random();
        let value = cfg.margin_value_mv * self.scorer.score(&bid, &tl.retargets)?;
        let sd = cfg.bid_noise_sd;
        let g = if suppressed { 0.0 } else { value.max(0.0) * (sd * noise - 0.5 * sd * sd).exp() };
        let submitted = match cfg.randomization_level {
            RandomizationLevel::BidLevel => assignment < cfg.submit_probability_p,
            RandomizationLevel::UserLevel => treated_user,
        };
        let b = if submitted { g } else { 0.0 };
        bid.ghost_bid = g;
        bid.submitted = submitted;
        bid.bid = b;
        bid.p_win_b = self.p_win(b, rng);
        bid.p_win_g = self.p_win(g, rng);
        if b > 0.0 && b >= price {
            bid.won = true;
            bid.cost = Some(price);
            bid.viewable = Some(view < cfg.p_viewable);
        }
        Ok(bid)
    }

    fn p_win(&self, b: f64, rng: &mut ChaCha8Rng) -> f64 {
        let p = if b > 0.0 { self.price.cdf(b) } else { 0.0 };
        if self.config.p_win_noise_sd > 0.0 {
            let e: f64 = rng.sample(StandardNormal);
            (p + self.config.p_win_noise_sd * e).clamp(0.0, 1.0)
        } else {
            p
        }
    }

    /// Upper bound of the ad effect on [s, e) from impressions before s.
    fn ad_bound(&self, tl: &EventTimeline, s: f64, e: f64) -> f64 {
        let mut total = 0.0;
        for (key, &b) in self.fs.keys().iter().zip(self.beta) {
            let coef = if key.fourier.is_some() { b.abs() } else { b.max(0.0) };
            if coef == 0.0 {
                continue;
            }
            let kernel = key.kernel.expect("ad-effect key");
            let horizon = kernel.negligible_after();
            let mut stock = 0.0;
            for bid in tl.bids.iter().rev() {
                let a = s - bid.t_j;
                if a > horizon {
                    break;
                }
                if !bid.won {
                    continue;
                }
                let mut w = bid.weight(&key.characteristic);
                if key.viewable {
                    w *= bid.viewed();
                }
                if w == 0.0 {
                    continue;
                }
                let mut v = w.abs() * kernel.sup_density(a, e - bid.t_j);
                if let Some(tau_r) = key.retarget_tau {
                    let events: f64 = tl
                        .retargets
                        .iter()
                        .filter(|r| r.t_r <= bid.t_j && key.event_kind.as_deref().is_none_or(|k| k == r.event_kind))
                        .map(|r| (-(s - r.t_r) / tau_r).exp() / tau_r)
                        .sum();
                    v *= events;
                }
                stock += v;
            }
            total += coef * stock;
        }
        total
    }
}

/// Mean ghost-bid intent rate (share of auctions with g > 0) among
/// submitted minus among withheld bids. Near zero when assignment is
/// independent of the bidding intent.
pub fn ghost_divergence(timelines: &[EventTimeline]) -> f64 {
    let (mut on, mut n_on, mut off, mut n_off) = (0.0, 0.0, 0.0, 0.0);
    for b in timelines.iter().flat_map(|t| &t.bids) {
        let g = f64::from(u8::from(b.ghost_bid > 0.0));
        if b.submitted {
            on += g;
            n_on += 1.0;
        } else {
            off += g;
            n_off += 1.0;
        }
    }
    if n_on == 0.0 || n_off == 0.0 {
        return 0.0;
    }
    on / n_on - off / n_off
}
