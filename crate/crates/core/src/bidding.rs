//! Bids from incremental values: truthful second-price valuation,
//! Thompson sampling over bootstrap draws and randomized submission.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::CoefficientSet;
use crate::events::{BidEvent, RetargetEvent};
use crate::features::{BidScorer, FeatureSet};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    TruthfulSecondPrice,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandomizationLevel {
    #[default]
    BidLevel,
    UserLevel,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThompsonUnit {
    #[default]
    PerBid,
    PerUser,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThompsonConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default)]
    pub unit: ThompsonUnit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BidPolicy {
    /// m·v, currency per incremental conversion.
    pub margin_value_mv: f64,
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default = "one")]
    pub submit_probability_p: f64,
    #[serde(default)]
    pub randomization_level: RandomizationLevel,
    /// Keep the ghost bid non-zero when a Thompson draw values a bid at or
    /// below zero but the point estimate does not.
    #[serde(default = "yes")]
    pub two_point_floor: bool,
    #[serde(default)]
    pub thompson: ThompsonConfig,
    #[serde(default)]
    pub rng_seed: u64,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

impl BidPolicy {
    pub fn new(margin_value_mv: f64) -> Self {
        BidPolicy {
            margin_value_mv,
            strategy: Strategy::default(),
            submit_probability_p: 1.0,
            randomization_level: RandomizationLevel::default(),
            two_point_floor: true,
            thompson: ThompsonConfig::default(),
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.submit_probability_p > 0.0 && self.submit_probability_p <= 1.0) {
            return Err(Error::config(format!("submit probability must lie in (0, 1], got {}", self.submit_probability_p)));
        }
        if !(self.margin_value_mv >= 0.0 && self.margin_value_mv.is_finite()) {
            return Err(Error::config(format!("margin value must be finite and non-negative, got {}", self.margin_value_mv)));
        }
        Ok(())
    }
}

/// What is known about an auction opportunity before bidding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BidContext {
    pub user_id: String,
    pub t_j: f64,
    #[serde(default)]
    pub characteristics: BTreeMap<String, f64>,
    #[serde(default = "one")]
    pub p_viewable: f64,
    /// The user's retargeting events so far.
    #[serde(default)]
    pub retargets: Vec<RetargetEvent>,
}

impl BidContext {
    /// Bid event skeleton with only the ex-ante fields filled in.
    pub fn as_bid(&self) -> BidEvent {
        BidEvent {
            user_id: self.user_id.clone(),
            t_j: self.t_j,
            ghost_bid: 0.0,
            submitted: false,
            bid: 0.0,
            p_win_b: 0.0,
            p_win_g: 0.0,
            won: false,
            cost: None,
            viewable: None,
            p_viewable: self.p_viewable,
            characteristics: self.characteristics.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BidDecision {
    pub user_id: String,
    pub t_j: f64,
    #[serde(rename = "ghost_bid_g")]
    pub ghost_bid: f64,
    #[serde(rename = "submitted_B")]
    pub submitted: bool,
    #[serde(rename = "submitted_bid_b")]
    pub bid: f64,
    /// Bootstrap draw used, when Thompson sampling is on.
    pub draw_index: Option<usize>,
    /// The selected valuation was negative and was clamped to zero.
    pub negative_value: bool,
}

/// FNV-1a, used to derive stable per-user random streams from ids.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3))
}

/// A persistent uniform draw for one user under one seed and purpose.
pub fn user_uniform(seed: u64, user_id: &str, purpose: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(user_id.as_bytes()));
    rng.set_stream(purpose);
    rng.random()
}

const STREAM_ASSIGNMENT: u64 = 1;
const STREAM_THOMPSON: u64 = 2;

/// Stateful bid generator over an immutable coefficient snapshot.
#[derive(Clone, Debug)]
pub struct Bidder {
    policy: BidPolicy,
    point: BidScorer,
    draws: Vec<BidScorer>,
    rng: ChaCha8Rng,
    negative_values: u64,
}

impl Bidder {
    pub fn new(features: &FeatureSet, coefficients: &CoefficientSet, policy: BidPolicy) -> Result<Self> {
        policy.validate()?;
        let point = features.scorer(&coefficients.aligned(features)?)?;
        let draws = if policy.thompson.enabled {
            let draws = coefficients.aligned_draws(features)?;
            if draws.is_empty() {
                return Err(Error::config("Thompson sampling needs bootstrap draws in the coefficient set"));
            }
            draws.iter().map(|d| features.scorer(d)).collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let rng = ChaCha8Rng::seed_from_u64(policy.rng_seed);
        Ok(Bidder { policy, point, draws, rng, negative_values: 0 })
    }

    pub fn policy(&self) -> &BidPolicy {
        &self.policy
    }

    /// Bids whose selected valuation was negative so far.
    pub fn negative_values(&self) -> u64 {
        self.negative_values
    }

    pub fn compute_bid(&mut self, context: &BidContext) -> Result<BidDecision> {
        let bid = context.as_bid();
        self.decide(&bid, &context.retargets)
    }

    /// As [`compute_bid`](Self::compute_bid) for a bid event skeleton
    /// (only the ex-ante fields are read).
    pub fn decide(&mut self, bid: &BidEvent, retargets: &[RetargetEvent]) -> Result<BidDecision> {
        let mv = self.policy.margin_value_mv;
        let draw_index = if self.draws.is_empty() {
            None
        } else {
            let n = self.draws.len();
            Some(match self.policy.thompson.unit {
                ThompsonUnit::PerBid => self.rng.random_range(0..n),
                ThompsonUnit::PerUser => {
                    let u = user_uniform(self.policy.rng_seed, &bid.user_id, STREAM_THOMPSON);
                    ((u * n as f64) as usize).min(n - 1)
                }
            })
        };
        let scorer = draw_index.map_or(&self.point, |i| &self.draws[i]);
        let mut value = mv * scorer.score(bid, retargets)?;
        let negative_value = value < 0.0;
        if negative_value {
            self.negative_values += 1;
            value = 0.0;
        }
        if value == 0.0 && draw_index.is_some() && self.policy.two_point_floor {
            value = (mv * self.point.score(bid, retargets)?).max(0.0);
        }
        let p = self.policy.submit_probability_p;
        let submitted = match self.policy.randomization_level {
            RandomizationLevel::BidLevel => self.rng.random::<f64>() < p,
            RandomizationLevel::UserLevel => user_uniform(self.policy.rng_seed, &bid.user_id, STREAM_ASSIGNMENT) < p,
        };
        Ok(BidDecision {
            user_id: bid.user_id.clone(),
            t_j: bid.t_j,
            ghost_bid: value,
            submitted,
            bid: if submitted { value } else { 0.0 },
            draw_index,
            negative_value,
        })
    }
}
