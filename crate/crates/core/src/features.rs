//! Ad stock, potential ad stock and ghost bid stock evaluated at arbitrary
//! times, plus ex-ante incremental values of single impressions.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::events::{BidEvent, EventTimeline, RetargetEvent, UNIT};
use crate::kernels::{retarget_product_kernel, unit_delta, unit_residual, FourierSpec, KernelFamily, KernelSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StockClass {
    AdStock,
    PotentialAdStock,
    GhostBidStock,
    Baseline,
    RetargetConjunction,
}

impl StockClass {
    fn label(self) -> &'static str {
        match self {
            StockClass::AdStock => "ad_stock",
            StockClass::PotentialAdStock => "potential_ad_stock",
            StockClass::GhostBidStock => "ghost_bid_stock",
            StockClass::Baseline => "baseline",
            StockClass::RetargetConjunction => "retarget_conjunction",
        }
    }
}

/// Baseline characteristic counting auction opportunities seen so far.
pub const AUCTION_COUNT: &str = "auction_count";

fn unit() -> String {
    UNIT.to_string()
}

/// One regressor or instrument column.
///
/// Baseline keys with the `unit` characteristic are the intercept (times
/// the Fourier factor at the evaluation time when one is given); the
/// `auction_count` baseline counts logged bids before the evaluation time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureKey {
    pub stock_class: StockClass,
    #[serde(default = "unit")]
    pub characteristic: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<KernelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fourier: Option<FourierSpec>,
    /// Event-stock scale τ_R of a retargeting conjunction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retarget_tau: Option<f64>,
    /// Restricts a retargeting conjunction to one event kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_kind: Option<String>,
    /// Counts viewable impressions only: realized V_j in training,
    /// Pr(viewable) ex ante.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub viewable: bool,
}

impl FeatureKey {
    fn new(stock_class: StockClass, kernel: Option<KernelSpec>) -> Self {
        FeatureKey {
            stock_class,
            characteristic: unit(),
            kernel,
            fourier: None,
            retarget_tau: None,
            event_kind: None,
            viewable: false,
        }
    }

    pub fn intercept() -> Self {
        Self::new(StockClass::Baseline, None)
    }

    pub fn auction_count() -> Self {
        Self::new(StockClass::Baseline, None).with_characteristic(AUCTION_COUNT)
    }

    pub fn ad_stock(kernel: KernelSpec) -> Self {
        Self::new(StockClass::AdStock, Some(kernel))
    }

    pub fn potential(kernel: KernelSpec) -> Self {
        Self::new(StockClass::PotentialAdStock, Some(kernel))
    }

    pub fn ghost(kernel: KernelSpec) -> Self {
        Self::new(StockClass::GhostBidStock, Some(kernel))
    }

    pub fn retarget(kernel: KernelSpec, retarget_tau: f64) -> Self {
        let mut key = Self::new(StockClass::RetargetConjunction, Some(kernel));
        key.retarget_tau = Some(retarget_tau);
        key
    }

    pub fn with_characteristic(mut self, characteristic: &str) -> Self {
        self.characteristic = characteristic.to_string();
        self
    }

    pub fn with_fourier(mut self, fourier: FourierSpec) -> Self {
        self.fourier = Some(fourier);
        self
    }

    pub fn with_event_kind(mut self, kind: &str) -> Self {
        self.event_kind = Some(kind.to_string());
        self
    }

    pub fn viewable(mut self) -> Self {
        self.viewable = true;
        self
    }

    /// Ad-effect columns carry the β that values an impression.
    pub fn is_ad_effect(&self) -> bool {
        matches!(self.stock_class, StockClass::AdStock | StockClass::RetargetConjunction)
    }

    /// Excluded instruments: present in Z only.
    pub fn is_instrument(&self) -> bool {
        self.stock_class == StockClass::PotentialAdStock
    }

    /// Exogenous controls: present in both X and Z.
    pub fn is_exogenous(&self) -> bool {
        matches!(self.stock_class, StockClass::Baseline | StockClass::GhostBidStock)
    }

    pub fn is_intercept(&self) -> bool {
        self.stock_class == StockClass::Baseline && self.characteristic == UNIT && self.fourier.is_none()
    }

    pub fn validate(&self) -> Result<()> {
        let name = self.to_string();
        if let Some(k) = &self.kernel {
            k.validate()?;
        }
        if let Some(f) = &self.fourier {
            f.validate()?;
        }
        match self.stock_class {
            StockClass::Baseline => {
                if self.kernel.is_some() || self.retarget_tau.is_some() || self.viewable {
                    return Err(Error::config(format!("{name}: baseline keys take no kernel, retargeting or viewability")));
                }
                if self.characteristic != UNIT && self.characteristic != AUCTION_COUNT {
                    return Err(Error::config(format!(
                        "{name}: baseline characteristic must be {UNIT:?} or {AUCTION_COUNT:?}"
                    )));
                }
                if self.characteristic == AUCTION_COUNT && self.fourier.is_some() {
                    return Err(Error::config(format!("{name}: auction count takes no Fourier term")));
                }
            }
            class => {
                let Some(kernel) = &self.kernel else {
                    return Err(Error::config(format!("{name}: stock keys need a kernel")));
                };
                let retarget = class == StockClass::RetargetConjunction || self.retarget_tau.is_some();
                if class == StockClass::RetargetConjunction && self.retarget_tau.is_none() {
                    return Err(Error::config(format!("{name}: retargeting conjunction needs retarget_tau")));
                }
                if class == StockClass::AdStock && self.retarget_tau.is_some() {
                    return Err(Error::config(format!("{name}: use retarget_conjunction for retargeted ad stock")));
                }
                if retarget {
                    let tau_r = self.retarget_tau.unwrap_or(0.0);
                    if !(tau_r.is_finite() && tau_r > 0.0) {
                        return Err(Error::config(format!("{name}: retarget_tau must be positive")));
                    }
                    if kernel.family != KernelFamily::Exponential || kernel.truncation.is_some_and(f64::is_finite) {
                        return Err(Error::UnsupportedFamily(format!(
                            "{name}: retargeting conjunctions need an untruncated exponential kernel"
                        )));
                    }
                    if self.fourier.is_some() {
                        return Err(Error::config(format!("{name}: Fourier terms cannot be conjoined with retargeting")));
                    }
                }
                if self.event_kind.is_some() && !retarget {
                    return Err(Error::config(format!("{name}: event_kind applies to retargeting keys only")));
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for FeatureKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]", self.stock_class.label(), self.characteristic)?;
        if let Some(k) = &self.kernel {
            write!(f, "|{k}")?;
        }
        if let Some(fs) = &self.fourier {
            write!(f, "|{fs}")?;
        }
        if let Some(tau_r) = self.retarget_tau {
            write!(f, "|retarget(tau={tau_r}")?;
            if let Some(kind) = &self.event_kind {
                write!(f, ",kind={kind}")?;
            }
            write!(f, ")")?;
        }
        if self.viewable {
            write!(f, "|viewable")?;
        }
        Ok(())
    }
}

/// A feature row: regressors and instruments at one time for one user.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureFrame {
    pub user_id: String,
    pub t: f64,
    pub y: f64,
    pub columns: Vec<f64>,
    pub weight: f64,
}

/// An ordered, validated set of feature keys.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    keys: Vec<FeatureKey>,
    kernels: Vec<KernelSpec>,
    kernel_of: Vec<Option<usize>>,
    lookback: f64,
}

impl FeatureSet {
    pub fn new(keys: Vec<FeatureKey>) -> Result<Self> {
        let mut names = std::collections::HashSet::new();
        let mut kernels: Vec<KernelSpec> = Vec::new();
        let mut kernel_of = Vec::with_capacity(keys.len());
        for key in &keys {
            key.validate()?;
            if !names.insert(key.to_string()) {
                return Err(Error::config(format!("feature key {key} declared twice")));
            }
            kernel_of.push(key.kernel.map(|k| match kernels.iter().position(|x| *x == k) {
                Some(i) => i,
                None => {
                    kernels.push(k);
                    kernels.len() - 1
                }
            }));
        }
        let lookback = kernels.iter().map(KernelSpec::negligible_after).fold(0.0, f64::max);
        Ok(FeatureSet { keys, kernels, kernel_of, lookback })
    }

    pub fn keys(&self) -> &[FeatureKey] {
        &self.keys
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.keys.iter().map(ToString::to_string).collect()
    }

    pub fn index_of(&self, key: &FeatureKey) -> Option<usize> {
        self.keys.iter().position(|k| k == key)
    }

    /// Hex SHA-256 of the canonical key list.
    pub fn config_hash(&self) -> String {
        let mut h = Sha256::new();
        for name in self.names() {
            h.update(name.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    /// Delay beyond which no kernel retains more than the tail tolerance.
    pub fn lookback(&self) -> f64 {
        self.lookback
    }

    /// Evaluates every key at time `t` for one user. Only events strictly
    /// before `t` contribute.
    pub fn evaluate(&self, timeline: &EventTimeline, t: f64) -> Result<Vec<f64>> {
        if !timeline.contains(t) {
            return Err(Error::domain(format!(
                "evaluation time {t} outside window [{}, {}] of user {}",
                timeline.t_start, timeline.t_end, timeline.user_id
            )));
        }
        let mut out = vec![0.0; self.keys.len()];
        self.evaluate_into(timeline, t, &mut out);
        Ok(out)
    }

    /// As [`evaluate`](Self::evaluate) without the window check, writing
    /// into `out`.
    pub fn evaluate_into(&self, timeline: &EventTimeline, t: f64, out: &mut [f64]) {
        let end = timeline.bids_before(t);
        for (i, key) in self.keys.iter().enumerate() {
            out[i] = match (key.stock_class, key.characteristic.as_str()) {
                (StockClass::Baseline, AUCTION_COUNT) => end as f64,
                (StockClass::Baseline, _) => key.fourier.map_or(1.0, |f| f.factor(t)),
                _ => 0.0,
            };
        }
        let factors: Vec<f64> = self.keys.iter().map(|k| k.fourier.map_or(1.0, |f| f.factor(t))).collect();
        let mut dens = vec![0.0; self.kernels.len()];
        for bid in timeline.bids[..end].iter().rev() {
            let dt = t - bid.t_j;
            if dt > self.lookback {
                break;
            }
            for (d, k) in dens.iter_mut().zip(&self.kernels) {
                *d = k.density(dt);
            }
            for (i, key) in self.keys.iter().enumerate() {
                let Some(ki) = self.kernel_of[i] else { continue };
                let gate = stock_gate(key, bid);
                if gate == 0.0 {
                    continue;
                }
                let mut v = gate * dens[ki] * factors[i];
                if let Some(tau_r) = key.retarget_tau {
                    v *= event_stock(key, tau_r, &timeline.retargets, bid.t_j, t);
                }
                out[i] += v;
            }
        }
    }

    /// Ex-ante expected incremental conversions Δy_ij of one impression,
    /// using only the bid itself and retargeting events up to t_j.
    pub fn incremental_value(&self, bid: &BidEvent, retargets: &[RetargetEvent], beta: &[f64]) -> Result<f64> {
        self.check_beta(beta)?;
        let mut total = 0.0;
        for (key, &b) in self.keys.iter().zip(beta) {
            if b == 0.0 || !key.is_ad_effect() {
                continue;
            }
            let w = ex_ante_weight(key, bid);
            if w == 0.0 {
                continue;
            }
            let kernel = key.kernel.expect("validated stock key");
            total += b * w * unit_value(key, &kernel, retargets, bid.t_j, None)?;
        }
        Ok(total)
    }

    /// Portion of Δy_ij still pending at `t ≥ t_j`, r_ij(t). `realized`
    /// uses the logged viewability instead of its ex-ante probability.
    pub fn residual_value(
        &self,
        bid: &BidEvent,
        retargets: &[RetargetEvent],
        beta: &[f64],
        t: f64,
        realized: bool,
    ) -> Result<f64> {
        self.check_beta(beta)?;
        let mut total = 0.0;
        for (key, &b) in self.keys.iter().zip(beta) {
            if b == 0.0 || !key.is_ad_effect() {
                continue;
            }
            let w = if realized { stock_gate(key, bid) } else { ex_ante_weight(key, bid) };
            if w == 0.0 {
                continue;
            }
            let kernel = key.kernel.expect("validated stock key");
            total += b * w * unit_value(key, &kernel, retargets, bid.t_j, Some(t))?;
        }
        Ok(total)
    }

    /// β-weighted ad stock of one impression at time `t`, Σ_k β_k x_ijk(t).
    pub fn impression_effect(&self, bid: &BidEvent, retargets: &[RetargetEvent], beta: &[f64], t: f64) -> f64 {
        if bid.t_j >= t || !bid.won {
            return 0.0;
        }
        let dt = t - bid.t_j;
        let mut total = 0.0;
        for (key, &b) in self.keys.iter().zip(beta) {
            if b == 0.0 || !key.is_ad_effect() {
                continue;
            }
            let gate = stock_gate(key, bid);
            if gate == 0.0 {
                continue;
            }
            let kernel = key.kernel.expect("validated stock key");
            let mut v = gate * kernel.density(dt) * key.fourier.map_or(1.0, |f| f.factor(t));
            if let Some(tau_r) = key.retarget_tau {
                v *= event_stock(key, tau_r, retargets, bid.t_j, t);
            }
            total += b * v;
        }
        total
    }

    /// Splits a fitted prediction at `t` into the non-ad baseline α(t) and
    /// the ad effect Σ_j β x_ij(t).
    pub fn split_prediction(&self, columns: &[f64], beta: &[f64]) -> (f64, f64) {
        let mut base = 0.0;
        let mut ad = 0.0;
        for ((key, &x), &b) in self.keys.iter().zip(columns).zip(beta) {
            if key.is_ad_effect() {
                ad += b * x;
            } else if key.is_exogenous() {
                base += b * x;
            }
        }
        (base, ad)
    }

    fn check_beta(&self, beta: &[f64]) -> Result<()> {
        if beta.len() != self.keys.len() {
            return Err(Error::config(format!(
                "coefficient vector has {} entries for {} feature keys",
                beta.len(),
                self.keys.len()
            )));
        }
        Ok(())
    }

    /// Precompiles the ad-effect coefficients for fast bid valuation.
    pub fn scorer(&self, beta: &[f64]) -> Result<BidScorer> {
        self.check_beta(beta)?;
        let mut plain: BTreeMap<(String, bool), f64> = BTreeMap::new();
        let mut terms = Vec::new();
        for (key, &b) in self.keys.iter().zip(beta) {
            if b == 0.0 || !key.is_ad_effect() {
                continue;
            }
            if key.fourier.is_none() && key.retarget_tau.is_none() {
                *plain.entry((key.characteristic.clone(), key.viewable)).or_insert(0.0) += b;
            } else {
                terms.push((key.clone(), b));
            }
        }
        Ok(BidScorer { plain: plain.into_iter().map(|((c, v), b)| (c, v, b)).collect(), terms })
    }
}

/// Training-time gate × weight of one logged bid for a stock key.
fn stock_gate(key: &FeatureKey, bid: &BidEvent) -> f64 {
    let w = bid.weight(&key.characteristic);
    if w == 0.0 {
        return 0.0;
    }
    let g = match key.stock_class {
        StockClass::AdStock | StockClass::RetargetConjunction => {
            if !bid.won {
                return 0.0;
            }
            if key.viewable {
                bid.viewed()
            } else {
                1.0
            }
        }
        StockClass::PotentialAdStock => {
            let b = if bid.submitted { bid.p_win_b } else { 0.0 };
            if key.viewable {
                b * bid.p_viewable
            } else {
                b
            }
        }
        StockClass::GhostBidStock => {
            if key.viewable {
                bid.p_win_g * bid.p_viewable
            } else {
                bid.p_win_g
            }
        }
        StockClass::Baseline => 0.0,
    };
    g * w
}

/// Weight of an impression for valuation before the auction outcome and
/// viewability are known.
fn ex_ante_weight(key: &FeatureKey, bid: &BidEvent) -> f64 {
    let w = bid.weight(&key.characteristic);
    if key.viewable {
        w * bid.p_viewable
    } else {
        w
    }
}

fn kind_matches(key: &FeatureKey, r: &RetargetEvent) -> bool {
    key.event_kind.as_deref().is_none_or(|k| k == r.event_kind)
}

/// Σ_r f(t − t_r | τ_R) over retargeting events at or before the
/// impression.
fn event_stock(key: &FeatureKey, tau_r: f64, retargets: &[RetargetEvent], t_j: f64, t: f64) -> f64 {
    let end = retargets.partition_point(|r| r.t_r <= t_j);
    retargets[..end]
        .iter()
        .filter(|r| kind_matches(key, r))
        .map(|r| (-(t - r.t_r) / tau_r).exp() / tau_r)
        .sum()
}

/// Integral (or residual from `t`) of one unit impression's stock under
/// the key's conjunctions.
fn unit_value(
    key: &FeatureKey,
    kernel: &KernelSpec,
    retargets: &[RetargetEvent],
    t_j: f64,
    t: Option<f64>,
) -> Result<f64> {
    if let Some(tau_r) = key.retarget_tau {
        let event_kernel = KernelSpec::exponential(tau_r);
        let end = retargets.partition_point(|r| r.t_r <= t_j);
        let mut sum = 0.0;
        for r in retargets[..end].iter().filter(|r| kind_matches(key, r)) {
            let (scale, effective) = retarget_product_kernel(kernel, &event_kernel, t_j, r.t_r)?;
            sum += match t {
                None => scale,
                Some(t) => scale * effective.survival(t - t_j),
            };
        }
        return Ok(sum);
    }
    match t {
        None => unit_delta(kernel, key.fourier.as_ref(), t_j),
        Some(t) => unit_residual(kernel, key.fourier.as_ref(), t_j, t),
    }
}

/// Ad-effect coefficients compiled for repeated bid valuation: plain keys
/// are aggregated per (characteristic, viewability).
#[derive(Clone, Debug)]
pub struct BidScorer {
    plain: Vec<(String, bool, f64)>,
    terms: Vec<(FeatureKey, f64)>,
}

impl BidScorer {
    /// Δy_ij of a prospective impression; equals
    /// [`FeatureSet::incremental_value`] with the same coefficients.
    pub fn score(&self, bid: &BidEvent, retargets: &[RetargetEvent]) -> Result<f64> {
        let mut total = 0.0;
        for (c, viewable, b) in &self.plain {
            let mut w = bid.weight(c);
            if *viewable {
                w *= bid.p_viewable;
            }
            total += b * w;
        }
        for (key, b) in &self.terms {
            let w = ex_ante_weight(key, bid);
            if w != 0.0 {
                let kernel = key.kernel.expect("validated stock key");
                total += b * w * unit_value(key, &kernel, retargets, bid.t_j, None)?;
            }
        }
        Ok(total)
    }
}
