//! Incrementality shares of conversions and impressions, residual
//! incrementality and cost accounting through time, and slice rollups.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::CoefficientSet;
use crate::events::{BidEvent, EventTimeline};
use crate::features::FeatureSet;

/// Shares of one conversion: s_ic and the per-impression s_ijc over the
/// won impressions before it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConversionShares {
    pub conversion_ref: usize,
    pub t_c: f64,
    /// α(t_c).
    pub baseline: f64,
    /// Δy_i(t_c).
    pub ad_effect: f64,
    pub s_ic: f64,
    /// (impression index, s_ijc).
    pub impressions: Vec<(usize, f64)>,
}

impl ConversionShares {
    pub fn sum_of_impression_shares(&self) -> f64 {
        self.impressions.iter().map(|(_, s)| s).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub user_id: String,
    /// Index of the impression in the user's bid list.
    pub impression_ref: usize,
    pub t_j: f64,
    pub conversion_ref: Option<usize>,
    pub s_ijc: Option<f64>,
    pub s_ij_partial_t: f64,
    pub r_ij_t: f64,
    pub delta_y_ij: f64,
    pub expected_share: Option<f64>,
    pub cost: f64,
    pub residual_cost: Option<f64>,
    pub accumulated_cost: Option<f64>,
    pub as_of_t: f64,
    pub negative_effect: bool,
    /// Some ratio above had a zero denominator and is reported as null.
    pub zero_denominator: bool,
}

/// Equality filter on impression characteristics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceFilter {
    pub name: String,
    #[serde(default)]
    pub equals: BTreeMap<String, f64>,
}

impl SliceFilter {
    pub fn all() -> Self {
        SliceFilter { name: "all".into(), equals: BTreeMap::new() }
    }

    pub fn matches(&self, bid: &BidEvent) -> bool {
        self.equals.iter().all(|(k, v)| bid.weight(k) == *v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributionConfig {
    #[serde(default = "default_slices")]
    pub slices: Vec<SliceFilter>,
    /// Reporting time; the latest window end when absent.
    #[serde(default)]
    pub as_of: Option<f64>,
}

fn default_slices() -> Vec<SliceFilter> {
    vec![SliceFilter::all()]
}

impl Default for AttributionConfig {
    fn default() -> Self {
        AttributionConfig { slices: default_slices(), as_of: None }
    }
}

/// One report row.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SliceReport {
    pub slice: String,
    pub n_users: usize,
    pub n_impressions: usize,
    pub cost: f64,
    pub accumulated_cost: f64,
    pub residual_cost: f64,
    pub incr_conversion_side: f64,
    pub incr_impression_side: f64,
    pub incr_model_side: f64,
    pub expected_cpia_s: Option<f64>,
    pub expected_cpia_partial: Option<f64>,
    pub n_conversions: usize,
    /// Conversions skipped because α + Δy was not positive.
    pub n_degenerate_conversions: usize,
    /// Σ r_ij(t).
    pub incr_residual: f64,
    /// Cost of impressions with Δy_ij = 0, which has no residual split.
    pub unsplit_cost: f64,
    pub n_negative_effect: usize,
    /// Σ (1 − s_ic) over the slice users' conversions.
    pub baseline_conversions: f64,
    /// Incremental over baseline conversions among the observed ones.
    pub conversion_lift: Option<f64>,
}

pub fn write_report_csv<W: Write>(rows: &[SliceReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_report_json<W: Write>(rows: &[SliceReport], out: W) -> Result<()> {
    serde_json::to_writer_pretty(out, rows)?;
    Ok(())
}

/// Read-only scoring of timelines under one set of coefficients.
#[derive(Clone, Debug)]
pub struct Attribution<'a> {
    features: &'a FeatureSet,
    beta: Vec<f64>,
}

/// Per-user intermediate results.
#[derive(Clone, Debug, Default)]
pub struct UserAttribution {
    pub conversions: Vec<ConversionShares>,
    /// Conversions whose prediction was not positive: (index, α, Δy).
    pub degenerate: Vec<(usize, f64, f64)>,
    pub impressions: Vec<AttributionRecord>,
}

impl<'a> Attribution<'a> {
    pub fn new(features: &'a FeatureSet, coefficients: &CoefficientSet) -> Result<Self> {
        Self::from_beta(features, coefficients.aligned(features)?)
    }

    pub fn from_beta(features: &'a FeatureSet, beta: Vec<f64>) -> Result<Self> {
        if beta.len() != features.len() {
            return Err(Error::config(format!("{} coefficients for {} feature keys", beta.len(), features.len())));
        }
        Ok(Attribution { features, beta })
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    /// s_ic = Δy_i(t_c) / (α(t_c) + Δy_i(t_c)) and its split over the
    /// impressions, all with the same denominator.
    pub fn conversion_shares(&self, timeline: &EventTimeline, c: usize) -> Result<ConversionShares> {
        let conv = timeline
            .conversions
            .get(c)
            .ok_or_else(|| Error::domain(format!("user {} has no conversion {c}", timeline.user_id)))?;
        let t_c = conv.t_c;
        let columns = self.features.evaluate(timeline, t_c)?;
        let (baseline, ad_effect) = self.features.split_prediction(&columns, &self.beta);
        let denom = baseline + ad_effect;
        if !(denom > 0.0 && denom.is_finite()) {
            return Err(Error::DegeneratePrediction { baseline, ad_effect });
        }
        let end = timeline.bids_before(t_c);
        let impressions = timeline.bids[..end]
            .iter()
            .enumerate()
            .filter(|(_, b)| b.won)
            .map(|(j, b)| (j, self.features.impression_effect(b, &timeline.retargets, &self.beta, t_c) / denom))
            .collect();
        Ok(ConversionShares { conversion_ref: c, t_c, baseline, ad_effect, s_ic: ad_effect / denom, impressions })
    }

    /// Accounting of won impression `j` at `as_of`, from the conversions
    /// strictly between t_j and `as_of`.
    pub fn impression_accounting(&self, timeline: &EventTimeline, j: usize, as_of: f64) -> Result<AttributionRecord> {
        let bid = timeline
            .bids
            .get(j)
            .ok_or_else(|| Error::domain(format!("user {} has no bid {j}", timeline.user_id)))?;
        if !bid.won {
            return Err(Error::domain(format!("bid {j} of user {} was not won", timeline.user_id)));
        }
        if as_of < bid.t_j {
            return Err(Error::domain(format!("as-of time {as_of} precedes impression time {}", bid.t_j)));
        }
        let mut partial = 0.0;
        for (c, conv) in timeline.conversions.iter().enumerate() {
            if conv.t_c > bid.t_j && conv.t_c < as_of {
                let shares = self.conversion_shares(timeline, c)?;
                partial += shares.impressions.iter().find(|(k, _)| *k == j).map_or(0.0, |(_, s)| *s);
            }
        }
        self.account(timeline, j, partial, as_of)
    }

    fn account(&self, timeline: &EventTimeline, j: usize, partial: f64, as_of: f64) -> Result<AttributionRecord> {
        let bid = &timeline.bids[j];
        let delta = self.features.residual_value(bid, &timeline.retargets, &self.beta, bid.t_j, true)?;
        let r = self.features.residual_value(bid, &timeline.retargets, &self.beta, as_of, true)?;
        let cost = bid.cost.unwrap_or(0.0);
        let accrued = delta - r;
        let expected_share = (accrued != 0.0).then(|| partial * delta / accrued);
        let residual_cost = if delta != 0.0 {
            Some(cost * r / delta)
        } else if cost == 0.0 {
            Some(0.0)
        } else {
            None
        };
        Ok(AttributionRecord {
            user_id: timeline.user_id.clone(),
            impression_ref: j,
            t_j: bid.t_j,
            conversion_ref: None,
            s_ijc: None,
            s_ij_partial_t: partial,
            r_ij_t: r,
            delta_y_ij: delta,
            expected_share,
            cost,
            residual_cost,
            accumulated_cost: residual_cost.map(|rc| cost - rc),
            as_of_t: as_of,
            negative_effect: delta < 0.0 || partial < 0.0,
            zero_denominator: expected_share.is_none() || residual_cost.is_none(),
        })
    }

    /// Shares of every conversion before `as_of` and the accounting of every
    /// impression won at or before it. Conversions with a non-positive
    /// prediction are set aside rather than failing the user.
    pub fn user_attribution(&self, timeline: &EventTimeline, as_of: f64) -> Result<UserAttribution> {
        let mut out = UserAttribution::default();
        let mut partial = vec![0.0; timeline.bids.len()];
        for (c, conv) in timeline.conversions.iter().enumerate() {
            if conv.t_c >= as_of {
                break;
            }
            match self.conversion_shares(timeline, c) {
                Ok(shares) => {
                    for &(j, s) in &shares.impressions {
                        partial[j] += s;
                    }
                    out.conversions.push(shares);
                }
                Err(Error::DegeneratePrediction { baseline, ad_effect }) => out.degenerate.push((c, baseline, ad_effect)),
                Err(e) => return Err(e),
            }
        }
        for (j, bid) in timeline.bids.iter().enumerate() {
            if bid.t_j > as_of {
                break;
            }
            if bid.won {
                out.impressions.push(self.account(timeline, j, partial[j], as_of)?);
            }
        }
        Ok(out)
    }

    /// Impression records followed by one record per (impression,
    /// conversion) pair with its pairwise share.
    pub fn records(&self, timeline: &EventTimeline, as_of: f64) -> Result<Vec<AttributionRecord>> {
        let user = self.user_attribution(timeline, as_of)?;
        let mut out = user.impressions.clone();
        for conv in &user.conversions {
            for &(j, s) in &conv.impressions {
                if let Some(rec) = user.impressions.iter().find(|r| r.impression_ref == j) {
                    let mut pair = rec.clone();
                    pair.conversion_ref = Some(conv.conversion_ref);
                    pair.s_ijc = Some(s);
                    out.push(pair);
                }
            }
        }
        Ok(out)
    }

    /// Campaign accounting per slice at `as_of`.
    pub fn campaign_rollup(
        &self,
        timelines: &[EventTimeline],
        as_of: f64,
        slices: &[SliceFilter],
    ) -> Result<Vec<SliceReport>> {
        let per_user: Vec<Vec<SliceReport>> = timelines
            .par_iter()
            .map(|tl| {
                let user = self.user_attribution(tl, as_of)?;
                Ok(slices.iter().map(|s| user_slice(tl, &user, s)).collect())
            })
            .collect::<Result<_>>()?;
        let mut rows: Vec<SliceReport> =
            slices.iter().map(|s| SliceReport { slice: s.name.clone(), ..Default::default() }).collect();
        for user in per_user {
            for (acc, part) in rows.iter_mut().zip(user) {
                acc.add(&part);
            }
        }
        for row in &mut rows {
            row.finish();
        }
        Ok(rows)
    }
}

fn user_slice(timeline: &EventTimeline, user: &UserAttribution, slice: &SliceFilter) -> SliceReport {
    let mut row = SliceReport::default();
    let in_slice = |j: usize| slice.matches(&timeline.bids[j]);
    for rec in user.impressions.iter().filter(|r| in_slice(r.impression_ref)) {
        row.n_impressions += 1;
        row.cost += rec.cost;
        match rec.residual_cost {
            Some(rc) => {
                row.residual_cost += rc;
                row.accumulated_cost += rec.cost - rc;
            }
            None => row.unsplit_cost += rec.cost,
        }
        row.incr_impression_side += rec.s_ij_partial_t;
        row.incr_residual += rec.r_ij_t;
        row.incr_model_side += rec.delta_y_ij;
        row.n_negative_effect += usize::from(rec.negative_effect);
    }
    let everything = slice.equals.is_empty();
    if !everything && row.n_impressions == 0 {
        return row;
    }
    row.n_users = 1;
    row.n_conversions = user.conversions.len() + user.degenerate.len();
    row.n_degenerate_conversions = user.degenerate.len();
    for conv in &user.conversions {
        row.incr_conversion_side += if everything {
            conv.s_ic
        } else {
            conv.impressions.iter().filter(|(j, _)| in_slice(*j)).map(|(_, s)| s).sum()
        };
        row.baseline_conversions += 1.0 - conv.s_ic;
    }
    row
}

impl SliceReport {
    fn add(&mut self, o: &SliceReport) {
        self.n_users += o.n_users;
        self.n_impressions += o.n_impressions;
        self.cost += o.cost;
        self.accumulated_cost += o.accumulated_cost;
        self.residual_cost += o.residual_cost;
        self.incr_conversion_side += o.incr_conversion_side;
        self.incr_impression_side += o.incr_impression_side;
        self.incr_model_side += o.incr_model_side;
        self.n_conversions += o.n_conversions;
        self.n_degenerate_conversions += o.n_degenerate_conversions;
        self.incr_residual += o.incr_residual;
        self.unsplit_cost += o.unsplit_cost;
        self.n_negative_effect += o.n_negative_effect;
        self.baseline_conversions += o.baseline_conversions;
    }

    fn finish(&mut self) {
        let ratio = |num: f64, den: f64| (den != 0.0).then(|| num / den);
        self.expected_cpia_s = ratio(self.cost, self.incr_impression_side + self.incr_residual);
        self.expected_cpia_partial = ratio(self.accumulated_cost, self.incr_impression_side);
        self.conversion_lift = ratio(self.incr_conversion_side, self.baseline_conversions);
    }
}

/// Latest window end, the default reporting time.
pub fn default_as_of(timelines: &[EventTimeline]) -> f64 {
    timelines.iter().map(|t| t.t_end).fold(f64::NEG_INFINITY, f64::max)
}
