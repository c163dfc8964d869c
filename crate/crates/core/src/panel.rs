//! Continuous-time training panels: positives at conversion times,
//! uniformly sampled negatives reweighted to the observed measure NT, and
//! negatively weighted duplicates of the positives.
//!
//! With these weights Σ_rows w·x·x' estimates ∫ x x' dt and Σ_rows w·x·y
//! is Σ_{+} x, so weighted least squares on the panel approximates the
//! continuous-time regression of the conversion intensity on the features.

use std::io::{Read, Write};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::EventTimeline;
use crate::features::{FeatureFrame, FeatureSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanelConfig {
    /// Negatives per positive, C.
    #[serde(default = "default_ratio")]
    pub ratio_c: f64,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default = "default_true")]
    pub add_double_negatives: bool,
    /// Fraction of users held out for cross-validation.
    #[serde(default)]
    pub holdout_fraction: f64,
}

fn default_ratio() -> f64 {
    10.0
}

fn default_true() -> bool {
    true
}

impl Default for PanelConfig {
    fn default() -> Self {
        PanelConfig { ratio_c: default_ratio(), rng_seed: 0, add_double_negatives: true, holdout_fraction: 0.0 }
    }
}

impl PanelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio_c.is_finite() && self.ratio_c > 0.0) {
            return Err(Error::config(format!("panel ratio_c must be positive, got {}", self.ratio_c)));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::config(format!("holdout_fraction must lie in [0, 1), got {}", self.holdout_fraction)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Positive,
    DoubleNegative,
    Negative,
}

impl RowKind {
    fn infer(y: f64, weight: f64) -> RowKind {
        if y != 0.0 {
            RowKind::Positive
        } else if weight < 0.0 {
            RowKind::DoubleNegative
        } else {
            RowKind::Negative
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanelRow {
    pub kind: RowKind,
    #[serde(flatten)]
    pub frame: FeatureFrame,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanelMeta {
    pub total_measure_nt: f64,
    pub n_positive: usize,
    pub n_negative: usize,
    pub n_double_negative: usize,
    pub n_users: usize,
    pub ratio_c: f64,
    pub rng_seed: u64,
    pub feature_config_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Panel {
    pub names: Vec<String>,
    pub rows: Vec<PanelRow>,
    pub meta: PanelMeta,
}

/// Splits timelines by user into (training, holdout).
pub fn split_holdout(timelines: &[EventTimeline], fraction: f64, seed: u64) -> (Vec<EventTimeline>, Vec<EventTimeline>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6b6f_6c64_6f75_74);
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for t in timelines {
        if rng.random::<f64>() < fraction {
            holdout.push(t.clone());
        } else {
            train.push(t.clone());
        }
    }
    (train, holdout)
}

pub fn build_panel(timelines: &[EventTimeline], features: &FeatureSet, config: &PanelConfig) -> Result<Panel> {
    config.validate()?;
    let n_pos: usize = timelines.iter().map(|t| t.conversions.len()).sum();
    if n_pos == 0 {
        return Err(Error::NoPositives(format!("{} timelines contain no conversions", timelines.len())));
    }
    let measure: f64 = timelines.iter().map(EventTimeline::window_length).sum();
    let n_neg = (config.ratio_c * n_pos as f64).ceil() as usize;
    let w_neg = measure / n_neg as f64;

    // Negative times: user ∝ window length, then uniform within the window.
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let lengths: Vec<f64> = timelines.iter().map(EventTimeline::window_length).collect();
    let users = WeightedIndex::new(&lengths).map_err(|e| Error::config(format!("user windows: {e}")))?;
    let mut negatives: Vec<Vec<f64>> = vec![Vec::new(); timelines.len()];
    for _ in 0..n_neg {
        let u = users.sample(&mut rng);
        let tl = &timelines[u];
        negatives[u].push(tl.t_start + rng.random::<f64>() * tl.window_length());
    }

    let per_user: Vec<Vec<PanelRow>> = timelines
        .par_iter()
        .zip(negatives.par_iter())
        .map(|(tl, neg_times)| {
            let mut rows = Vec::with_capacity(2 * tl.conversions.len() + neg_times.len());
            let frame = |t: f64, y: f64, weight: f64| FeatureFrame {
                user_id: tl.user_id.clone(),
                t,
                y,
                columns: features.evaluate(tl, t).expect("sample times lie in the window"),
                weight,
            };
            for c in &tl.conversions {
                let pos = frame(c.t_c, 1.0, 1.0);
                if config.add_double_negatives {
                    let mut dn = pos.clone();
                    dn.y = 0.0;
                    dn.weight = -1.0;
                    rows.push(PanelRow { kind: RowKind::DoubleNegative, frame: dn });
                }
                rows.push(PanelRow { kind: RowKind::Positive, frame: pos });
            }
            for &t in neg_times {
                rows.push(PanelRow { kind: RowKind::Negative, frame: frame(t, 0.0, w_neg) });
            }
            rows
        })
        .collect();
    let mut rows: Vec<PanelRow> = per_user.into_iter().flatten().collect();
    rows.sort_by(|a, b| {
        a.frame
            .user_id
            .cmp(&b.frame.user_id)
            .then(a.frame.t.total_cmp(&b.frame.t))
            .then(a.kind.cmp(&b.kind))
    });
    let n_dn = if config.add_double_negatives { n_pos } else { 0 };
    Ok(Panel {
        names: features.names(),
        rows,
        meta: PanelMeta {
            total_measure_nt: measure,
            n_positive: n_pos,
            n_negative: n_neg,
            n_double_negative: n_dn,
            n_users: timelines.len(),
            ratio_c: config.ratio_c,
            rng_seed: config.rng_seed,
            feature_config_hash: features.config_hash(),
        },
    })
}

impl Panel {
    /// Columnar CSV: one column per feature key, then y, weight, user_id, t.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = self.names.clone();
        header.extend(["y", "weight", "user_id", "t"].map(String::from));
        w.write_record(&header)?;
        for row in &self.rows {
            let f = &row.frame;
            let mut rec: Vec<String> = f.columns.iter().map(|v| v.to_string()).collect();
            rec.push(f.y.to_string());
            rec.push(f.weight.to_string());
            rec.push(f.user_id.clone());
            rec.push(f.t.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_meta<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer(&mut out, &self.meta)?;
        out.write_all(b"\n")?;
        Ok(())
    }

    pub fn read(csv_in: impl Read, meta_in: impl Read) -> Result<Panel> {
        let meta: PanelMeta = serde_json::from_reader(meta_in)?;
        let mut r = csv::Reader::from_reader(csv_in);
        let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
        let p = header.len().checked_sub(4).filter(|p| header[*p..] == ["y", "weight", "user_id", "t"]);
        let Some(p) = p else {
            return Err(Error::config("panel CSV must end with columns y, weight, user_id, t"));
        };
        let names = header[..p].to_vec();
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let num = |j: usize| -> Result<f64> {
                rec[j].parse::<f64>().map_err(|e| Error::config(format!("panel row {}: column {}: {e}", i + 1, header[j])))
            };
            let columns = (0..p).map(num).collect::<Result<Vec<_>>>()?;
            let (y, weight, t) = (num(p)?, num(p + 1)?, num(p + 3)?);
            rows.push(PanelRow {
                kind: RowKind::infer(y, weight),
                frame: FeatureFrame { user_id: rec[p + 2].to_string(), t, y, columns, weight },
            });
        }
        Ok(Panel { names, rows, meta })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::ConversionEvent;
    use crate::features::FeatureKey;

    fn one_user() -> Vec<EventTimeline> {
        let mut tl = EventTimeline::new("u", 0.0, 10.0);
        tl.conversions.push(ConversionEvent { user_id: "u".into(), t_c: 4.0, value: 1.0, margin: 1.0 });
        vec![tl]
    }

    #[test]
    fn weights_follow_the_sampling_design() {
        let fs = FeatureSet::new(vec![FeatureKey::intercept()]).unwrap();
        let cfg = PanelConfig { ratio_c: 2.0, ..Default::default() };
        let p = build_panel(&one_user(), &fs, &cfg).unwrap();
        let mut kinds: Vec<_> = p.rows.iter().map(|r| (r.kind, r.frame.y, r.frame.weight)).collect();
        kinds.sort_by(|a, b| a.0.cmp(&b.0));
        assert_eq!(
            kinds,
            vec![
                (RowKind::Positive, 1.0, 1.0),
                (RowKind::DoubleNegative, 0.0, -1.0),
                (RowKind::Negative, 0.0, 5.0),
                (RowKind::Negative, 0.0, 5.0)
            ]
        );

        let cfg = PanelConfig { ratio_c: 2.0, add_double_negatives: false, ..Default::default() };
        let p = build_panel(&one_user(), &fs, &cfg).unwrap();
        assert_eq!(p.len(), 3);
        assert!(p.rows.iter().all(|r| r.frame.weight > 0.0));
    }

    #[test]
    fn no_positives() {
        let fs = FeatureSet::new(vec![FeatureKey::intercept()]).unwrap();
        let tl = vec![EventTimeline::new("u", 0.0, 10.0)];
        assert!(matches!(build_panel(&tl, &fs, &PanelConfig::default()), Err(Error::NoPositives(_))));
    }
}
