//! Run configuration: one JSON document with a section per pipeline stage,
//! dotted `section.key=value` overrides and a content hash recorded in
//! every artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::attribution::AttributionConfig;
use crate::bidding::BidPolicy;
use crate::error::{Error, Result};
use crate::estimators::EstimatorConfig;
use crate::features::{FeatureKey, FeatureSet};
use crate::panel::PanelConfig;
use crate::replicate::{replication_seed, ReplicateConfig};
use crate::simulator::MarketConfig;

/// Input and output locations. Unset inputs default to the conventional
/// file names inside the output directory, so stages chain through one
/// directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoConfig {
    pub events: Option<PathBuf>,
    pub panel: Option<PathBuf>,
    pub panel_meta: Option<PathBuf>,
    pub holdout: Option<PathBuf>,
    pub holdout_meta: Option<PathBuf>,
    pub coefficients: Option<PathBuf>,
    pub contexts: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub rng_seed: u64,
    pub market: Option<MarketConfig>,
    pub features: Vec<FeatureKey>,
    pub panel: PanelConfig,
    pub estimator: EstimatorConfig,
    pub bidding: Option<BidPolicy>,
    pub attribution: AttributionConfig,
    pub replicate: ReplicateConfig,
    pub io: IoConfig,
}

/// Streams of the global seed handed to each stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Market = 1,
    Panel = 2,
    Estimator = 3,
    Bidding = 4,
    Replicate = 5,
}

impl RunConfig {
    /// Defaults, then `document` merged over them, then the overrides.
    pub fn from_value(document: Value, overrides: &[String]) -> Result<Self> {
        let mut merged = serde_json::to_value(RunConfig::default())?;
        merge(&mut merged, document);
        for o in overrides {
            apply_override(&mut merged, o)?;
        }
        let config: RunConfig = serde_path_to_error::deserialize(merged).map_err(|e| {
            let path = e.path().to_string();
            Error::config(format!("at `{path}`: {}", e.into_inner()))
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let document = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::config(format!("cannot read config {}: {e}", p.display())))?;
                let mut de = serde_json::Deserializer::from_str(&text);
                serde_path_to_error::deserialize::<_, Value>(&mut de)
                    .map_err(|e| Error::config(format!("{}: {}", p.display(), e.into_inner())))?
            }
            None => Value::Object(Map::new()),
        };
        Self::from_value(document, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.panel.validate()?;
        if let Some(m) = &self.market {
            m.validate()?;
        }
        if let Some(b) = &self.bidding {
            b.validate()?;
        }
        if !self.features.is_empty() {
            self.feature_set()?;
        }
        Ok(())
    }

    pub fn feature_set(&self) -> Result<FeatureSet> {
        if self.features.is_empty() {
            return Err(Error::config("the `features` section is empty"));
        }
        FeatureSet::new(self.features.clone())
    }

    pub fn market(&self) -> Result<&MarketConfig> {
        self.market.as_ref().ok_or_else(|| Error::config("the `market` section is missing"))
    }

    pub fn bidding(&self) -> Result<&BidPolicy> {
        self.bidding.as_ref().ok_or_else(|| Error::config("the `bidding` section is missing"))
    }

    /// Seed of one stage: the stage's own `rng_seed` mixed into a stream
    /// of the global seed.
    pub fn stage_seed(&self, stage: Stage) -> u64 {
        let local = match stage {
            Stage::Market => self.market.as_ref().map_or(0, |m| m.rng_seed),
            Stage::Panel => self.panel.rng_seed,
            Stage::Bidding => self.bidding.as_ref().map_or(0, |b| b.rng_seed),
            Stage::Estimator | Stage::Replicate => 0,
        };
        replication_seed(self.rng_seed ^ local, stage as u64)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

/// Recursive object merge. An object carrying a `kind` tag replaces the
/// base wholesale so variant fields never mix.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) if !o.contains_key("kind") => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `a.b.c=value`. The value is parsed as JSON when it parses,
/// otherwise taken as a string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) =
        spec.split_once('=').ok_or_else(|| Error::config(format!("override `{spec}` is not of the form section.key=value")))?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(format!("override `{spec}` has an empty path segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for (i, key) in keys.iter().enumerate() {
        if node.is_null() {
            *node = Value::Object(Map::new());
        }
        node = match node {
            Value::Object(map) => map.entry(key.to_string()).or_insert(Value::Null),
            Value::Array(items) => {
                let idx: usize = key
                    .parse()
                    .map_err(|_| Error::config(format!("override `{spec}`: `{key}` indexes a list")))?;
                let len = items.len();
                items
                    .get_mut(idx)
                    .ok_or_else(|| Error::config(format!("override `{spec}`: index {idx} outside a list of {len}")))?
            }
            _ => {
                return Err(Error::config(format!(
                    "override `{spec}`: `{}` is not a section",
                    keys[..i].join(".")
                )))
            }
        };
    }
    merge(node, value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_reach_nested_defaults() {
        let c = RunConfig::from_value(json!({}), &["replicate.fig6.replications=3".into(), "rng_seed=9".into()]).unwrap();
        assert_eq!(c.replicate.fig6.replications, 3);
        assert_eq!(c.rng_seed, 9);
        assert_eq!(c.replicate.fig10, Default::default());
    }

    #[test]
    fn tagged_variants_replace() {
        let c = RunConfig::from_value(json!({}), &[r#"replicate.fig6.market.feedback={"kind":"none"}"#.into()]).unwrap();
        assert_eq!(c.replicate.fig6.market.feedback, crate::simulator::Feedback::None);
    }

    #[test]
    fn errors_name_the_field() {
        let err = RunConfig::from_value(json!({"panel": {"ratio_c": "ten"}}), &[]).unwrap_err().to_string();
        assert!(err.contains("panel.ratio_c"), "{err}");
        let err = RunConfig::from_value(json!({"panle": {}}), &[]).unwrap_err().to_string();
        assert!(err.contains("panle"), "{err}");
        assert!(apply_override(&mut json!({}), "novalue").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let b = RunConfig { rng_seed: 1, ..Default::default() };
        assert_eq!(a.hash(), RunConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
    }
}
