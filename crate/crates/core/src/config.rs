//! Experiment configuration: one TOML document with a versioned schema.
//!
//! Every section is optional and falls back to the best configuration
//! (depth 7, widened channels, one-hot input, deep supervision,
//! post-processing, flip TTA), so an empty file is a complete config.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::inference::SlidingWindowConfig;
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::postprocess::PostprocessConfig;
use crate::tensor::Shape3;
use crate::trainer::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub window: Shape3,
    pub overlap: f64,
    pub sigma_scale: f64,
    pub tta: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        let sw = SlidingWindowConfig::default();
        InferenceConfig {
            window: sw.window,
            overlap: sw.overlap,
            sigma_scale: sw.sigma_scale,
            tta: true,
        }
    }
}

impl InferenceConfig {
    pub fn sliding_window(&self) -> SlidingWindowConfig {
        SlidingWindowConfig {
            window: self.window,
            overlap: self.overlap,
            sigma_scale: self.sigma_scale,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossValConfig {
    pub folds: usize,
    pub seed: u64,
}

impl Default for CrossValConfig {
    fn default() -> Self {
        CrossValConfig { folds: 5, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub postprocess: PostprocessConfig,
    pub inference: InferenceConfig,
    pub cross_validation: CrossValConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            model: ModelConfig::best(),
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
            loss: LossConfig::default(),
            postprocess: PostprocessConfig::default(),
            inference: InferenceConfig::default(),
            cross_validation: CrossValConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        self.loss.validate()?;
        self.postprocess.validate()?;
        self.inference.sliding_window().validate()?;
        if self.cross_validation.folds < 2 {
            return Err(Error::Config("cross_validation.folds must be >= 2".into()));
        }
        if self.model.deep_supervision && self.loss.deep_supervision_weights.len() != self.model.ds_heads + 1 {
            return Err(Error::Config(format!(
                "loss.deep_supervision_weights needs {} entries for {} heads",
                self.model.ds_heads + 1,
                self.model.ds_heads
            )));
        }
        self.model.check_input(self.augment.patch_size)?;
        Ok(())
    }

    /// Short stable hash of the whole configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

/// Dotted paths of every leaf that differs between two configs.
pub fn config_diff(a: &ExperimentConfig, b: &ExperimentConfig) -> Vec<String> {
    fn walk(prefix: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
        use serde_json::Value::Object;
        match (a, b) {
            (Object(x), Object(y)) => {
                let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
                keys.sort();
                keys.dedup();
                for k in keys {
                    let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    let null = serde_json::Value::Null;
                    walk(&p, x.get(k).unwrap_or(&null), y.get(k).unwrap_or(&null), out);
                }
            }
            _ if a != b => out.push(prefix.to_string()),
            _ => {}
        }
    }
    let mut out = Vec::new();
    walk(
        "",
        &serde_json::to_value(a).expect("config serialises"),
        &serde_json::to_value(b).expect("config serialises"),
        &mut out,
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::BaseLoss;

    #[test]
    fn empty_document_is_best_config() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.model.depth, 7);
        assert_eq!(cfg.model.channels, vec![64, 96, 128, 192, 256, 384, 512]);
        assert_eq!(cfg.model.in_channels, 5);
        assert!(cfg.model.deep_supervision);
        assert!(cfg.inference.tta);
        assert_eq!(cfg.train.weight_decay, 1e-4);
        assert_eq!(cfg.augment.contrast_range, [0.65, 1.5]);
    }

    #[test]
    fn round_trip_and_partial_override() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let text = "schema_version = 1\n[loss]\nbase = \"focal\"\n[train]\nlearning_rate = 0.0009\n";
        let over = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(over.loss.base, BaseLoss::Focal);
        assert_eq!(config_diff(&cfg, &over), vec!["loss.base", "train.learning_rate"]);
    }

    #[test]
    fn rejects_unknown_keys_and_versions() {
        assert!(ExperimentConfig::from_toml("[model]\ndepht = 3\n").is_err());
        let err = ExperimentConfig::from_toml("schema_version = 9\n").unwrap_err().to_string();
        assert!(err.contains("schema_version"), "{err}");
        assert!(ExperimentConfig::from_toml("[augment]\nzoom_prob = 2.0\n").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.train.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
