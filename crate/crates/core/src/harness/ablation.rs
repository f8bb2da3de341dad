//! Ablation variants and the desk-scale reduction table.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{config_diff, ExperimentConfig};
use crate::error::{Error, Result};
use crate::losses::BaseLoss;
use crate::model::{DropBlockConfig, ModelConfig, Variant};
use crate::trainer::ValidationMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Baseline,
    Attention,
    Ds,
    Residual,
    DropBlock,
    Focal,
    Deeper,
    Channels,
    OneHot,
    /// Deeper + channels + one-hot.
    #[serde(rename = "d+c+o")]
    DeeperChannelsOneHot,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 10] = [
        AblationVariant::Baseline,
        AblationVariant::Attention,
        AblationVariant::Ds,
        AblationVariant::Residual,
        AblationVariant::DropBlock,
        AblationVariant::Focal,
        AblationVariant::Deeper,
        AblationVariant::Channels,
        AblationVariant::OneHot,
        AblationVariant::DeeperChannelsOneHot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Baseline => "baseline",
            AblationVariant::Attention => "attention",
            AblationVariant::Ds => "ds",
            AblationVariant::Residual => "residual",
            AblationVariant::DropBlock => "drop_block",
            AblationVariant::Focal => "focal",
            AblationVariant::Deeper => "deeper",
            AblationVariant::Channels => "channels",
            AblationVariant::OneHot => "one_hot",
            AblationVariant::DeeperChannelsOneHot => "d+c+o",
        }
    }

    /// Column heading used in rendered tables.
    pub fn label(self) -> &'static str {
        match self {
            AblationVariant::Baseline => "Baseline",
            AblationVariant::Attention => "Attention",
            AblationVariant::Ds => "DS",
            AblationVariant::Residual => "Residual",
            AblationVariant::DropBlock => "DB",
            AblationVariant::Focal => "Focal",
            AblationVariant::Deeper => "Deeper",
            AblationVariant::Channels => "Channels",
            AblationVariant::OneHot => "One-hot",
            AblationVariant::DeeperChannelsOneHot => "D+C+O",
        }
    }

    /// Config paths this variant may change relative to the baseline.
    pub fn allowed_paths(self) -> &'static [&'static str] {
        match self {
            AblationVariant::Baseline => &[],
            AblationVariant::Attention | AblationVariant::Residual => &["model.variant"],
            AblationVariant::Ds => &["model.deep_supervision"],
            AblationVariant::DropBlock => &["model.drop_block"],
            AblationVariant::Focal => &["loss.base"],
            AblationVariant::Deeper | AblationVariant::Channels => &["model.depth", "model.channels"],
            AblationVariant::OneHot => &["model.in_channels"],
            AblationVariant::DeeperChannelsOneHot => &["model.depth", "model.channels", "model.in_channels"],
        }
    }

    /// Applies the variant's single change to `base`.
    pub fn apply(self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        let m = &mut cfg.model;
        match self {
            AblationVariant::Baseline => {}
            AblationVariant::Attention => m.variant = Variant::Attention,
            AblationVariant::Residual => m.variant = Variant::Residual,
            AblationVariant::Ds => m.deep_supervision = true,
            AblationVariant::DropBlock => m.drop_block = Some(DropBlockConfig::default()),
            AblationVariant::Focal => cfg.loss.base = BaseLoss::Focal,
            AblationVariant::Deeper => {
                m.depth = 7;
                m.channels = vec![32, 64, 128, 256, 320, 320, 320];
            }
            AblationVariant::Channels => {
                m.channels = vec![64, 96, 128, 192, 256, 384];
            }
            AblationVariant::OneHot => m.in_channels = 5,
            AblationVariant::DeeperChannelsOneHot => {
                let best = ModelConfig::best();
                m.depth = best.depth;
                m.channels = best.channels;
                m.in_channels = best.in_channels;
            }
        }
        cfg
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        AblationVariant::ALL
            .into_iter()
            .find(|v| v.name() == key || (key == "dco" && *v == AblationVariant::DeeperChannelsOneHot))
            .ok_or_else(|| {
                let names: Vec<&str> = AblationVariant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

/// The baseline every variant is measured against: depth 6, 32..320
/// channels, four modalities, no deep supervision, BCE.
pub fn baseline_experiment() -> ExperimentConfig {
    ExperimentConfig {
        model: ModelConfig::baseline(),
        ..Default::default()
    }
}

/// Builds a variant config and checks it differs from `base` only in the
/// variant's own dimension.
pub fn variant_config(variant: AblationVariant, base: &ExperimentConfig) -> Result<ExperimentConfig> {
    let cfg = variant.apply(base);
    check_variant_diff(variant, base, &cfg)?;
    Ok(cfg)
}

pub fn check_variant_diff(variant: AblationVariant, base: &ExperimentConfig, cfg: &ExperimentConfig) -> Result<()> {
    let allowed = variant.allowed_paths();
    let stray: Vec<String> = config_diff(base, cfg)
        .into_iter()
        .filter(|p| !allowed.iter().any(|a| p == a || p.starts_with(&format!("{a}."))))
        .collect();
    if stray.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("variant {variant} also changes {}", stray.join(", "))))
    }
}

/// Shrinks a full-size experiment so a cross-validation grid runs on a
/// single CPU.
///
/// | setting | full | desk |
/// |---|---|---|
/// | patch / window | 128³ | 32³ |
/// | depth | d | d - 2 (min 2) |
/// | channels | c | c / 8 (min 4) |
/// | epochs | 1000 | 4 |
/// | warmup steps | 1000 | 8 |
/// | validation | config | center patch |
/// | TTA | on | off |
/// | threshold grid | 0.30..0.70 step 0.05, ET min 0..100 | 0.35..0.55 step 0.1, ET min 0/40/73 |
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeskScale {
    pub patch: usize,
    pub depth_reduction: usize,
    pub min_depth: usize,
    pub channel_divisor: usize,
    pub min_channels: usize,
    pub epochs: usize,
    pub warmup_steps: u64,
    pub tta: bool,
}

impl Default for DeskScale {
    fn default() -> Self {
        DeskScale {
            patch: 32,
            depth_reduction: 2,
            min_depth: 2,
            channel_divisor: 8,
            min_channels: 4,
            epochs: 4,
            warmup_steps: 8,
            tta: false,
        }
    }
}

impl DeskScale {
    pub fn apply(&self, cfg: &ExperimentConfig) -> ExperimentConfig {
        let mut out = cfg.clone();
        let m = &mut out.model;
        m.depth = m.depth.saturating_sub(self.depth_reduction).max(self.min_depth).min(m.depth);
        m.channels = m.channels[..m.depth]
            .iter()
            .map(|c| (c / self.channel_divisor).max(self.min_channels))
            .collect();
        if let Some(db) = m.drop_block.as_mut() {
            db.block_size = db.block_size.min(3);
        }
        out.augment.patch_size = [self.patch; 3];
        out.inference.window = [self.patch; 3];
        out.inference.tta = self.tta;
        out.train.epochs = self.epochs;
        out.train.warmup_steps = self.warmup_steps;
        out.train.validation = ValidationMode::CenterPatch;
        out
    }

    pub fn search_spec(&self) -> crate::postprocess::SearchSpec {
        crate::postprocess::SearchSpec {
            wt_thresholds: vec![0.35, 0.45, 0.55],
            tc_thresholds: vec![0.35, 0.45, 0.55],
            et_thresholds: vec![0.35, 0.45, 0.55],
            total_et_min: vec![0, 40, 73],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_variant_differs_only_in_its_dimension() {
        let base = baseline_experiment();
        for v in AblationVariant::ALL {
            let cfg = variant_config(v, &base).unwrap();
            cfg.validate().unwrap();
            let diff = config_diff(&base, &cfg);
            if v == AblationVariant::Baseline {
                assert!(diff.is_empty());
            } else {
                assert!(!diff.is_empty(), "{v} changes nothing");
            }
            let desk = DeskScale::default();
            let small_base = desk.apply(&base);
            let small = desk.apply(&cfg);
            small.validate().unwrap();
            check_variant_diff(v, &small_base, &small).unwrap();
        }
    }

    #[test]
    fn stray_changes_are_reported() {
        let base = baseline_experiment();
        let mut cfg = AblationVariant::Ds.apply(&base);
        cfg.train.learning_rate = 0.0009;
        let err = check_variant_diff(AblationVariant::Ds, &base, &cfg).unwrap_err().to_string();
        assert!(err.contains("train.learning_rate"), "{err}");
    }

    #[test]
    fn names_parse() {
        for v in AblationVariant::ALL {
            assert_eq!(v.name().parse::<AblationVariant>().unwrap(), v);
        }
        assert_eq!("DCO".parse::<AblationVariant>().unwrap(), AblationVariant::DeeperChannelsOneHot);
        assert_eq!("drop-block".parse::<AblationVariant>().unwrap(), AblationVariant::DropBlock);
        assert!("unet_plus".parse::<AblationVariant>().is_err());
    }

    #[test]
    fn best_config_is_all_three_on_top_of_ds() {
        let base = baseline_experiment();
        let mut best = AblationVariant::DeeperChannelsOneHot.apply(&base);
        best.model.deep_supervision = true;
        assert_eq!(best, ExperimentConfig::default());
    }

    #[test]
    fn desk_table() {
        let desk = DeskScale::default();
        let small = desk.apply(&baseline_experiment());
        assert_eq!(small.model.depth, 4);
        assert_eq!(small.model.channels, vec![4, 8, 16, 32]);
        let best = desk.apply(&ExperimentConfig::default());
        assert_eq!(best.model.depth, 5);
        assert_eq!(best.model.channels, vec![8, 12, 16, 24, 32]);
        assert_eq!(best.augment.patch_size, [32; 3]);
        best.validate().unwrap();
    }
}
