//! Run manifests: enough to recreate a run's splits and trace its outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::checkpoint::atomic_write;
use crate::trainer::{make_folds, FoldSplit};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub command: String,
    pub crate_version: String,
    pub run_name: Option<String>,
    pub config_hash: Option<String>,
    pub config_toml: Option<String>,
    /// Named seeds, e.g. `folds`, `train`.
    pub seeds: BTreeMap<String, u64>,
    pub data_root: Option<PathBuf>,
    pub ids: Vec<String>,
    pub fold_count: usize,
    pub splits: Vec<FoldSplit>,
    pub artifacts: Vec<PathBuf>,
    pub runtime_seconds: f64,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            manifest_version: MANIFEST_VERSION,
            command: command.to_string(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            run_name: None,
            config_hash: None,
            config_toml: None,
            seeds: BTreeMap::new(),
            data_root: None,
            ids: Vec::new(),
            fold_count: 0,
            splits: Vec::new(),
            artifacts: Vec::new(),
            runtime_seconds: 0.0,
        }
    }

    pub fn with_config(mut self, cfg: &ExperimentConfig) -> Self {
        self.config_hash = Some(cfg.hash());
        self.config_toml = Some(cfg.to_toml());
        self
    }

    pub fn with_splits(mut self, ids: &[String], splits: &[FoldSplit], seed: u64) -> Self {
        self.ids = ids.to_vec();
        self.fold_count = splits.len();
        self.splits = splits.to_vec();
        self.seeds.insert("folds".into(), seed);
        self
    }

    pub fn config(&self) -> Result<Option<ExperimentConfig>> {
        self.config_toml.as_deref().map(ExperimentConfig::from_toml).transpose()
    }

    /// Recomputes the fold assignment from the recorded ids and seed.
    pub fn reproduce_splits(&self) -> Result<Vec<FoldSplit>> {
        let seed = *self
            .seeds
            .get("folds")
            .ok_or_else(|| Error::Invalid("manifest has no fold seed".into()))?;
        make_folds(&self.ids, self.fold_count, seed)
    }

    /// Fails unless the recorded splits equal a fresh recomputation.
    pub fn verify_splits(&self) -> Result<()> {
        if self.reproduce_splits()? == self.splits {
            Ok(())
        } else {
            Err(Error::Invalid(format!(
                "splits recorded by `{}` do not match the ids and seed",
                self.command
            )))
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).expect("manifest serialises");
        atomic_write(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let m: RunManifest = serde_json::from_slice(&bytes).map_err(|e| Error::format("manifest", path, e))?;
        if m.manifest_version != MANIFEST_VERSION {
            return Err(Error::format(
                "manifest",
                path,
                format!("version {} is not supported", m.manifest_version),
            ));
        }
        Ok(m)
    }
}
