//! Experiment configuration: one JSON document describing a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{DatasetProfile, LoadOptions, DEFAULT_MIN_COUNT};
use crate::error::{Error, Result};
use crate::graph::DEFAULT_WINDOW;
use crate::model::ModelConfig;
use crate::spectral::Construction;
use crate::train::TrainConfig;

pub const CONFIG_SCHEMA: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Corpus TSV.
    pub dataset: Option<PathBuf>,
    pub profile: DatasetProfile,
    pub min_count: usize,
    pub window: usize,
    pub construction: Construction,
    pub val_fraction: f64,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA,
            dataset: None,
            profile: DatasetProfile::DEFAULT,
            min_count: DEFAULT_MIN_COUNT,
            window: DEFAULT_WINDOW,
            construction: Construction::Dgow,
            val_fraction: 0.1,
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA {
            return Err(Error::Config(format!("unsupported schema_version {}", self.schema_version)));
        }
        if self.window < 2 {
            return Err(Error::Config("window must be at least 2".into()));
        }
        if self.min_count == 0 {
            return Err(Error::Config("min_count must be at least 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction {} not in (0, 1)", self.val_fraction)));
        }
        self.model.validate()?;
        self.train.validate()
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            profile: self.profile,
            min_count: self.min_count,
        }
    }

    /// SHA-256 of the compact JSON form, hex-encoded. The output directory
    /// is left out: where results go does not change them.
    pub fn hash(&self) -> String {
        let keyed = Self {
            output_dir: None,
            ..self.clone()
        };
        let json = serde_json::to_string(&keyed).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c = ExperimentConfig::from_json(r#"{"window": 5, "model": {"aggregator": "prod"}}"#).unwrap();
        assert_eq!(c.window, 5);
        assert_eq!(c.model.aggregator, crate::model::Aggregator::Prod);
        assert_eq!(c.model.mlp_hidden, 128);
        assert_eq!(c.train.lr, 1e-3);
    }

    #[test]
    fn rejects_bad_documents() {
        assert!(ExperimentConfig::from_json(r#"{"windw": 5}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"window": 1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"val_fraction": 1.0}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"train": {"lr": 0}}"#).is_err());
        assert!(ExperimentConfig::from_json("[").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { seed: 1, ..a.clone() };
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), a.clone().hash());
        let moved = ExperimentConfig {
            output_dir: Some("elsewhere".into()),
            ..a.clone()
        };
        assert_eq!(a.hash(), moved.hash());
    }
}
