//! Run configuration: a TOML file with `[dataset]`, `[model]`, `[pretrain]`,
//! `[synthesis]`, `[train]` and `[output]` sections. Every key is optional;
//! unknown keys are errors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use bninvert_core::synthesis::{LabelScheme, SynthesisConfig};
use bninvert_core::train::TrainConfig;

use crate::error::{Error, Result};

pub const RESOLVED_FILE: &str = "config.resolved.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection { seed: 0, train_size: crate::fixture::TRAIN_SIZE, test_size: crate::fixture::TEST_SIZE }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Channel width of the TinyResNet.
    pub width: usize,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { width: 8, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eta_min: f64,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection { epochs: d.epochs, batch_size: d.batch_size, lr: d.lr, eta_min: d.eta_min, seed: d.seed }
    }
}

impl TrainSection {
    pub fn to_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            eta_min: self.eta_min,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisSection {
    pub steps: usize,
    pub batch_size: usize,
    pub total: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// `round_robin` or `random_balanced`.
    pub label_scheme: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_max: Option<f64>,
    pub match_std: bool,
    pub bn_weight: f64,
    pub ce_weight: f64,
}

impl Default for SynthesisSection {
    fn default() -> Self {
        let d = SynthesisConfig::default();
        SynthesisSection {
            steps: d.steps,
            batch_size: d.batch_size,
            total: d.total,
            lr: d.lr,
            beta1: d.beta1,
            beta2: d.beta2,
            seed: d.seed,
            label_scheme: "round_robin".into(),
            clip_min: None,
            clip_max: None,
            match_std: d.match_std,
            bn_weight: d.bn_weight,
            ce_weight: d.ce_weight,
        }
    }
}

impl SynthesisSection {
    pub fn to_config(&self) -> Result<SynthesisConfig> {
        let label_scheme = match self.label_scheme.as_str() {
            "round_robin" => LabelScheme::RoundRobin,
            "random_balanced" => LabelScheme::RandomBalanced,
            other => return Err(Error::Config(format!("unknown label_scheme {other:?}"))),
        };
        let clip = match (self.clip_min, self.clip_max) {
            (None, None) => None,
            (Some(lo), Some(hi)) => Some((lo, hi)),
            _ => return Err(Error::Config("clip_min and clip_max must be set together".into())),
        };
        Ok(SynthesisConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            total: self.total,
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            seed: self.seed,
            label_scheme,
            clip,
            match_std: self.match_std,
            bn_weight: self.bn_weight,
            ce_weight: self.ce_weight,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Images per class written as PPM after synthesis.
    pub samples_per_class: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { samples_per_class: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub pretrain: TrainSection,
    pub synthesis: SynthesisSection,
    pub train: TrainSection,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::usage(format!("config not found: {}", path.display())));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Routes one run seed into every section.
    pub fn set_seed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.model.seed = seed;
        self.pretrain.seed = seed;
        self.synthesis.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: bninvert_core::Error| Error::Config(e.to_string());
        if self.model.width == 0 {
            return Err(Error::Config("model.width must be at least 1".into()));
        }
        self.pretrain.to_config().validate().map_err(cfg)?;
        self.train.to_config().validate().map_err(cfg)?;
        let s = self.synthesis.to_config()?;
        if s.steps == 0 || s.batch_size == 0 || s.total % s.batch_size != 0 {
            return Err(Error::Config(format!(
                "synthesis needs steps >= 1 and total divisible by batch_size (total={}, batch_size={})",
                s.total, s.batch_size
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RESOLVED_FILE);
        fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))
    }
}
