//! TOML run configuration shared by all commands.
//!
//! Every field has a default, unknown keys are rejected, and relative paths
//! are resolved against the directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::bank::ScoreOptions;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::toy::ToySpec;
use crate::train::{TrainConfig, TrainSetup};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset root holding class directories, or a single class directory.
    pub root: PathBuf,
    /// Classes to process; empty means every class under `root`.
    pub classes: Vec<String>,
    /// Checkpoints, banks, loss logs and reports go to `<work_dir>/<class>/`.
    pub work_dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: PathBuf::from("data/toy"),
            classes: Vec::new(),
            work_dir: PathBuf::from("runs/toy"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySection {
    /// Class directory name created under `data.root`.
    pub class: String,
    #[serde(flatten)]
    pub spec: ToySpec,
}

impl Default for ToySection {
    fn default() -> Self {
        ToySection {
            class: "toy".into(),
            spec: ToySpec::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderSection {
    /// Hidden width of the decoder; `2 · c3` when unset.
    pub hidden: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BankSection {
    /// Keep this fraction of rows by greedy coreset selection; full bank when unset.
    pub coreset_fraction: Option<f64>,
    pub coreset_seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    /// Neighborhood size for reweighting the image score; off when unset.
    pub reweight_neighbors: Option<usize>,
    /// Write heatmaps under this directory.
    pub heatmaps: Option<PathBuf>,
    pub deterministic: bool,
}

impl EvaluationSection {
    pub fn score_options(&self) -> ScoreOptions {
        ScoreOptions {
            reweight_neighbors: self.reweight_neighbors,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub toy: ToySection,
    pub augmentation: AugmentConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderSection,
    pub loss: LossConfig,
    pub training: TrainConfig,
    pub bank: BankSection,
    pub evaluation: EvaluationSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let field = e.span().map(|s| format!("bytes {}..{}", s.start, s.end)).unwrap_or_default();
            Error::config(field, e.message().trim())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Parses `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::from_toml(&text).map_err(|e| match e {
            Error::Config { field, message } => Error::Config {
                field: format!("{} {field}", path.display()),
                message,
            },
            other => other,
        })?;
        let absolute = std::path::absolute(path).map_err(|e| Error::io(path, e))?;
        cfg.resolve_paths(absolute.parent().unwrap_or(Path::new("/")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.root);
        fix(&mut self.data.work_dir);
        if let Some(p) = self.encoder.pretrained_weights.as_mut() {
            fix(p);
        }
        if let Some(p) = self.evaluation.heatmaps.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.toy.spec.validate()?;
        self.augmentation.validate()?;
        self.encoder.validate()?;
        self.loss.validate()?;
        self.training.validate()?;
        if let Some(f) = self.bank.coreset_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::config("bank.coreset_fraction", "must lie in (0, 1]"));
            }
        }
        if self.evaluation.reweight_neighbors == Some(0) {
            return Err(Error::config("evaluation.reweight_neighbors", "must be at least 1"));
        }
        if self.decoder.hidden == Some(0) {
            return Err(Error::config("decoder.hidden", "must be positive"));
        }
        if self.toy.class.is_empty() || self.toy.class.contains(['/', '\\']) {
            return Err(Error::config("toy.class", "must be a plain directory name"));
        }
        Ok(())
    }

    pub fn train_setup(&self) -> TrainSetup {
        TrainSetup {
            augment: self.augmentation.clone(),
            encoder: self.encoder.clone(),
            decoder_hidden: self.decoder.hidden,
            loss: self.loss.clone(),
            train: self.training.clone(),
        }
    }

    pub fn class_work_dir(&self, class: &str) -> PathBuf {
        self.data.work_dir.join(class)
    }
}
