//! Experiment configuration: one TOML document, overridable by flags.

use std::path::{Path, PathBuf};

use ageaudit::audit::{AuditConfig, TinyNetSpec};
use ageaudit::filters::Preprocessing;
use ageaudit::learn::train::Loss;
use ageaudit::learn::{LrSchedule, OptimizerKind, TrainConfig};
use ageaudit::sensor::SyntheticConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// `<root>/<class dir>/*.png`.
    pub root: Option<PathBuf>,
    pub synthetic: Option<SyntheticConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Tinynet(TinyNetSpec),
    External {
        command: Vec<String>,
        num_classes: usize,
        #[serde(default)]
        preprocess: Preprocessing,
    },
    /// A directory written by `train`.
    Pretrained {
        path: PathBuf,
    },
}

/// Training settings; the seed comes from the master seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: Loss,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            optimizer: t.optimizer,
            schedule: t.schedule,
            epochs: t.epochs,
            batch_size: t.batch_size,
            loss: t.loss,
        }
    }
}

impl TrainSection {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            optimizer: self.optimizer,
            schedule: self.schedule.clone(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            loss: self.loss,
            seed,
        }
    }
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Label of the audited image source in reports.
    #[serde(default)]
    pub imager: Option<String>,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub audit: AuditConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn from_snapshot(value: serde_json::Value) -> Result<Self, CliError> {
        serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Checks the pieces a command needs, before any computation.
    pub fn validate_for(&self, command: Need) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        match (&self.dataset.root, &self.dataset.synthetic, command) {
            (_, None, Need::Generate) => {
                return bad("`generate` needs a [dataset.synthetic] block".into())
            }
            (Some(_), Some(_), Need::Train | Need::Audit) => {
                return bad("dataset: give either `root` or a synthetic block, not both".into())
            }
            (None, None, Need::Train | Need::Audit) => {
                return bad("dataset: `root` or a synthetic block is required".into())
            }
            (Some(root), _, Need::Train | Need::Audit) if !root.is_dir() => {
                return bad(format!("dataset root {} does not exist", root.display()))
            }
            _ => {}
        }
        if matches!(command, Need::Train | Need::Audit) {
            match &self.model {
                None => return bad("a [model] section is required".into()),
                Some(ModelConfig::Tinynet(spec)) => spec.validate().map_err(CliError::from)?,
                Some(ModelConfig::External {
                    command,
                    num_classes,
                    ..
                }) => {
                    if command.is_empty() {
                        return bad("model.command is empty".into());
                    }
                    if *num_classes < 2 {
                        return bad("model.num_classes must be at least 2".into());
                    }
                }
                Some(ModelConfig::Pretrained { path }) => {
                    if !path
                        .join(ageaudit::learn::classifier::ENSEMBLE_MANIFEST)
                        .is_file()
                    {
                        return bad(format!("no trained model found at {}", path.display()));
                    }
                }
            }
        }
        if command == Need::Train && !matches!(self.model, Some(ModelConfig::Tinynet(_))) {
            return bad("`train` needs model.kind = \"tinynet\"".into());
        }
        if matches!(command, Need::Train | Need::Audit) {
            self.train.with_seed(self.seed).validate()?;
        }
        if command == Need::Audit {
            self.audit.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Need {
    Generate,
    Train,
    Audit,
}
