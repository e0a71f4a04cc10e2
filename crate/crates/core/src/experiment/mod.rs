//! Experiment configuration, the staged pipeline and the report grid.

mod pipeline;
mod report;
mod system;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, Split, SynthSpec};
use crate::decode::{DecodeConfig, DecodeError};
use crate::model::{LmConfig, LmTrainConfig, ModelConfig, ModelError, TrainConfig};
use crate::scoring::ScoringError;
use crate::signal::{FrontendConfig, SignalError};
use crate::subword::SubwordError;
use crate::tensor::TensorError;

pub use pipeline::{
    decode_stage, gen_data, lm_train_stage, prep, run_all, score_stage, train_bpe, train_stage, Stage,
};
pub use report::{report, run_grid, Cell, GridConfig, Report, ReportRow, COLUMNS, FAILED_MARKER};
pub use system::{MonoMix, SystemSpec, Units, DEFAULT_SLOW_FACTOR};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("missing {artifact}: run `{stage}` first")]
    MissingStage { stage: &'static str, artifact: PathBuf },
    #[error("invalid system name {name:?}: {reason}")]
    SystemName { name: String, reason: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("malformed artifact {path}: {reason}")]
    Artifact { path: PathBuf, reason: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Subword(#[from] SubwordError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train: SynthSpec,
    pub dev: SynthSpec,
    pub eval: SynthSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        let split = |split: Split, utterances: usize, seed: u64| SynthSpec {
            split,
            utterances,
            seed,
            id_prefix: split.name().to_string(),
            ..SynthSpec::default()
        };
        DataConfig {
            train: split(Split::Train, 50, 7),
            dev: split(Split::Dev, 10, 8),
            eval: split(Split::Eval, 10, 9),
        }
    }
}

impl DataConfig {
    pub fn spec(&self, split: Split) -> &SynthSpec {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Eval => &self.eval,
        }
    }
}

/// Everything one experiment directory needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// System name, e.g. `E2ESW+3W+F3`.
    pub system: String,
    /// 1 keeps particles and noises verbatim, 2 merges them into tags.
    pub label: u8,
    /// Seeds model initialization and batch order.
    pub seed: u64,
    /// English unit count for subword systems that do not name one.
    pub subword_units: usize,
    pub data: DataConfig,
    pub frontend: FrontendConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub lm: LmConfig,
    pub lm_train: LmTrainConfig,
    pub decode: DecodeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            system: "E2E".into(),
            label: 1,
            seed: 1,
            subword_units: 60,
            data: DataConfig::default(),
            frontend: FrontendConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            lm: LmConfig::default(),
            lm_train: LmTrainConfig::default(),
            decode: DecodeConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text)
    }

    pub fn system_spec(&self) -> Result<SystemSpec> {
        SystemSpec::parse(&self.system)
    }

    pub fn validate(&self) -> Result<()> {
        if self.label != 1 && self.label != 2 {
            return Err(ExperimentError::Config(format!("label must be 1 or 2, got {}", self.label)));
        }
        self.system_spec()?;
        for split in Split::ALL {
            let spec = self.data.spec(split);
            if spec.split != split {
                return Err(ExperimentError::Config(format!("data.{split} has split {}", spec.split)));
            }
            spec.validate()?;
        }
        ModelConfig {
            input_dim: self.frontend.n_mels,
            ..self.model.clone()
        }
        .validate()?;
        self.decode.validate()?;
        Ok(())
    }
}
