//! Run configuration, read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{CorpusConfig, DataShape};
use crate::error::{Error, Result};
use crate::gates::GateConfig;
use crate::model::ModelSpec;
use crate::plan::PlanOptions;
use crate::train::{PipelineKind, TrainConfig};

/// Everything a run depends on besides the code itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds model initialization, gate noise and batch sampling.
    pub seed: u64,
    /// Seeds the synthetic teachers and token sequences.
    pub corpus_seed: u64,
    pub pipeline: PipelineKind,
    pub model: ModelSpec,
    pub gates: GateConfig,
    pub plan: PlanOptions,
    pub corpus: CorpusConfig,
    pub training: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus_seed: 0,
            pipeline: PipelineKind::Joint,
            model: ModelSpec::default(),
            gates: GateConfig::default(),
            plan: PlanOptions::default(),
            corpus: CorpusConfig::default(),
            training: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.build()?;
        self.gates.validate()?;
        self.corpus.validate()?;
        self.training.validate()?;
        if self.model.n_speakers <= self.corpus.pretrain_speakers {
            return Err(Error::Config(format!(
                "n_speakers = {} leaves no row for a cloned speaker after {} pretraining speakers",
                self.model.n_speakers, self.corpus.pretrain_speakers
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn data_shape(&self) -> DataShape {
        DataShape {
            vocab_size: self.model.vocab_size,
            n_mel: self.model.n_mel,
        }
    }

    /// Speaker row that a cloned speaker occupies.
    pub fn clone_slot(&self) -> usize {
        self.corpus.pretrain_speakers
    }
}
