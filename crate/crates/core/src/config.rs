//! Run configuration: one TOML file with corpus, model, train and eval tables.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CscError, Result};
use crate::metrics::{EnrollStart, TrialPolicy};
use crate::model::ModelConfig;
use crate::synth::CorpusConfig;
use crate::train::TrainConfig;

pub const SEED_ENV: &str = "CSC_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub enroll_utterances: usize,
    pub enroll_start: EnrollStart,
    pub trial_seed: u64,
    /// Default directory for run artifacts.
    pub output_dir: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let p = TrialPolicy::default();
        Self { enroll_utterances: p.enroll_utterances, enroll_start: p.enroll_start, trial_seed: p.seed, output_dir: "runs/csc".into() }
    }
}

impl EvalConfig {
    pub fn policy(&self) -> TrialPolicy {
        TrialPolicy { enroll_utterances: self.enroll_utterances, enroll_start: self.enroll_start, seed: self.trial_seed }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CscError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file, then applies the seed override
    /// from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CscError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| CscError::Config(format!("{}: {e}", path.display())))?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    /// `CSC_SEED` replaces the training seed (initialization, bank and
    /// shuffling); the corpus keeps its own seed.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.train.seed = v.trim().parse().map_err(|_| CscError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.corpus.sources != self.model.sources {
            return Err(CscError::Config(format!("corpus mixes {} sources but the model separates {}", self.corpus.sources, self.model.sources)));
        }
        if self.corpus.samples_per_utterance() < self.model.encoder.window {
            return Err(CscError::Config("utterances are shorter than one encoder window".into()));
        }
        if self.eval.enroll_utterances == 0 || self.eval.enroll_utterances >= self.corpus.utterances_per_speaker {
            return Err(CscError::Config("enroll_utterances must leave at least one probe utterance per speaker".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CscError::Config(e.to_string()))
    }
}
