//! Pipeline configuration: one TOML file with a section per stage, plus
//! command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sparsemo_core::dataio::SynthConfig;
use sparsemo_core::eval::EvalOptions;
use sparsemo_core::prior::{LossMode, PriorConfig, PriorTrainConfig, SparseTrainConfig};
use sparsemo_core::sequence::{SeqTrainConfig, SequenceConfig};
use sparsemo_core::{Error, Result};

/// Environment variable naming the default data directory.
pub const DATA_ROOT_ENV: &str = "SPMO_DATA_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Sequence model without motion embeddings or the motion loss.
    NoMotionPrior,
    /// Sequence model trained without the motion loss.
    NoMotionLoss,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoMotionPrior => "no-motion-prior",
            Ablation::NoMotionLoss => "no-motion-loss",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directory; falls back to `$SPMO_DATA_ROOT`, then `<out>/data`.
    pub root: Option<PathBuf>,
    /// Held-out clips per class written by `synth` for `infer` and `eval`.
    pub test_clips_per_class: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            test_clips_per_class: 2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSection {
    pub model: PriorConfig,
    pub train: PriorTrainConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SequenceSection {
    pub model: SequenceConfig,
    pub train: SeqTrainConfig,
    pub ablation: Option<Ablation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub options: EvalOptions,
    /// Use this evaluation prior instead of training one.
    pub prior_checkpoint: Option<PathBuf>,
    /// The evaluation prior is trained with seed `seed + prior_seed_offset`
    /// and embedding table seed `synth.embedding_seed + embedding_seed_offset`.
    pub prior_seed_offset: u64,
    pub embedding_seed_offset: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            options: EvalOptions::default(),
            prior_checkpoint: None,
            prior_seed_offset: 1000,
            embedding_seed_offset: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Run seed; every stage seed is derived from it.
    pub seed: u64,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub prior: PriorSection,
    pub sparse: SparseTrainConfig,
    pub sequence: SequenceSection,
    pub eval: EvalSection,
}

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<LossMode>,
    pub ablation: Option<Ablation>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().replace('\n', " ")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
    }

    /// Applies overrides and derives stage seeds.
    pub fn resolve(mut self, overrides: &Overrides) -> Result<Self> {
        if let Some(seed) = overrides.seed {
            self.seed = seed;
        }
        if let Some(mode) = overrides.mode {
            self.sparse.mode = mode;
        }
        if overrides.ablation.is_some() {
            self.sequence.ablation = overrides.ablation;
        }
        if self.seed > i64::MAX as u64 - 3 - self.eval.prior_seed_offset {
            return Err(Error::Config(format!("seed {} is too large", self.seed)));
        }
        self.prior.train.seed = self.seed;
        self.sparse.seed = self.seed + 1;
        self.sequence.train.seed = self.seed + 2;
        match self.sequence.ablation {
            Some(Ablation::NoMotionPrior) => {
                self.sequence.model.use_motion_prior = false;
                self.sequence.train.weights.mo = 0.0;
            }
            Some(Ablation::NoMotionLoss) => self.sequence.train.weights.mo = 0.0,
            None => {}
        }
        // An environment-supplied root is recorded; paths derived from the
        // run directory are not, so snapshots do not depend on where the
        // run lives.
        if self.data.root.is_none() {
            self.data.root = std::env::var_os(DATA_ROOT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
        }
        self.synth.validate()?;
        self.prior.model.validate()?;
        Ok(self)
    }

    /// Dataset directory of a run in `out`.
    pub fn data_root(&self, out: &Path) -> PathBuf {
        self.data.root.clone().unwrap_or_else(|| out.join("data"))
    }
}
