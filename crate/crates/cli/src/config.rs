//! Run configuration shared by every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use hoca_core::autodiff::AdamConfig;
use hoca_core::captioner::{DatasetSpec, ModelConfig, TrainConfig};
use hoca_core::maf::{ArityConfig, MafConfig, Mechanism};
use hoca_core::rng::GENERATOR_ID;
use hoca_core::{HocaError, Result};
use serde::{Deserialize, Serialize};

pub const RESOLVED_CONFIG: &str = "config.toml";

/// Every field is optional in the file; missing fields take the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Random generator the seed applies to; recorded for reproducibility.
    pub generator: String,
    pub mechanism: Mechanism,
    pub arities: ArityConfig,
    pub rank: usize,
    pub hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beam_width: usize,
    pub max_len: usize,
    pub dataset: DatasetSpec,
    /// Feature bundle to decode instead of a synthetic item.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bundle: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let maf = MafConfig::default();
        Self {
            seed: 0,
            generator: GENERATOR_ID.into(),
            mechanism: maf.mechanism,
            arities: maf.arities,
            rank: maf.rank,
            hidden: ModelConfig::default().hidden,
            lr: AdamConfig::default().lr,
            epochs: 30,
            batch_size: 16,
            beam_width: 5,
            max_len: 8,
            dataset: DatasetSpec::default(),
            bundle: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| HocaError::Config(format!("{}: {e}", path.display())))
    }

    /// Checks every field; the message starts with the offending field name.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(HocaError::Config(msg));
        if self.generator != GENERATOR_ID {
            return fail(format!("generator: only {GENERATOR_ID:?} is available, got {:?}", self.generator));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr: must be a positive number, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return fail("batch_size: must be positive".into());
        }
        if self.beam_width == 0 {
            return fail("beam_width: must be at least 1".into());
        }
        if self.max_len == 0 {
            return fail("max_len: must be at least 1".into());
        }
        self.dataset.validate()?;
        self.model().validate(self.dataset.n_modalities)
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            maf: MafConfig {
                mechanism: self.mechanism,
                arities: self.arities.clone(),
                rank: self.rank,
                ..MafConfig::default()
            },
            hidden: self.hidden,
            ..ModelConfig::default()
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
            seed: self.seed,
        }
    }

    /// Writes the resolved configuration into `dir`.
    pub fn save_into(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let text = toml::to_string(self).map_err(|e| HocaError::Format(e.to_string()))?;
        fs::write(dir.join(RESOLVED_CONFIG), text)?;
        Ok(())
    }
}

/// Command-line overrides applied on top of a file or the defaults.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mechanism: Option<Mechanism>,
    pub arities: Option<ArityConfig>,
    pub rank: Option<usize>,
    pub hidden: Option<usize>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub beam_width: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, mut config: RunConfig) -> RunConfig {
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = self.mechanism {
            config.mechanism = v;
            // Unary only has one family; keep a lone `--mechanism unary` valid.
            if v == Mechanism::Unary && self.arities.is_none() {
                config.arities = ArityConfig::unary();
            }
        }
        if let Some(v) = &self.arities {
            config.arities = v.clone();
        }
        if let Some(v) = self.rank {
            config.rank = v;
        }
        if let Some(v) = self.hidden {
            config.hidden = v;
        }
        if let Some(v) = self.lr {
            config.lr = v;
        }
        if let Some(v) = self.epochs {
            config.epochs = v;
        }
        if let Some(v) = self.beam_width {
            config.beam_width = v;
        }
        config
    }
}

/// Loads `path` (or the defaults), applies `overrides`, and validates.
pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let base = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let config = overrides.apply(base);
    config.validate()?;
    Ok(config)
}
