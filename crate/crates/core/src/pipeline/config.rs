use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::models::LayerSet;
use crate::numerics::PlateauSchedule;
use crate::pairing::PairingConfig;
use crate::synthdata::DatasetSpec;

/// Feature widths covered by the dimensionality sweep.
pub const FEAT_DIMS: [usize; 4] = [64, 128, 256, 512];

/// Seeds every averaged number is reported over.
pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            factor: 0.5,
            patience: 3,
            min_lr: 1e-6,
        }
    }
}

impl PlateauConfig {
    pub fn schedule(&self, lr: f64) -> PlateauSchedule {
        PlateauSchedule::new(lr, self.factor, self.patience, self.min_lr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub classifier_epochs: usize,
    pub translator_epochs: usize,
    pub adapt_epochs: usize,
    pub oracle_epochs: usize,
    pub weights: LossWeights,
    pub feat_dim: usize,
    /// Extractor hidden width as a multiple of `feat_dim`.
    pub hidden_multiplier: usize,
    pub extractor_depth: usize,
    /// Translator layers for the style term: 0 = hidden, 1 = output. The
    /// hidden reference is produced by the translator being trained, so it
    /// moves with every step; matching it tends to inflate the hidden
    /// weights instead of closing the gap. Off by default.
    pub style_layers: LayerSet,
    pub plateau: PlateauConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch: 64,
            classifier_epochs: 30,
            translator_epochs: 30,
            adapt_epochs: 20,
            oracle_epochs: 30,
            weights: LossWeights::default(),
            feat_dim: 128,
            hidden_multiplier: 4,
            extractor_depth: 3,
            style_layers: LayerSet(vec![1]),
            plateau: PlateauConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn hidden(&self) -> usize {
        self.feat_dim * self.hidden_multiplier
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch == 0 || self.hidden_multiplier == 0 || self.extractor_depth == 0 {
            return Err(Error::Config(
                "batch, hidden_multiplier and extractor_depth must be >= 1".into(),
            ));
        }
        if !FEAT_DIMS.contains(&self.feat_dim) {
            return Err(Error::Config(format!(
                "feat_dim {} not in {FEAT_DIMS:?}",
                self.feat_dim
            )));
        }
        let p = &self.plateau;
        if !(p.factor > 0.0 && p.factor < 1.0) || !(p.min_lr >= 0.0 && p.min_lr.is_finite()) {
            return Err(Error::Config("plateau factor must be in (0,1), min_lr >= 0".into()));
        }
        self.weights.validate()?;
        self.style_layers.validate(2)
    }
}

/// The complete, file-backed description of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub pairing: PairingConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        self.pairing.validate()
    }

    /// Uses one seed for data generation and training.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.dataset.seed = seed;
        self.train.seed = seed;
        self
    }
}
