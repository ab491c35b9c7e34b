//! Run configuration: one TOML file describing every pipeline stage.
//! Unknown keys are rejected so typos fail loudly; missing keys take the
//! documented defaults.

use crate::augment::ChannelSet;
use crate::gbm::BoostConfig;
use crate::phantom::PhantomSpec;
use crate::xmasnet::{NetworkConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunConfigError {
    #[error("cannot parse run config: {0}")]
    Parse(String),
    #[error("invalid run config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mask and split parameters for the preprocessing stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// Isotropic voxel size every channel is resampled to, in millimeters.
    pub target_spacing_mm: f64,
    /// Fraction of cases held out for validation.
    pub val_fraction: f64,
    pub rel_threshold: f64,
    pub max_radius_mm: f64,
    pub morph_radius_vox: usize,
    /// Ball radius substituted when region growing yields an empty mask.
    pub fallback_ball_radius_mm: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_spacing_mm: 1.5,
            val_fraction: 0.25,
            rel_threshold: 0.5,
            max_radius_mm: 15.0,
            morph_radius_vox: 1,
            fallback_ball_radius_mm: 5.0,
        }
    }
}

/// View-grid size and channel sets for sample extraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub rotations_per_orientation: usize,
    pub shears: usize,
    pub channel_sets: Vec<String>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotations_per_orientation: 4,
            shears: 3,
            channel_sets: ChannelSet::ALL.iter().map(|c| c.code().to_string()).collect(),
        }
    }
}

impl AugmentConfig {
    pub fn parsed_channel_sets(&self) -> Result<Vec<ChannelSet>, RunConfigError> {
        self.channel_sets
            .iter()
            .map(|code| {
                ChannelSet::from_code(code)
                    .ok_or_else(|| RunConfigError::Invalid(format!("unknown channel set {code:?}")))
            })
            .collect()
    }
}

/// Network shape and optimizer settings for the CNN stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CnnConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig { network: NetworkConfig::default(), train: TrainConfig::default() }
    }
}

/// Boosted-tree stage settings: base hyperparameters, cross-validation
/// fold count, the elimination floor, and whether to sweep the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GbmRunConfig {
    pub boost: BoostConfig,
    pub k_folds: usize,
    pub min_features: usize,
    /// Train one model per hyperparameter-grid point instead of only the
    /// base configuration.
    pub sweep_grid: bool,
}

impl Default for GbmRunConfig {
    fn default() -> Self {
        GbmRunConfig { boost: BoostConfig::default(), k_folds: 5, min_features: 10, sweep_grid: false }
    }
}

/// Greedy ensemble-selection settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub max_iters: usize,
    pub patience: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig { max_iters: 40, patience: 5 }
    }
}

/// The complete run description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every stage derives its own stream from it.
    pub seed: u64,
    /// Worker threads; 0 keeps the library default.
    pub jobs: usize,
    pub phantom: PhantomSpec,
    pub preprocess: PreprocessConfig,
    pub augment: AugmentConfig,
    pub cnn: CnnConfig,
    pub gbm: GbmRunConfig,
    pub ensemble: EnsembleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            jobs: 0,
            phantom: PhantomSpec::default(),
            preprocess: PreprocessConfig::default(),
            augment: AugmentConfig::default(),
            cnn: CnnConfig::default(),
            gbm: GbmRunConfig::default(),
            ensemble: EnsembleConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), RunConfigError> {
        self.phantom.validate().map_err(|e| RunConfigError::Invalid(e.to_string()))?;
        self.cnn.network.validate().map_err(|e| RunConfigError::Invalid(e.to_string()))?;
        self.cnn.train.validate().map_err(|e| RunConfigError::Invalid(e.to_string()))?;
        self.gbm.boost.validate().map_err(|e| RunConfigError::Invalid(e.to_string()))?;
        if !(self.preprocess.target_spacing_mm > 0.0) {
            return Err(RunConfigError::Invalid(format!(
                "target_spacing_mm must be positive, got {}",
                self.preprocess.target_spacing_mm
            )));
        }
        if !(self.preprocess.val_fraction > 0.0 && self.preprocess.val_fraction < 1.0) {
            return Err(RunConfigError::Invalid(format!(
                "val_fraction must lie in (0, 1), got {}",
                self.preprocess.val_fraction
            )));
        }
        if !(self.preprocess.fallback_ball_radius_mm > 0.0) {
            return Err(RunConfigError::Invalid("fallback_ball_radius_mm must be positive".into()));
        }
        if self.augment.rotations_per_orientation == 0 || self.augment.shears == 0 {
            return Err(RunConfigError::Invalid(
                "rotations_per_orientation and shears must be at least 1".into(),
            ));
        }
        let sets = self.augment.parsed_channel_sets()?;
        if sets.is_empty() {
            return Err(RunConfigError::Invalid("at least one channel set is required".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &sets {
            if !seen.insert(s.code()) {
                return Err(RunConfigError::Invalid(format!("duplicate channel set {}", s.code())));
            }
        }
        if self.gbm.k_folds < 2 {
            return Err(RunConfigError::Invalid(format!(
                "k_folds must be at least 2, got {}",
                self.gbm.k_folds
            )));
        }
        if self.gbm.min_features == 0 {
            return Err(RunConfigError::Invalid("min_features must be at least 1".into()));
        }
        if self.ensemble.max_iters == 0 || self.ensemble.patience == 0 {
            return Err(RunConfigError::Invalid(
                "ensemble max_iters and patience must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Stable content hash of the effective configuration, hex encoded.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn parse_run_config(text: &str) -> Result<RunConfig, RunConfigError> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| RunConfigError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn read_run_config(path: &Path) -> Result<RunConfig, RunConfigError> {
    let text = fs::read_to_string(path)?;
    parse_run_config(&text)
}

pub fn write_run_config(cfg: &RunConfig, path: &Path) -> Result<(), RunConfigError> {
    let text = toml::to_string_pretty(cfg).map_err(|e| RunConfigError::Parse(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}
