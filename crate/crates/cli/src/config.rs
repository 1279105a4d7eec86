//! The run configuration: every module's settings in one JSON document.

use std::path::Path;

use lcz_core::forest::ForestParams;
use lcz_core::nn::train::TrainConfig;
use lcz_core::nn::Architecture;
use lcz_core::raster::DEFAULT_PATCH_SIZE;
use lcz_core::sampling::RuleConfig;
use lcz_core::synth::ScenarioSpec;
use lcz_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NdviConfig {
    pub nir_band: usize,
    pub red_band: usize,
}

impl Default for NdviConfig {
    fn default() -> Self {
        NdviConfig { nir_band: 3, red_band: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Train, validation, test.
    pub ratios: [f64; 3],
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { ratios: [0.7, 0.15, 0.15] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Defaults to the largest class count.
    pub target_per_class: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    /// Last frozen layer; defaults to the last convolutional block.
    pub freeze_through: Option<i64>,
    pub head_hidden: usize,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            freeze_through: None,
            head_hidden: lcz_core::transfer::DEFAULT_HEAD_HIDDEN,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapConfig {
    pub cell_size_m: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig { cell_size_m: 100.0 }
    }
}

/// `seed` is the single seed of a run; it replaces the `seed` fields of the
/// nested training and scenario sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub deterministic: bool,
    pub threads: Option<usize>,
    pub patch_size: usize,
    pub ndvi: NdviConfig,
    pub rules: RuleConfig,
    pub scenario: ScenarioSpec,
    pub split: SplitConfig,
    pub augment: AugmentConfig,
    pub forest: ForestParams,
    pub architecture: Architecture,
    pub train: TrainConfig,
    pub transfer: TransferConfig,
    pub map: MapConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            deterministic: false,
            threads: None,
            patch_size: DEFAULT_PATCH_SIZE,
            ndvi: NdviConfig::default(),
            rules: RuleConfig::default(),
            scenario: ScenarioSpec::default(),
            split: SplitConfig::default(),
            augment: AugmentConfig::default(),
            forest: ForestParams::default(),
            architecture: Architecture::default(),
            train: TrainConfig::default(),
            transfer: TransferConfig::default(),
            map: MapConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    /// Pushes the run seed into the nested sections and checks them.
    pub fn finish(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.scenario.seed = self.seed;
        if self.threads == Some(0) {
            return Err(Error::InvalidConfig("threads must be at least 1".into()));
        }
        self.rules.validate()?;
        self.train.validate()?;
        self.architecture.validate()?;
        if self.map.cell_size_m.is_nan() || self.map.cell_size_m <= 0.0 {
            return Err(Error::InvalidConfig(format!("cell_size_m {} must be positive", self.map.cell_size_m)));
        }
        Ok(self)
    }
}
