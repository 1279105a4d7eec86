//! Frozen-backbone transfer: reuse a trained network's convolutional layers
//! and train a fresh two-layer dense head on a new domain.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::io::{load_model, save_model, ModelKind};
use crate::nn::model::{ChannelNorm, MscnnModel};
use crate::nn::train::{train_mscnn, History, TrainConfig};
use crate::nn::dense::DenseLayer;
use crate::nn::Architecture;
use crate::rng;
use crate::sampling::SampleSet;
use crate::scalar::Scalar;

pub const DEFAULT_HEAD_HIDDEN: usize = 128;

/// A network whose layers up to `freeze_through` are frozen. Layer indices
/// follow [`Architecture::n_layers`]: 0 is the multi-scale layer, then the
/// blocks, then the two head layers. `-1` freezes nothing.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferModel<T> {
    pub model: MscnnModel<T>,
    pub freeze_through: i64,
}

impl<T: Scalar> TransferModel<T> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_model(&self.model, ModelKind::Transfer, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (model, _) = load_model::<T>(path)?;
        let freeze_through = model.frozen.iter().rposition(|&f| f).map_or(-1, |i| i as i64);
        if model.frozen.iter().enumerate().any(|(i, &f)| f != (i as i64 <= freeze_through)) {
            return Err(Error::MalformedModel("frozen layers must form a prefix".into()));
        }
        Ok(TransferModel { model, freeze_through })
    }

    /// Checksum over the frozen layers' stored tensors.
    pub fn frozen_checksum(&self) -> String {
        self.model.frozen_checksum()
    }

    pub fn n_trainable_params(&self) -> usize {
        self.model.n_trainable_params()
    }
}

/// Replaces the backbone's dense head with `hidden -> ReLU -> n_classes`
/// (no dropout), initialized from `seed`, and freezes layers `0..=freeze_through`.
pub fn attach_heads<T: Scalar>(backbone: &MscnnModel<T>, freeze_through: i64, hidden: usize, seed: u64) -> Result<TransferModel<T>> {
    backbone.check()?;
    let n_layers = backbone.n_layers() as i64;
    if freeze_through < -1 || freeze_through >= n_layers {
        return Err(Error::InvalidConfig(format!(
            "freeze_through {freeze_through} is not a layer boundary in -1..={}",
            n_layers - 1
        )));
    }
    if hidden == 0 {
        return Err(Error::InvalidConfig("head width must be positive".into()));
    }
    let arch = Architecture {
        hidden,
        dropout: 0.0,
        ..backbone.arch.clone()
    };
    let mut r = rng::stream(seed, 0x6865_6164);
    let model = MscnnModel {
        hidden: DenseLayer::he_init(arch.flatten_dim(), hidden, &mut r),
        output: DenseLayer::he_init(hidden, arch.n_classes, &mut r),
        frozen: (0..n_layers).map(|i| i <= freeze_through).collect(),
        arch,
        norm: backbone.norm.clone(),
        branches: backbone.branches.clone(),
        blocks: backbone.blocks.clone(),
    };
    model.check()?;
    Ok(TransferModel { model, freeze_through })
}

/// Trains the unfrozen layers only; frozen parameters and frozen batch-norm
/// statistics are left bit-identical.
pub fn train_transfer<T: Scalar>(model: &mut TransferModel<T>, train: &SampleSet, val: &SampleSet, cfg: &TrainConfig) -> Result<History> {
    train_mscnn(&mut model.model, train, val, cfg)
}

/// Trains a fresh network on a source-domain set, standing in for an
/// externally pretrained backbone.
pub fn pretrain_backbone(source_train: &SampleSet, source_val: &SampleSet, arch: Architecture, cfg: &TrainConfig) -> Result<(MscnnModel<f32>, History)> {
    let mut model = MscnnModel::<f32>::new(arch, cfg.seed)?;
    model.norm = ChannelNorm::fit(source_train)?;
    let history = train_mscnn(&mut model, source_train, source_val, cfg)?;
    Ok((model, history))
}
