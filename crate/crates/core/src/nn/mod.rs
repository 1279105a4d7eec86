//! A small hand-differentiated CNN stack: layers, the multi-scale model,
//! Adam, training and gradient verification.

pub mod activation;
pub mod adam;
pub mod batchnorm;
pub mod conv;
pub mod dense;
pub mod gradcheck;
pub mod io;
pub mod loss;
pub mod model;
pub mod pool;
pub mod tensor;
pub mod train;

pub use adam::{adam_step, AdamConfig, AdamState, DecayMode};
pub use gradcheck::{gradient_check, Component};
pub use io::{decode_model, encode_model, load_model, save_model, ModelKind};
pub use model::{batch_tensor, Architecture, ChannelNorm, DropoutMask, MscnnModel};
pub use tensor::Tensor4;
pub use train::{evaluate, fit, predict, train_mscnn, EarlyStopper, EpochRecord, History, StopDecision, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
