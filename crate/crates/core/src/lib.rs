pub mod class;
pub mod error;
pub mod eval;
pub mod forest;
mod io_util;
pub mod nn;
pub mod raster;
pub mod rng;
pub mod sampling;
pub mod scalar;
pub mod synth;
pub mod transfer;

pub use class::{LczClass, N_CLASSES};
pub use error::{Error, Result};
pub use io_util::write_atomic;

/// The training-precision network.
pub type Mscnn = nn::MscnnModel<f32>;
/// The gradient-verification precision network.
pub type Mscnn64 = nn::MscnnModel<f64>;
