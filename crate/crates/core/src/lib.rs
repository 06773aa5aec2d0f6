//! High-resolution semantic segmentation of structural damage: learnable
//! resizers around a convolutional segmenter, a windowed-attention
//! segmenter, tiled inference and the training loop that ties them together.

pub mod autograd;
pub mod dmgformer;
pub mod error;
pub mod gradsuite;
pub mod loss;
pub mod mask;
pub mod membench;
pub mod metrics;
pub mod nn;
pub mod ops;
pub mod synth;
pub mod tensor;
pub mod tiling;
pub mod train;
pub mod trsnet;

pub use autograd::{Graph, Mode, ParamId, ParamStore, Var};
pub use error::{Error, Result};
pub use tensor::{Scalar, Shape, Tensor};
