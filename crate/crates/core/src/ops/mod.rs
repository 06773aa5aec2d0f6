//! Forward and backward kernels on plain tensors. The autograd graph in
//! [`crate::autograd`] composes these.

pub mod conv;
pub mod layout;
pub mod math;
pub mod norm;
pub mod resize;

pub use conv::{conv2d, conv_out_size};
pub use layout::{
    concat, crop_hw, narrow, pad_hw, permute, pixel_shuffle, pixel_unshuffle, roll_hw,
    window_partition, window_reverse,
};
pub use math::{add, gelu, linear, matmul, mean_hw, mul, relu, sigmoid, softmax};
pub use norm::{batch_norm_eval, batch_norm_train, layer_norm};
pub use resize::{resize, resize_by, ResizeMode};
