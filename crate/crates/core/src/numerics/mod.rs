//! Dense-array kernels: every forward pass in the crate is built from these.
//!
//! Storage is row-major. Model activations use `f32`; `Tensor<f64>` is the
//! evaluation-precision path used by gradient checks and score ensembling.

mod attention;
mod conv;
mod kmeans;
mod ops;
mod resize;
mod tensor;

pub use attention::{attention_with_weights, multi_head_attention, AttnMask, AttnWeights};
pub use conv::{add_channel_bias, conv2d_forward, crop, deconv2d_forward, transpose_kernel};
pub use kmeans::{kmeans, KMeans};
pub use ops::{
    gelu, layer_norm, layer_norm_channels, relu, sigmoid, softmax, softmax_slice, Linear, NormParams, DEFAULT_LN_EPS,
};
pub use resize::{bilinear_resize, nearest_resize};
pub use tensor::{dot, l2_norm, l2_normalize, Scalar, Tensor};
