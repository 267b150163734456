//! Reference (unguided) kernels: the correctness oracle for every guided
//! kernel, and the building blocks of the guidance subnetwork.

mod conv;
mod gemm;
mod pool;
mod pointwise;

pub use conv::{dense_conv2d, im2col};
pub use gemm::{gemm, Matrix};
pub use pointwise::{
    elementwise_add, l2_normalize_channels, l2_normalize_channels_backward, relu, relu_backward,
    sigmoid, sigmoid_scalar,
};
pub use pool::{
    avg_pool2d, avg_pool2d_backward, crop, crop_backward, nearest_upsample,
    nearest_upsample_backward,
};

pub(crate) use conv::{conv_at_locations, fill_patch_row, weight_matrix};
