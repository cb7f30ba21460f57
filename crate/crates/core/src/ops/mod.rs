//! Forward and backward kernels. These are pure functions on [`Tensor`](crate::Tensor)s;
//! [`Tape`](crate::Tape) wires them together for reverse-mode differentiation.

pub mod activation;
pub mod conv;
pub mod linear;
pub mod misc;
pub mod norm;
pub mod pool;

pub use activation::{gelu, silu, softplus};
pub use conv::{conv2d, Conv2dOpts};
pub use linear::linear;
pub use misc::{concat_channels, cross_entropy, global_avg_pool, slice_channels};
pub use norm::{batch_norm_fold, batch_norm_train, layer_norm_channels};
pub use pool::{avg_pool2d, upsample_nearest};
