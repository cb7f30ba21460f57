//! Parameters, the module visitor, and shared layers.

pub mod layers;
pub mod param;
pub mod rep;

pub use layers::{BatchNorm, ConvBn, LayerNorm, Linear, Pointwise};
pub use param::{apply_bn_updates, kaiming_uniform, BnUpdate, Ctx, Mode, Module, Param};
pub use rep::RepDw;
