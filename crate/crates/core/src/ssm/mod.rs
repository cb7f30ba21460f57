//! State-space machinery: discretization, the recurrent and convolutional evaluation modes,
//! the selective scan, and the 2D cross-scan block.

pub mod cross_scan;
pub mod s6;
pub mod scan;
pub mod ss2d;
pub mod zoh;

pub use cross_scan::{cross_merge, cross_scan, scan_direction, unscan_direction, ScanDirection};
pub use s6::{s6_forward, selective_scan, SsmParams, S6};
pub use scan::{ssm_conv_apply, ssm_kernel, ssm_scan_sequential, DiscreteSsm};
pub use ss2d::{Ss2d, Ss2dConfig};
pub use zoh::{zoh, zoh_discretize};
