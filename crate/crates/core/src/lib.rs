#![allow(clippy::needless_range_loop)]

pub mod backbone;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod io;
pub mod laplace;
pub mod nn;
pub mod ops;
pub mod scalar;
pub mod spectral;
pub mod ssm;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::{Scalar, ScalarKind};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
