//! GatedUniPose-style top-down pose estimation on a small, fully verifiable
//! tensor engine.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Layer enums are built once per network; boxing variants buys nothing.
#![allow(clippy::large_enum_variant)]

pub mod autograd;
mod binio;
pub mod blocks;
pub mod codec;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod verify;

pub use codec::{HeatmapCodec, Keypoint, KeypointSet};
pub use autograd::{Gradients, Mode, Tape, Var};
pub use error::{Error, Result};
pub use model::{GatedUniPoseModel, ModelConfig};
pub use nn::{count_parameters, Module, Parameter};
pub use ops::ConvSpec;
pub use scalar::{DType, Precision, Scalar};
pub use tensor::Tensor;
