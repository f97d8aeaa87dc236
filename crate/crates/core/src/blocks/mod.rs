//! Architectural building blocks: gated convolution, the GLACE downsampling
//! embed, dilated re-parameterizable depthwise mixing, squeeze-excite, DySample
//! and the composite GatedUniPose block.

pub mod dysample;
pub mod gconv;
pub mod glace;
pub mod reparam;
pub mod se;
pub mod unipose;

pub use dysample::DySampleUpsampler;
pub use gconv::GatedConvLayer;
pub use glace::{Downsample, GlaceEmbed};
pub use reparam::{dilated_to_dense, DilatedReparamBlock};
pub use se::SqueezeExcite;
pub use unipose::{FeedForward, GatedUniPoseBlock, Mixer};
