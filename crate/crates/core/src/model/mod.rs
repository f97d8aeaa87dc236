//! Network assembly, configuration and checkpointing.

pub mod checkpoint;
pub mod config;
pub mod network;

pub use config::{ModelConfig, StageConfig, HEATMAP_STRIDE};
pub use network::{GatedUniPoseModel, Upsampler};
