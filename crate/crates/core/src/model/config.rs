use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub depth: usize,
    pub channels: usize,
    /// One odd kernel size per block.
    pub kernel_sizes: Vec<usize>,
}

/// Complete architectural description; the network is a pure function of it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `(height, width)` of the network input.
    pub input_size: [usize; 2],
    pub joints: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub heatmap_size: [usize; 2],
    pub decoder_channels: usize,
    pub use_gconv: bool,
    pub use_glace: bool,
    pub use_dysample: bool,
    pub seed: u64,
    pub stages: Vec<StageConfig>,
}

/// Resolution of the fused head output relative to the input, before the decoder.
pub const DECODER_ENTRY_STRIDE: usize = 16;
/// Two stride-2 deconvolutions.
pub const HEATMAP_STRIDE: usize = 4;

impl ModelConfig {
    /// Narrow four-stage network at strides 4/8/16/32.
    pub fn toy() -> Self {
        Self {
            input_size: [256, 192],
            joints: 17,
            stem_channels: 16,
            stem_stride: 4,
            heatmap_size: [64, 48],
            decoder_channels: 64,
            use_gconv: true,
            use_glace: true,
            use_dysample: true,
            seed: 0,
            stages: [16, 32, 64, 128]
                .iter()
                .map(|&channels| StageConfig {
                    depth: 1,
                    channels,
                    kernel_sizes: vec![7],
                })
                .collect(),
        }
    }

    /// Full-width network: 768-channel stem at stride 2, as wide as the
    /// stem output `[768, 128, 96]` requires.
    pub fn full() -> Self {
        Self {
            input_size: [256, 192],
            joints: 17,
            stem_channels: 768,
            stem_stride: 2,
            heatmap_size: [64, 48],
            decoder_channels: 256,
            use_gconv: true,
            use_glace: true,
            use_dysample: true,
            seed: 0,
            stages: [3, 13, 13, 13]
                .iter()
                .map(|&k| StageConfig {
                    depth: 1,
                    channels: 768,
                    kernel_sizes: vec![k],
                })
                .collect(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "full" => Ok(Self::full()),
            other => Err(Error::config("preset", format!("unknown preset `{other}` (toy, full)"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(toml_field(&e), e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Stride of the deepest stage relative to the input.
    pub fn total_stride(&self) -> usize {
        self.stem_stride << self.stages.len().saturating_sub(1)
    }

    /// Average-pooling factor between the fused head map and the decoder.
    pub fn fusion_pool(&self) -> usize {
        DECODER_ENTRY_STRIDE / self.stem_stride
    }

    pub fn stage_stride(&self, i: usize) -> usize {
        self.stem_stride << i
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("joints", self.joints),
            ("stem_channels", self.stem_channels),
            ("decoder_channels", self.decoder_channels),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !self.stem_stride.is_power_of_two() || !(2..=DECODER_ENTRY_STRIDE).contains(&self.stem_stride) {
            return Err(Error::config(
                "stem_stride",
                format!("must be a power of two in 2..=16, got {}", self.stem_stride),
            ));
        }
        let unit = (self.stem_stride / 2).max(2);
        if self.use_glace && !self.stem_channels.is_multiple_of(unit) {
            return Err(Error::config(
                "stem_channels",
                format!("must be divisible by {unit} for the GLACE stem"),
            ));
        }
        if self.stages.is_empty() {
            return Err(Error::config("stages", "at least one stage is required"));
        }
        if self.stages[0].channels != self.stem_channels {
            return Err(Error::config(
                "stages[0].channels",
                format!("must equal stem_channels {}", self.stem_channels),
            ));
        }
        for (i, st) in self.stages.iter().enumerate() {
            if st.depth == 0 || st.channels == 0 {
                return Err(Error::config(format!("stages[{i}]"), "depth and channels must be positive"));
            }
            if st.kernel_sizes.len() != st.depth {
                return Err(Error::config(
                    format!("stages[{i}].kernel_sizes"),
                    format!("needs {} entries (one per block), got {}", st.depth, st.kernel_sizes.len()),
                ));
            }
            if let Some(k) = st.kernel_sizes.iter().find(|&&k| k % 2 == 0) {
                return Err(Error::config(format!("stages[{i}].kernel_sizes"), format!("kernel size {k} is even")));
            }
            if i > 0 && st.channels < self.stages[i - 1].channels {
                return Err(Error::config(
                    format!("stages[{i}].channels"),
                    format!("{} is smaller than the previous stage's {}", st.channels, self.stages[i - 1].channels),
                ));
            }
        }
        let [h, w] = self.input_size;
        let unit = self.total_stride().max(DECODER_ENTRY_STRIDE);
        if h == 0 || w == 0 || h % unit != 0 || w % unit != 0 {
            return Err(Error::config(
                "input_size",
                format!("{h}x{w} must be positive multiples of {unit}"),
            ));
        }
        if self.heatmap_size != [h / HEATMAP_STRIDE, w / HEATMAP_STRIDE] {
            return Err(Error::config(
                "heatmap_size",
                format!(
                    "must be input_size / {HEATMAP_STRIDE} = [{}, {}]",
                    h / HEATMAP_STRIDE,
                    w / HEATMAP_STRIDE
                ),
            ));
        }
        Ok(())
    }
}

fn toml_field(e: &toml::de::Error) -> String {
    let msg = e.message();
    if let Some(rest) = msg.split("unknown field `").nth(1) {
        return rest.split('`').next().unwrap_or("?").to_string();
    }
    if let Some(rest) = msg.split("missing field `").nth(1) {
        return rest.split('`').next().unwrap_or("?").to_string();
    }
    "config".to_string()
}
