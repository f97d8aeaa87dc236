use crate::autograd::{Mode, Tape, Var};
use crate::blocks::{Downsample, DySampleUpsampler, GatedUniPoseBlock};
use crate::error::{Error, Result};
use crate::nn::{join, BatchNorm2d, Conv2d, Module, Parameter, TransposedConv2d};
use crate::ops::{upsample_grid, ConvSpec};
use crate::scalar::Scalar;

use super::config::ModelConfig;

#[derive(Debug, Clone)]
pub struct Stage<S: Scalar> {
    pub downsample: Option<Downsample<S>>,
    pub blocks: Vec<GatedUniPoseBlock<S>>,
}

/// Brings a stage's features to the stage-1 resolution.
#[derive(Debug, Clone)]
pub enum Upsampler<S: Scalar> {
    Identity,
    Dynamic(DySampleUpsampler<S>),
    /// Fixed half-pixel-aligned bilinear upsampling.
    Bilinear { scale: usize },
}

impl<S: Scalar> Upsampler<S> {
    pub fn forward(&self, tape: &mut Tape<S>, x: &Var<S>) -> Result<Var<S>> {
        match self {
            Self::Identity => Ok(x.clone()),
            Self::Dynamic(d) => d.forward(tape, x),
            Self::Bilinear { scale } => {
                let (n, _, h, w) = x.value().dims4()?;
                let grid = Var::constant(upsample_grid(n, h, w, *scale)?);
                tape.grid_sample(x, &grid)
            }
        }
    }
}

impl<S: Scalar> Module<S> for Upsampler<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<S>)) {
        if let Self::Dynamic(d) = self {
            d.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<S>)) {
        if let Self::Dynamic(d) = self {
            d.visit_mut(f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Head<S: Scalar> {
    pub upsample: Vec<Upsampler<S>>,
    pub fuse: Conv2d<S>,
}

#[derive(Debug, Clone)]
pub struct Decoder<S: Scalar> {
    pub deconv1: TransposedConv2d<S>,
    pub bn1: BatchNorm2d<S>,
    pub deconv2: TransposedConv2d<S>,
    pub bn2: BatchNorm2d<S>,
    pub final_conv: Conv2d<S>,
}

impl<S: Scalar> Decoder<S> {
    fn new(channels: usize, joints: usize, seed: u64) -> Result<Self> {
        let up = ConvSpec::new(channels, channels, 4).stride(2).padding(1).bias(false);
        Ok(Self {
            deconv1: TransposedConv2d::new("decoder.deconv1", up, seed)?,
            bn1: BatchNorm2d::new("decoder.bn1", channels)?,
            deconv2: TransposedConv2d::new("decoder.deconv2", up, seed)?,
            bn2: BatchNorm2d::new("decoder.bn2", channels)?,
            final_conv: Conv2d::new("decoder.final", ConvSpec::new(channels, joints, 1), seed)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<S>, x: &Var<S>) -> Result<Var<S>> {
        let y = self.deconv1.forward(tape, x)?;
        let y = self.bn1.forward(tape, &y)?;
        let y = tape.gelu(&y)?;
        let y = self.deconv2.forward(tape, &y)?;
        let y = self.bn2.forward(tape, &y)?;
        let y = tape.gelu(&y)?;
        self.final_conv.forward(tape, &y)
    }
}

/// Stem, stages of gated blocks, upsample-and-concatenate head, and a
/// two-deconvolution decoder producing heatmaps at a quarter of the input size.
#[derive(Debug, Clone)]
pub struct GatedUniPoseModel<S: Scalar> {
    config: ModelConfig,
    mode: Mode,
    deployed: bool,
    pub stem: Downsample<S>,
    pub stages: Vec<Stage<S>>,
    pub head: Head<S>,
    pub decoder: Decoder<S>,
}

impl<S: Scalar> GatedUniPoseModel<S> {
    /// Deterministic in `config` (including its seed). Starts in eval mode.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let stem = Downsample::stem(
            config.use_glace,
            "stem",
            3,
            config.stem_channels,
            config.stem_stride,
            seed,
        )?;
        let mut stages = Vec::with_capacity(config.stages.len());
        let mut prev = config.stem_channels;
        for (i, sc) in config.stages.iter().enumerate() {
            let prefix = format!("stages.{i}");
            let downsample = (i > 0)
                .then(|| Downsample::stage(config.use_glace, &join(&prefix, "downsample"), prev, sc.channels, seed))
                .transpose()?;
            let blocks = sc
                .kernel_sizes
                .iter()
                .enumerate()
                .map(|(j, &k)| {
                    GatedUniPoseBlock::new(&format!("{prefix}.blocks.{j}"), sc.channels, k, config.use_gconv, seed)
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { downsample, blocks });
            prev = sc.channels;
        }
        let upsample = config
            .stages
            .iter()
            .enumerate()
            .map(|(i, sc)| {
                let scale = 1usize << i;
                if i == 0 {
                    Ok(Upsampler::Identity)
                } else if config.use_dysample {
                    DySampleUpsampler::new(&format!("head.upsample.{i}"), sc.channels, scale).map(Upsampler::Dynamic)
                } else {
                    Ok(Upsampler::Bilinear { scale })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let concat: usize = config.stages.iter().map(|s| s.channels).sum();
        let fuse = Conv2d::new("head.fuse", ConvSpec::new(concat, config.decoder_channels, 1), seed)?;
        Ok(Self {
            config: config.clone(),
            mode: Mode::Eval,
            deployed: false,
            stem,
            stages,
            head: Head { upsample, fuse },
            decoder: Decoder::new(config.decoder_channels, config.joints, seed)?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn is_deployed(&self) -> bool {
        self.deployed
    }

    /// A tape matching the model's mode: recording in training, inference otherwise.
    pub fn tape(&self) -> Tape<S> {
        match self.mode {
            Mode::Train => Tape::new(Mode::Train),
            Mode::Eval => Tape::inference(),
        }
    }

    fn check_input(&self, x: &Var<S>) -> Result<()> {
        let (_, c, h, w) = x.value().dims4()?;
        let [eh, ew] = self.config.input_size;
        if c != 3 || h != eh || w != ew {
            return Err(Error::shape(
                "GatedUniPoseModel::forward",
                format!("expected [N, 3, {eh}, {ew}], got {:?}", x.shape()),
            ));
        }
        Ok(())
    }

    pub fn stem_forward(&self, tape: &mut Tape<S>, images: &Var<S>) -> Result<Var<S>> {
        self.check_input(images)?;
        self.stem.forward(tape, images)
    }

    /// Output of every stage, finest first.
    pub fn stage_features(&self, tape: &mut Tape<S>, images: &Var<S>) -> Result<Vec<Var<S>>> {
        let mut x = self.stem_forward(tape, images)?;
        let mut feats = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            if let Some(d) = &st.downsample {
                x = d.forward(tape, &x)?;
            }
            for b in &st.blocks {
                x = b.forward(tape, &x)?;
            }
            feats.push(x.clone());
        }
        Ok(feats)
    }

    /// Upsample every stage map to the stage-1 resolution, concatenate, fuse.
    pub fn head_fuse(&self, tape: &mut Tape<S>, feats: &[Var<S>]) -> Result<Var<S>> {
        if feats.len() != self.head.upsample.len() {
            return Err(Error::shape(
                "head_fuse",
                format!("{} feature maps for {} stages", feats.len(), self.head.upsample.len()),
            ));
        }
        let mut ups = Vec::with_capacity(feats.len());
        for (f, u) in feats.iter().zip(&self.head.upsample) {
            ups.push(u.forward(tape, f)?);
        }
        let target = &ups[0].shape()[2..];
        if let Some(bad) = ups.iter().find(|u| &u.shape()[2..] != target) {
            return Err(Error::State(format!(
                "head resolution mismatch after upsampling: {:?} vs {:?}",
                bad.shape(),
                ups[0].shape()
            )));
        }
        let refs: Vec<&Var<S>> = ups.iter().collect();
        let cat = tape.concat_channels(&refs)?;
        self.head.fuse.forward(tape, &cat)
    }

    /// `[N, 3, H, W] -> [N, joints, H/4, W/4]`.
    pub fn forward(&self, tape: &mut Tape<S>, images: &Var<S>) -> Result<Var<S>> {
        let feats = self.stage_features(tape, images)?;
        let fused = self.head_fuse(tape, &feats)?;
        let pooled = tape.avg_pool2d(&fused, self.config.fusion_pool())?;
        self.decoder.forward(tape, &pooled)
    }

    /// Merge every re-parameterizable mixer. Only valid in eval mode, where
    /// batch norm uses the running statistics the merge folds in.
    pub fn switch_to_deploy(&mut self) -> Result<()> {
        if self.mode == Mode::Train {
            return Err(Error::State("switch_to_deploy requires eval mode".into()));
        }
        if self.deployed {
            return Ok(());
        }
        for st in &mut self.stages {
            for b in &mut st.blocks {
                b.switch_to_deploy()?;
            }
        }
        self.deployed = true;
        Ok(())
    }

    /// Per top-level module trainable parameter counts.
    pub fn parameter_breakdown(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        self.visit(&mut |p| {
            if !p.is_trainable() {
                return;
            }
            let mut parts = p.name().split('.');
            let first = parts.next().unwrap_or_default();
            let key = if first == "stages" || first == "head" {
                format!("{first}.{}", parts.next().unwrap_or_default())
            } else {
                first.to_string()
            };
            match out.iter_mut().find(|(k, _)| *k == key) {
                Some((_, n)) => *n += p.numel(),
                None => out.push((key, p.numel())),
            }
        });
        out
    }
}

impl<S: Scalar> Module<S> for GatedUniPoseModel<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<S>)) {
        self.stem.visit(f);
        for st in &self.stages {
            st.downsample.visit(f);
            st.blocks.visit(f);
        }
        self.head.upsample.visit(f);
        self.head.fuse.visit(f);
        let d = &self.decoder;
        d.deconv1.visit(f);
        d.bn1.visit(f);
        d.deconv2.visit(f);
        d.bn2.visit(f);
        d.final_conv.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<S>)) {
        self.stem.visit_mut(f);
        for st in &mut self.stages {
            st.downsample.visit_mut(f);
            st.blocks.visit_mut(f);
        }
        self.head.upsample.visit_mut(f);
        self.head.fuse.visit_mut(f);
        let d = &mut self.decoder;
        d.deconv1.visit_mut(f);
        d.bn1.visit_mut(f);
        d.deconv2.visit_mut(f);
        d.bn2.visit_mut(f);
        d.final_conv.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use std::collections::HashSet;

    fn small() -> ModelConfig {
        let mut c = ModelConfig::toy();
        c.input_size = [64, 32];
        c.heatmap_size = [16, 8];
        c
    }

    #[test]
    fn names_are_unique() {
        let m = GatedUniPoseModel::<f32>::build(&ModelConfig::toy()).unwrap();
        let names: Vec<&str> = m.parameters().iter().map(|p| p.name()).collect();
        let set: HashSet<&str> = names.iter().copied().collect();
        assert_eq!(names.len(), set.len());
        assert!(set.contains("decoder.final.weight"));
        assert!(set.contains("stages.1.downsample.0.conv.weight"));
        assert!(set.contains("head.upsample.3.offset.weight"));
    }

    #[test]
    fn forward_shape_law() {
        let m = GatedUniPoseModel::<f32>::build(&small()).unwrap();
        let x = Var::constant(Tensor::ones(&[2, 3, 64, 32]).unwrap());
        let y = m.forward(&mut Tape::inference(), &x).unwrap();
        assert_eq!(y.shape(), &[2, 17, 16, 8]);
        let bad = Var::constant(Tensor::ones(&[1, 3, 32, 32]).unwrap());
        assert!(matches!(m.forward(&mut Tape::inference(), &bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn deploy_requires_eval() {
        let mut m = GatedUniPoseModel::<f32>::build(&small()).unwrap();
        m.set_mode(Mode::Train);
        assert!(matches!(m.switch_to_deploy(), Err(Error::State(_))));
        m.set_mode(Mode::Eval);
        let before = crate::count_parameters(m.parameters());
        m.switch_to_deploy().unwrap();
        assert!(crate::count_parameters(m.parameters()) < before);
    }
}
