use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{join, BatchNorm2d, Conv2d, Module, Parameter};
use crate::ops::ConvSpec;
use crate::scalar::Scalar;

use super::gconv::GatedConvLayer;
use super::reparam::DilatedReparamBlock;
use super::se::{SqueezeExcite, SE_RATIO};

pub const FFN_EXPANSION: usize = 4;
/// Kernels at or above this size use the re-parameterizable mixer.
pub const REPARAM_MIN_KERNEL: usize = 7;

/// Spatial mixing stage of a block.
#[derive(Debug, Clone)]
pub enum Mixer<S: Scalar> {
    Reparam(DilatedReparamBlock<S>),
    Depthwise(Conv2d<S>),
}

impl<S: Scalar> Mixer<S> {
    pub fn new(prefix: &str, channels: usize, kernel: usize, seed: u64) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::InvalidSpec(format!("mixer kernel must be odd, got {kernel}")));
        }
        if kernel >= REPARAM_MIN_KERNEL {
            DilatedReparamBlock::new(prefix, channels, kernel, seed).map(Self::Reparam)
        } else {
            let spec = ConvSpec::depthwise(channels, kernel, 1);
            Conv2d::new(&join(prefix, "conv"), spec, seed).map(Self::Depthwise)
        }
    }

    pub fn forward(&self, tape: &mut Tape<S>, x: &Var<S>) -> Result<Var<S>> {
        match self {
            Self::Reparam(r) => r.forward(tape, x),
            Self::Depthwise(c) => c.forward(tape, x),
        }
    }
}

impl<S: Scalar> Module<S> for Mixer<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<S>)) {
        match self {
            Self::Reparam(r) => r.visit(f),
            Self::Depthwise(c) => c.visit(f),
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<S>)) {
        match self {
            Self::Reparam(r) => r.visit_mut(f),
            Self::Depthwise(c) => c.visit_mut(f),
        }
    }
}

/// Channel MLP: gated (`gconv` to 4C, project back) or plain (expand, GELU, project).
#[derive(Debug, Clone)]
pub enum FeedForward<S: Scalar> {
    Gated { gconv: GatedConvLayer<S>, proj: Conv2d<S> },
    Plain { expand: Conv2d<S>, proj: Conv2d<S> },
}

impl<S: Scalar> FeedForward<S> {
    pub fn new(prefix: &str, channels: usize, gated: bool, seed: u64) -> Result<Self> {
        let hidden = channels * FFN_EXPANSION;
        let up = ConvSpec::new(channels, hidden, 1);
        let proj = Conv2d::new(&join(prefix, "proj"), ConvSpec::new(hidden, channels, 1), seed)?;
        Ok(if gated {
            Self::Gated {
                gconv: GatedConvLayer::new(&join(prefix, "gconv"), up, seed)?,
                proj,
            }
        } else {
            Self::Plain {
                expand: Conv2d::new(&join(prefix, "expand"), up, seed)?,
                proj,
            }
        })
    }

    pub fn forward(&self, tape: &mut Tape<S>, x: &Var<S>) -> Result<Var<S>> {
        match self {
            Self::Gated { gconv, proj } => {
                let h = gconv.forward(tape, x)?;
                proj.forward(tape, &h)
            }
            Self::Plain { expand, proj } => {
                let h = expand.forward(tape, x)?;
                let h = tape.gelu(&h)?;
                proj.forward(tape, &h)
            }
        }
    }
}

impl<S: Scalar> Module<S> for FeedForward<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<S>)) {
        match self {
            Self::Gated { gconv, proj } => {
                gconv.visit(f);
                proj.visit(f);
            }
            Self::Plain { expand, proj } => {
                expand.visit(f);
                proj.visit(f);
            }
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<S>)) {
        match self {
            Self::Gated { gconv, proj } => {
                gconv.visit_mut(f);
                proj.visit_mut(f);
            }
            Self::Plain { expand, proj } => {
                expand.visit_mut(f);
                proj.visit_mut(f);
            }
        }
    }
}

/// `x + ffn(se(norm(mixer(x))))`
#[derive(Debug, Clone)]
pub struct GatedUniPoseBlock<S: Scalar> {
    pub mixer: Mixer<S>,
    pub norm: BatchNorm2d<S>,
    pub se: SqueezeExcite<S>,
    pub ffn: FeedForward<S>,
}

impl<S: Scalar> GatedUniPoseBlock<S> {
    pub fn new(prefix: &str, channels: usize, kernel: usize, gated: bool, seed: u64) -> Result<Self> {
        Ok(Self {
            mixer: Mixer::new(&join(prefix, "mixer"), channels, kernel, seed)?,
            norm: BatchNorm2d::new(&join(prefix, "norm"), channels)?,
            se: SqueezeExcite::new(&join(prefix, "se"), channels, SE_RATIO, seed)?,
            ffn: FeedForward::new(&join(prefix, "ffn"), channels, gated, seed)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<S>, x: &Var<S>) -> Result<Var<S>> {
        let y = self.mixer.forward(tape, x)?;
        let y = self.norm.forward(tape, &y)?;
        let y = self.se.forward(tape, &y)?;
        let y = self.ffn.forward(tape, &y)?;
        tape.add(x, &y)
    }

    /// Merge the mixer's branches if it has any. Plain depthwise mixers are
    /// left as they are.
    pub fn switch_to_deploy(&mut self) -> Result<()> {
        match &mut self.mixer {
            Mixer::Reparam(r) => r.merge_reparam(),
            Mixer::Depthwise(_) => Ok(()),
        }
    }
}

impl<S: Scalar> Module<S> for GatedUniPoseBlock<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<S>)) {
        self.mixer.visit(f);
        self.norm.visit(f);
        self.se.visit(f);
        self.ffn.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<S>)) {
        self.mixer.visit_mut(f);
        self.norm.visit_mut(f);
        self.se.visit_mut(f);
        self.ffn.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::count_parameters;
    use crate::rng::indexed_rng;
    use crate::tensor::Tensor;

    #[test]
    fn residual_shape_and_deploy() {
        let mut b = GatedUniPoseBlock::<f64>::new("b", 8, 7, true, 1).unwrap();
        let x = Var::constant(Tensor::<f64>::randn(&[1, 8, 6, 6], &mut indexed_rng(2, 2)).unwrap());
        let y0 = b.forward(&mut Tape::inference(), &x).unwrap();
        assert_eq!(y0.shape(), x.shape());
        b.switch_to_deploy().unwrap();
        let y1 = b.forward(&mut Tape::inference(), &x).unwrap();
        assert!(y0.value().max_abs_diff(y1.value()).unwrap() < 1e-9);
    }

    #[test]
    fn gated_ffn_has_one_extra_expansion() {
        let g = FeedForward::<f32>::new("f", 8, true, 0).unwrap();
        let p = FeedForward::<f32>::new("f", 8, false, 0).unwrap();
        assert_eq!(
            count_parameters(g.parameters()) - count_parameters(p.parameters()),
            8 * 32 + 32
        );
    }

    #[test]
    fn small_kernel_uses_depthwise() {
        let b = GatedUniPoseBlock::<f32>::new("b", 4, 3, true, 0).unwrap();
        assert!(matches!(b.mixer, Mixer::Depthwise(_)));
        assert!(GatedUniPoseBlock::<f32>::new("b", 4, 4, true, 0).is_err());
    }
}
