use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{join, BatchNorm2d, Conv2d, Module, Parameter};
use crate::ops::ConvSpec;
use crate::scalar::Scalar;

/// One `conv 3x3 -> batch norm -> GELU` unit.
#[derive(Debug, Clone)]
pub struct GlaceUnit<S: Scalar> {
    pub conv: Conv2d<S>,
    pub bn: BatchNorm2d<S>,
}

impl<S: Scalar> GlaceUnit<S> {
    fn new(prefix: &str, cin: usize, cout: usize, stride: usize, seed: u64) -> Result<Self> {
        let spec = ConvSpec::new(cin, cout, 3).stride(stride).padding(1).bias(false);
        Ok(Self {
            conv: Conv2d::new(&join(prefix, "conv"), spec, seed)?,
            bn: BatchNorm2d::new(&join(prefix, "bn"), cout)?,
        })
    }

    fn forward(&self, tape: &mut Tape<S>, x: &Var<S>) -> Result<Var<S>> {
        let y = self.conv.forward(tape, x)?;
        let y = self.bn.forward(tape, &y)?;
        tape.gelu(&y)
    }
}

/// Overlapping strided-conv embedding built from a chain of [`GlaceUnit`]s.
#[derive(Debug, Clone)]
pub struct GlaceEmbed<S: Scalar> {
    stride: usize,
    pub units: Vec<GlaceUnit<S>>,
}

impl<S: Scalar> GlaceEmbed<S> {
    /// Stem reaching `total_stride` (a power of two, at least 2) with one
    /// stride-2 unit per factor of two. Channels go `in -> out/2 -> .. -> out`;
    /// a stride of 2 gets a trailing stride-1 unit so the stem is always two
    /// units deep.
    pub fn stem(prefix: &str, cin: usize, cout: usize, total_stride: usize, seed: u64) -> Result<Self> {
        if total_stride < 2 || !total_stride.is_power_of_two() {
            return Err(Error::InvalidSpec(format!(
                "stem stride must be a power of two >= 2, got {total_stride}"
            )));
        }
        let halvings = total_stride.trailing_zeros() as usize;
        let mut strides = vec![2; halvings];
        if halvings == 1 {
            strides.push(1);
        }
        let depth = strides.len();
        if !cout.is_multiple_of(1 << (depth - 1)) {
            return Err(Error::InvalidSpec(format!(
                "stem channels {cout} must be divisible by {}",
                1 << (depth - 1)
            )));
        }
        let mut units = Vec::with_capacity(depth);
        let mut c = cin;
        for (i, &st) in strides.iter().enumerate() {
            let next = cout >> (depth - 1 - i);
            units.push(GlaceUnit::new(&join(prefix, &i.to_string()), c, next, st, seed)?);
            c = next;
        }
        Ok(Self { stride: total_stride, units })
    }

    /// Single stride-2 unit used between stages.
    pub fn downsample(prefix: &str, cin: usize, cout: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            stride: 2,
            units: vec![GlaceUnit::new(&join(prefix, "0"), cin, cout, 2, seed)?],
        })
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn forward(&self, tape: &mut Tape<S>, x: &Var<S>) -> Result<Var<S>> {
        check_divisible(x, self.stride)?;
        let mut y = x.clone();
        for u in &self.units {
            y = u.forward(tape, &y)?;
        }
        Ok(y)
    }
}

fn check_divisible<S: Scalar>(x: &Var<S>, stride: usize) -> Result<()> {
    let (_, _, h, w) = x.value().dims4()?;
    if h % stride != 0 || w % stride != 0 {
        return Err(Error::InvalidInput(format!(
            "input {h}x{w} is not divisible by stride {stride}"
        )));
    }
    Ok(())
}

impl<S: Scalar> Module<S> for GlaceEmbed<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<S>)) {
        for u in &self.units {
            u.conv.visit(f);
            u.bn.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<S>)) {
        for u in &mut self.units {
            u.conv.visit_mut(f);
            u.bn.visit_mut(f);
        }
    }
}

/// Resolution reduction: GLACE units or a non-overlapping patchify conv.
#[derive(Debug, Clone)]
pub enum Downsample<S: Scalar> {
    Glace(GlaceEmbed<S>),
    Patchify { stride: usize, conv: Conv2d<S> },
}

impl<S: Scalar> Downsample<S> {
    pub fn stem(glace: bool, prefix: &str, cin: usize, cout: usize, stride: usize, seed: u64) -> Result<Self> {
        if glace {
            GlaceEmbed::stem(prefix, cin, cout, stride, seed).map(Self::Glace)
        } else {
            Self::patchify(prefix, cin, cout, stride, seed)
        }
    }

    pub fn stage(glace: bool, prefix: &str, cin: usize, cout: usize, seed: u64) -> Result<Self> {
        if glace {
            GlaceEmbed::downsample(prefix, cin, cout, seed).map(Self::Glace)
        } else {
            Self::patchify(prefix, cin, cout, 2, seed)
        }
    }

    fn patchify(prefix: &str, cin: usize, cout: usize, stride: usize, seed: u64) -> Result<Self> {
        let spec = ConvSpec::new(cin, cout, stride).stride(stride);
        Ok(Self::Patchify {
            stride,
            conv: Conv2d::new(&join(prefix, "conv"), spec, seed)?,
        })
    }

    pub fn stride(&self) -> usize {
        match self {
            Self::Glace(g) => g.stride(),
            Self::Patchify { stride, .. } => *stride,
        }
    }

    pub fn forward(&self, tape: &mut Tape<S>, x: &Var<S>) -> Result<Var<S>> {
        match self {
            Self::Glace(g) => g.forward(tape, x),
            Self::Patchify { stride, conv } => {
                check_divisible(x, *stride)?;
                conv.forward(tape, x)
            }
        }
    }
}

impl<S: Scalar> Module<S> for Downsample<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<S>)) {
        match self {
            Self::Glace(g) => g.visit(f),
            Self::Patchify { conv, .. } => conv.visit(f),
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<S>)) {
        match self {
            Self::Glace(g) => g.visit_mut(f),
            Self::Patchify { conv, .. } => conv.visit_mut(f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn stem_shapes() {
        for (stride, units) in [(2, 2), (4, 2), (8, 3)] {
            let g = GlaceEmbed::<f32>::stem("stem", 3, 16, stride, 0).unwrap();
            assert_eq!(g.units.len(), units);
            let x = Var::constant(Tensor::<f32>::ones(&[1, 3, 32, 24]).unwrap());
            let y = g.forward(&mut Tape::inference(), &x).unwrap();
            assert_eq!(y.shape(), &[1, 16, 32 / stride, 24 / stride]);
        }
    }

    #[test]
    fn indivisible_input_rejected() {
        let g = GlaceEmbed::<f32>::stem("stem", 3, 16, 4, 0).unwrap();
        let x = Var::constant(Tensor::<f32>::ones(&[1, 3, 30, 24]).unwrap());
        assert!(matches!(g.forward(&mut Tape::inference(), &x), Err(Error::InvalidInput(_))));
        assert!(GlaceEmbed::<f32>::stem("stem", 3, 16, 3, 0).is_err());
    }

    #[test]
    fn patchify_variant() {
        let d = Downsample::<f32>::stem(false, "stem", 3, 8, 4, 0).unwrap();
        let x = Var::constant(Tensor::<f32>::ones(&[2, 3, 16, 8]).unwrap());
        let y = d.forward(&mut Tape::inference(), &x).unwrap();
        assert_eq!(y.shape(), &[2, 8, 4, 2]);
    }
}
