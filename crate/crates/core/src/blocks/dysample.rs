use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{join, Conv2d, Module, Parameter};
use crate::ops::{upsample_grid, ConvSpec};
use crate::scalar::Scalar;

pub const OFFSET_RANGE: f64 = 0.25;

/// Content-aware upsampler: a zero-initialized 1x1 conv predicts per-sub-pixel
/// offsets that perturb a regular upsampling grid, then the input is
/// resampled bilinearly. At initialization it is plain bilinear upsampling.
#[derive(Debug, Clone)]
pub struct DySampleUpsampler<S: Scalar> {
    scale: usize,
    offset_range: f64,
    pub offset: Conv2d<S>,
}

impl<S: Scalar> DySampleUpsampler<S> {
    pub fn new(prefix: &str, channels: usize, scale: usize) -> Result<Self> {
        Self::with_range(prefix, channels, scale, OFFSET_RANGE)
    }

    pub fn with_range(prefix: &str, channels: usize, scale: usize, offset_range: f64) -> Result<Self> {
        if scale < 1 || !(offset_range > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "dysample needs scale >= 1 and positive range, got {scale}, {offset_range}"
            )));
        }
        let spec = ConvSpec::new(channels, 2 * scale * scale, 1);
        Ok(Self {
            scale,
            offset_range,
            offset: Conv2d::zeroed(&join(prefix, "offset"), spec)?,
        })
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    /// Offsets in input-pixel units, `[N, 2, H*s, W*s]`, bounded by
    /// `offset_range * s`.
    pub fn offsets(&self, tape: &mut Tape<S>, x: &Var<S>) -> Result<Var<S>> {
        let raw = self.offset.forward(tape, x)?;
        let scaled = tape.scale(&raw, self.offset_range)?;
        let bound = self.offset_range * self.scale as f64;
        let bounded = tape.clamp(&scaled, -bound, bound)?;
        tape.pixel_shuffle(&bounded, self.scale)
    }

    pub fn forward(&self, tape: &mut Tape<S>, x: &Var<S>) -> Result<Var<S>> {
        let (n, _, h, w) = x.value().dims4()?;
        let off = self.offsets(tape, x)?;
        let grid = Var::constant(upsample_grid(n, h, w, self.scale)?);
        let coords = tape.add(&grid, &off)?;
        tape.grid_sample(x, &coords)
    }
}

impl<S: Scalar> Module<S> for DySampleUpsampler<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<S>)) {
        self.offset.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<S>)) {
        self.offset.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::grid_sample_bilinear;
    use crate::rng::indexed_rng;
    use crate::tensor::Tensor;

    #[test]
    fn zero_init_is_bilinear() {
        let up = DySampleUpsampler::<f64>::new("up", 3, 2).unwrap();
        let x = Tensor::<f64>::randn(&[1, 3, 4, 5], &mut indexed_rng(0, 9)).unwrap();
        let y = up.forward(&mut Tape::inference(), &Var::constant(x.clone())).unwrap();
        let reference = grid_sample_bilinear(&x, &upsample_grid(1, 4, 5, 2).unwrap()).unwrap();
        assert_eq!(y.shape(), &[1, 3, 8, 10]);
        assert!(y.value().max_abs_diff(&reference).unwrap() < 1e-12);
    }

    #[test]
    fn offsets_are_bounded() {
        let mut up = DySampleUpsampler::<f64>::new("up", 2, 2).unwrap();
        up.offset.bias.as_mut().unwrap().set_values(&[100.0; 8]).unwrap();
        let x = Var::constant(Tensor::<f64>::ones(&[1, 2, 3, 3]).unwrap());
        let off = up.offsets(&mut Tape::inference(), &x).unwrap();
        assert!(off.value().data().iter().all(|v| (v - 0.5).abs() < 1e-12));
    }
}
