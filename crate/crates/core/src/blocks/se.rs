use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::nn::{join, Linear, Module, Parameter};
use crate::scalar::Scalar;

pub const SE_RATIO: usize = 4;

/// Squeeze-excite channel attention: pool, reduce, GELU, expand, sigmoid, rescale.
#[derive(Debug, Clone)]
pub struct SqueezeExcite<S: Scalar> {
    pub reduce: Linear<S>,
    pub expand: Linear<S>,
}

impl<S: Scalar> SqueezeExcite<S> {
    pub fn new(prefix: &str, channels: usize, ratio: usize, seed: u64) -> Result<Self> {
        let hidden = (channels / ratio.max(1)).max(1);
        Ok(Self {
            reduce: Linear::new(&join(prefix, "reduce"), channels, hidden, seed)?,
            expand: Linear::new(&join(prefix, "expand"), hidden, channels, seed)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<S>, x: &Var<S>) -> Result<Var<S>> {
        let pooled = tape.global_avg_pool(x)?;
        let h = self.reduce.forward(tape, &pooled)?;
        let h = tape.gelu(&h)?;
        let e = self.expand.forward(tape, &h)?;
        let gate = tape.sigmoid(&e)?;
        tape.scale_channels(x, &gate)
    }
}

impl<S: Scalar> Module<S> for SqueezeExcite<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<S>)) {
        self.reduce.visit(f);
        self.expand.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<S>)) {
        self.reduce.visit_mut(f);
        self.expand.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::indexed_rng;
    use crate::tensor::Tensor;

    #[test]
    fn zero_excitation_halves_input() {
        let mut se = SqueezeExcite::<f64>::new("se", 8, SE_RATIO, 0).unwrap();
        se.visit_mut(&mut |p| p.tensor_mut().data_mut().iter_mut().for_each(|v| *v = 0.0));
        let x = Tensor::<f64>::randn(&[2, 8, 5, 3], &mut indexed_rng(4, 4)).unwrap();
        let y = se.forward(&mut Tape::inference(), &Var::constant(x.clone())).unwrap();
        assert_eq!(y.shape(), x.shape());
        for (a, b) in y.value().data().iter().zip(x.data()) {
            assert_eq!(*a, 0.5 * b);
        }
    }
}
