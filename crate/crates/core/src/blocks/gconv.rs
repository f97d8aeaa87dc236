use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::nn::{join, Conv2d, Module, Parameter};
use crate::ops::ConvSpec;
use crate::scalar::Scalar;

/// `sigmoid(W_g * x) ⊙ (W_v * x)`. Both branches share one [`ConvSpec`].
#[derive(Debug, Clone)]
pub struct GatedConvLayer<S: Scalar> {
    pub gate: Conv2d<S>,
    pub value: Conv2d<S>,
}

impl<S: Scalar> GatedConvLayer<S> {
    pub fn new(prefix: &str, spec: ConvSpec, seed: u64) -> Result<Self> {
        Ok(Self {
            gate: Conv2d::new(&join(prefix, "gate"), spec, seed)?,
            value: Conv2d::new(&join(prefix, "value"), spec, seed)?,
        })
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.gate.spec
    }

    pub fn forward(&self, tape: &mut Tape<S>, x: &Var<S>) -> Result<Var<S>> {
        let g = self.gate.forward(tape, x)?;
        let g = tape.sigmoid(&g)?;
        let v = self.value.forward(tape, x)?;
        tape.mul(&g, &v)
    }
}

impl<S: Scalar> Module<S> for GatedConvLayer<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<S>)) {
        self.gate.visit(f);
        self.value.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<S>)) {
        self.gate.visit_mut(f);
        self.value.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::indexed_rng;
    use crate::tensor::Tensor;

    fn layer(gate_bias: f64) -> GatedConvLayer<f64> {
        let spec = ConvSpec::new(4, 3, 3).padding(1);
        let mut l = GatedConvLayer::new("g", spec, 3).unwrap();
        let b = l.gate.bias.as_mut().unwrap();
        b.set_values(&[gate_bias; 3]).unwrap();
        l
    }

    #[test]
    fn saturated_gates() {
        let x = Tensor::<f64>::randn(&[1, 4, 6, 6], &mut indexed_rng(1, 0)).unwrap();
        let mut tape = Tape::inference();
        let xv = Var::constant(x);
        for (bias, open) in [(1000.0, true), (-1000.0, false)] {
            let l = layer(bias);
            let y = l.forward(&mut tape, &xv).unwrap();
            let v = l.value.forward(&mut tape, &xv).unwrap();
            for (a, b) in y.value().data().iter().zip(v.value().data()) {
                let expected = if open { *b } else { 0.0 };
                assert!((a - expected).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let l = layer(0.0);
        let x = Var::constant(Tensor::<f64>::ones(&[1, 5, 6, 6]).unwrap());
        let err = l.forward(&mut Tape::inference(), &x).unwrap_err();
        assert!(matches!(err, crate::Error::Shape { .. }));
    }
}
