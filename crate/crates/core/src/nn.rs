//! Named parameters and the layer primitives blocks are assembled from.

use std::collections::HashMap;

use crate::autograd::{NormUpdate, Tape, Var};
use crate::error::{Error, Result};
use crate::ops::norm::BN_EPS;
use crate::ops::ConvSpec;
use crate::rng::keyed_rng;
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

/// Momentum of running-statistic updates.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Non-learned state such as normalization running statistics.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Parameter<S: Scalar> {
    name: String,
    tensor: Tensor<S>,
    kind: ParamKind,
}

impl<S: Scalar> Parameter<S> {
    pub fn trainable(name: impl Into<String>, mut tensor: Tensor<S>) -> Self {
        tensor.set_requires_grad(true);
        Self {
            name: name.into(),
            tensor,
            kind: ParamKind::Trainable,
        }
    }

    pub fn buffer(name: impl Into<String>, tensor: Tensor<S>) -> Self {
        Self {
            name: name.into(),
            tensor,
            kind: ParamKind::Buffer,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> ParamKind {
        self.kind
    }

    pub fn is_trainable(&self) -> bool {
        self.kind == ParamKind::Trainable
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.tensor
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor<S> {
        &mut self.tensor
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }

    /// Replace the values, keeping the gradient slot.
    pub fn set_values(&mut self, values: &[S]) -> Result<()> {
        if values.len() != self.tensor.numel() {
            return Err(Error::shape(
                "Parameter::set_values",
                format!("{}: {} values for shape {:?}", self.name, values.len(), self.shape()),
            ));
        }
        self.tensor.data_mut().copy_from_slice(values);
        Ok(())
    }
}

/// Anything that owns named parameters.
pub trait Module<S: Scalar> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<S>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<S>));

    fn parameters(&self) -> Vec<&Parameter<S>> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p));
        out
    }

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.tensor_mut().zero_grad());
    }
}

impl<S: Scalar, M: Module<S>> Module<S> for Option<M> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<S>)) {
        if let Some(m) = self {
            m.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<S>)) {
        if let Some(m) = self {
            m.visit_mut(f);
        }
    }
}

impl<S: Scalar, M: Module<S>> Module<S> for Vec<M> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<S>)) {
        self.iter().for_each(|m| m.visit(f));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<S>)) {
        self.iter_mut().for_each(|m| m.visit_mut(f));
    }
}

/// Total trainable element count.
pub fn count_parameters<'a, S: Scalar + 'a>(params: impl IntoIterator<Item = &'a Parameter<S>>) -> usize {
    params
        .into_iter()
        .filter(|p| p.is_trainable())
        .map(Parameter::numel)
        .sum()
}

/// `52_400_000 -> "52.4"`
pub fn format_millions(count: usize) -> String {
    format!("{:.1}", count as f64 / 1e6)
}

/// Add every parameter gradient of a backward pass into the matching slot.
pub fn accumulate_grads<S: Scalar, M: Module<S> + ?Sized>(
    module: &mut M,
    grads: &crate::autograd::Gradients<S>,
) -> Result<()> {
    let mut result = Ok(());
    module.visit_mut(&mut |p| {
        if result.is_err() {
            return;
        }
        if let Some(g) = grads.param(p.name()) {
            result = p.tensor_mut().accumulate_grad(g.data());
        }
    });
    result
}

/// Fold queued running-statistic updates into the module's buffers.
pub fn commit_norm_stats<S: Scalar, M: Module<S> + ?Sized>(module: &mut M, updates: &[NormUpdate<S>]) {
    let mut by_name: HashMap<String, &[S]> = HashMap::new();
    for u in updates {
        by_name.insert(format!("{}.running_mean", u.key), &u.mean);
        by_name.insert(format!("{}.running_var", u.key), &u.var);
    }
    let m = s::<S>(BN_MOMENTUM);
    module.visit_mut(&mut |p| {
        if let Some(batch) = by_name.get(p.name()) {
            for (r, &b) in p.tensor_mut().data_mut().iter_mut().zip(batch.iter()) {
                *r = (S::one() - m) * *r + m * b;
            }
        }
    });
}

fn uniform_fan_in<S: Scalar>(name: &str, shape: &[usize], fan_in: usize, seed: u64) -> Result<Tensor<S>> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, &mut keyed_rng(seed, name))
}

pub(crate) fn join(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        format!("{prefix}.{leaf}")
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d<S: Scalar> {
    pub spec: ConvSpec,
    pub weight: Parameter<S>,
    pub bias: Option<Parameter<S>>,
}

impl<S: Scalar> Conv2d<S> {
    /// Fan-in-scaled uniform weights, zero bias.
    pub fn new(prefix: &str, spec: ConvSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let name = join(prefix, "weight");
        let weight = uniform_fan_in(&name, &spec.weight_shape(), spec.fan_in(), seed)?;
        Self::with_weight(prefix, spec, weight)
    }

    /// All-zero weights and bias.
    pub fn zeroed(prefix: &str, spec: ConvSpec) -> Result<Self> {
        spec.validate()?;
        Self::with_weight(prefix, spec, Tensor::zeros(&spec.weight_shape())?)
    }

    pub fn with_weight(prefix: &str, spec: ConvSpec, weight: Tensor<S>) -> Result<Self> {
        if weight.shape() != spec.weight_shape() {
            return Err(Error::shape(
                "Conv2d::with_weight",
                format!("{:?} vs {:?}", weight.shape(), spec.weight_shape()),
            ));
        }
        let bias = spec
            .has_bias
            .then(|| Tensor::zeros(&[spec.out_channels]).map(|t| Parameter::trainable(join(prefix, "bias"), t)))
            .transpose()?;
        Ok(Self {
            spec,
            weight: Parameter::trainable(join(prefix, "weight"), weight),
            bias,
        })
    }

    pub fn forward(&self, tape: &mut Tape<S>, x: &Var<S>) -> Result<Var<S>> {
        let w = tape.param(&self.weight);
        let b = self.bias.as_ref().map(|b| tape.param(b));
        tape.conv2d(x, &w, b.as_ref(), &self.spec)
    }
}

impl<S: Scalar> Module<S> for Conv2d<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<S>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<S>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

#[derive(Debug, Clone)]
pub struct TransposedConv2d<S: Scalar> {
    pub spec: ConvSpec,
    pub weight: Parameter<S>,
    pub bias: Option<Parameter<S>>,
}

impl<S: Scalar> TransposedConv2d<S> {
    pub fn new(prefix: &str, spec: ConvSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let name = join(prefix, "weight");
        let shape = spec.transposed_weight_shape();
        let fan_in = shape[1] * shape[2] * shape[3];
        let weight = Parameter::trainable(name.clone(), uniform_fan_in(&name, &shape, fan_in, seed)?);
        let bias = spec
            .has_bias
            .then(|| Tensor::zeros(&[spec.out_channels]).map(|t| Parameter::trainable(join(prefix, "bias"), t)))
            .transpose()?;
        Ok(Self { spec, weight, bias })
    }

    pub fn forward(&self, tape: &mut Tape<S>, x: &Var<S>) -> Result<Var<S>> {
        let w = tape.param(&self.weight);
        let b = self.bias.as_ref().map(|b| tape.param(b));
        tape.transposed_conv2d(x, &w, b.as_ref(), &self.spec)
    }
}

impl<S: Scalar> Module<S> for TransposedConv2d<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<S>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<S>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d<S: Scalar> {
    key: String,
    pub weight: Parameter<S>,
    pub bias: Parameter<S>,
    pub running_mean: Parameter<S>,
    pub running_var: Parameter<S>,
}

impl<S: Scalar> BatchNorm2d<S> {
    /// Identity affine transform with zero mean / unit variance statistics.
    pub fn new(prefix: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            key: prefix.to_string(),
            weight: Parameter::trainable(join(prefix, "weight"), Tensor::ones(&[channels])?),
            bias: Parameter::trainable(join(prefix, "bias"), Tensor::zeros(&[channels])?),
            running_mean: Parameter::buffer(join(prefix, "running_mean"), Tensor::zeros(&[channels])?),
            running_var: Parameter::buffer(join(prefix, "running_var"), Tensor::ones(&[channels])?),
        })
    }

    pub fn channels(&self) -> usize {
        self.weight.numel()
    }

    pub fn forward(&self, tape: &mut Tape<S>, x: &Var<S>) -> Result<Var<S>> {
        let g = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        tape.batch_norm(
            x,
            &g,
            &b,
            self.running_mean.tensor(),
            self.running_var.tensor(),
            &self.key,
        )
    }

    /// Eval-mode normalization as `y = scale * x + shift`, per channel.
    pub fn fold(&self) -> (Vec<f64>, Vec<f64>) {
        let g = self.weight.tensor().to_f64_vec();
        let b = self.bias.tensor().to_f64_vec();
        let m = self.running_mean.tensor().to_f64_vec();
        let v = self.running_var.tensor().to_f64_vec();
        let scale: Vec<f64> = g.iter().zip(&v).map(|(g, v)| g / (v + BN_EPS).sqrt()).collect();
        let shift = b.iter().zip(&m).zip(&scale).map(|((b, m), k)| b - m * k).collect();
        (scale, shift)
    }
}

impl<S: Scalar> Module<S> for BatchNorm2d<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<S>)) {
        f(&self.weight);
        f(&self.bias);
        f(&self.running_mean);
        f(&self.running_var);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<S>)) {
        f(&mut self.weight);
        f(&mut self.bias);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

#[derive(Debug, Clone)]
pub struct Linear<S: Scalar> {
    pub weight: Parameter<S>,
    pub bias: Parameter<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(prefix: &str, input: usize, output: usize, seed: u64) -> Result<Self> {
        let name = join(prefix, "weight");
        Ok(Self {
            weight: Parameter::trainable(name.clone(), uniform_fan_in(&name, &[output, input], input, seed)?),
            bias: Parameter::trainable(join(prefix, "bias"), Tensor::zeros(&[output])?),
        })
    }

    pub fn forward(&self, tape: &mut Tape<S>, x: &Var<S>) -> Result<Var<S>> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        tape.linear(x, &w, &b)
    }
}

impl<S: Scalar> Module<S> for Linear<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<S>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<S>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_parameter_count_closed_form() {
        let conv = Conv2d::<f32>::new("c", ConvSpec::new(4, 6, 3), 0).unwrap();
        assert_eq!(count_parameters(conv.parameters()), 6 * 4 * 3 * 3 + 6);
        assert_eq!(count_parameters(Vec::<&Parameter<f32>>::new()), 0);
    }

    #[test]
    fn buffers_are_not_counted() {
        let bn = BatchNorm2d::<f64>::new("bn", 8).unwrap();
        assert_eq!(bn.parameters().len(), 4);
        assert_eq!(count_parameters(bn.parameters()), 16);
    }

    #[test]
    fn millions_formatting() {
        assert_eq!(format_millions(52_400_000), "52.4");
        assert_eq!(format_millions(0), "0.0");
    }

    #[test]
    fn init_depends_on_name_not_order() {
        let a = Conv2d::<f32>::new("x.conv", ConvSpec::new(3, 4, 3), 7).unwrap();
        let _other = Conv2d::<f32>::new("y.conv", ConvSpec::new(3, 4, 3), 7).unwrap();
        let b = Conv2d::<f32>::new("x.conv", ConvSpec::new(3, 4, 3), 7).unwrap();
        assert_eq!(a.weight.tensor(), b.weight.tensor());
    }
}
