//! Central finite-difference checks of tape gradients.

use rand::seq::index::sample;
use rand::Rng;

use crate::autograd::{Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Module, Parameter};
use crate::scalar::{s, Precision, Scalar};
use crate::tensor::Tensor;

/// Finite-difference step and probe budget.
#[derive(Debug, Clone, Copy)]
pub struct FdSettings {
    pub step: f64,
    /// Entries probed per differentiated tensor. The entry with the largest
    /// analytic gradient is always among them.
    pub probes: usize,
}

impl FdSettings {
    pub fn for_precision<S: Scalar>() -> Self {
        Self {
            step: if S::PRECISION == Precision::F64 { 1e-5 } else { 1e-3 },
            probes: 4,
        }
    }
}

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `max|a - n| / max(max|a|, max|n|, 1e-12)` over all probed entries.
    pub relative_error: f64,
    pub probes: usize,
}

/// Relative error between analytic and numeric gradient samples.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(1e-12, f64::max);
    diff / scale
}

/// Parameter-free stand-in so plain ops go through [`check_module`].
#[derive(Debug, Clone, Default)]
pub struct Stateless;

impl<S: Scalar> Module<S> for Stateless {
    fn visit<'a>(&'a self, _: &mut dyn FnMut(&'a Parameter<S>)) {}
    fn visit_mut(&mut self, _: &mut dyn FnMut(&mut Parameter<S>)) {}
}

/// Check the gradients of an operation on leaf `inputs`.
pub fn check_op<S, F, R>(inputs: &[Tensor<S>], mode: Mode, fd: FdSettings, rng: &mut R, f: F) -> Result<GradCheck>
where
    S: Scalar,
    R: Rng + ?Sized,
    F: Fn(&mut Tape<S>, &[Var<S>]) -> Result<Var<S>>,
{
    check_module(&Stateless, inputs, mode, fd, rng, |_, tape, xs| f(tape, xs))
}

enum Target {
    Input(usize),
    Param(String),
}

/// Check the gradients of `f` with respect to `inputs` and every trainable
/// parameter of `module`. The scalar under test is `sum(out * R)` with a
/// random fixed `R`.
pub fn check_module<S, M, F, R>(
    module: &M,
    inputs: &[Tensor<S>],
    mode: Mode,
    fd: FdSettings,
    rng: &mut R,
    f: F,
) -> Result<GradCheck>
where
    S: Scalar,
    M: Module<S> + Clone,
    R: Rng + ?Sized,
    F: Fn(&M, &mut Tape<S>, &[Var<S>]) -> Result<Var<S>>,
{
    let mut tape = Tape::new(mode);
    let vars: Vec<Var<S>> = inputs.iter().map(|t| tape.leaf(t.detached())).collect();
    let out = f(module, &mut tape, &vars)?;
    let weights = Tensor::<S>::uniform(out.shape(), -1.0, 1.0, rng)?;
    let loss = tape.weighted_sum(&out, &weights)?;
    let grads = tape.backward(&loss)?;

    let mut targets: Vec<(Target, Vec<f64>)> = Vec::new();
    for (i, v) in vars.iter().enumerate() {
        let g = grads
            .wrt(v)
            .map(Tensor::to_f64_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        targets.push((Target::Input(i), g));
    }
    for p in module.parameters() {
        if p.is_trainable() {
            let g = grads
                .param(p.name())
                .map(Tensor::to_f64_vec)
                .unwrap_or_else(|| vec![0.0; p.numel()]);
            targets.push((Target::Param(p.name().to_string()), g));
        }
    }

    let eval = |m: &M, xs: &[Tensor<S>]| -> Result<f64> {
        let mut tape = Tape::untracked(mode);
        let vars: Vec<Var<S>> = xs.iter().map(|t| tape.leaf(t.detached())).collect();
        let out = f(m, &mut tape, &vars)?;
        Ok(out
            .value()
            .data()
            .iter()
            .zip(weights.data())
            .map(|(o, w)| o.to_f64() * w.to_f64())
            .sum())
    };

    let mut work = module.clone();
    let mut xs: Vec<Tensor<S>> = inputs.iter().map(Tensor::detached).collect();
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for (target, g) in &targets {
        if g.is_empty() {
            continue;
        }
        let peak = (0..g.len())
            .max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs()))
            .unwrap_or(0);
        let mut idx = vec![peak];
        let extra = fd.probes.saturating_sub(1).min(g.len());
        idx.extend(sample(rng, g.len(), extra).into_iter().filter(|&i| i != peak));
        for i in idx {
            let original = read(&work, &xs, target, i)?;
            let plus = S::from_f64(original.to_f64() + fd.step);
            let minus = S::from_f64(original.to_f64() - fd.step);
            write(&mut work, &mut xs, target, i, plus)?;
            let lp = eval(&work, &xs)?;
            write(&mut work, &mut xs, target, i, minus)?;
            let lm = eval(&work, &xs)?;
            write(&mut work, &mut xs, target, i, original)?;
            analytic.push(g[i]);
            numeric.push((lp - lm) / (plus.to_f64() - minus.to_f64()));
        }
    }
    Ok(GradCheck {
        relative_error: relative_error(&analytic, &numeric),
        probes: analytic.len(),
    })
}

fn read<S: Scalar, M: Module<S>>(m: &M, xs: &[Tensor<S>], target: &Target, i: usize) -> Result<S> {
    match target {
        Target::Input(k) => Ok(xs[*k].data()[i]),
        Target::Param(name) => {
            let mut found = None;
            m.visit(&mut |p| {
                if p.name() == name {
                    found = Some(p.tensor().data()[i]);
                }
            });
            found.ok_or_else(|| Error::Usage(format!("parameter {name} vanished")))
        }
    }
}

fn write<S: Scalar, M: Module<S>>(m: &mut M, xs: &mut [Tensor<S>], target: &Target, i: usize, v: S) -> Result<()> {
    match target {
        Target::Input(k) => xs[*k].data_mut()[i] = v,
        Target::Param(name) => m.visit_mut(&mut |p| {
            if p.name() == name {
                p.tensor_mut().data_mut()[i] = v;
            }
        }),
    }
    Ok(())
}

/// Move every parameter away from its initial value: trainables get
/// `U(-spread, spread)` noise, running variances land in `[0.5, 1.5]` and
/// running means in `[-0.2, 0.2]`. Zero-initialised layers then carry signal.
pub fn jitter_parameters<S: Scalar, M: Module<S>, R: Rng + ?Sized>(m: &mut M, spread: f64, rng: &mut R) {
    m.visit_mut(&mut |p| {
        let running_var = p.name().ends_with("running_var");
        let running_mean = p.name().ends_with("running_mean");
        let trainable = p.is_trainable();
        for v in p.tensor_mut().data_mut() {
            *v = if running_var {
                s(rng.gen_range(0.5..1.5))
            } else if running_mean {
                s(rng.gen_range(-0.2..0.2))
            } else if trainable {
                *v + s(rng.gen_range(-spread..spread))
            } else {
                *v
            };
        }
    });
}
