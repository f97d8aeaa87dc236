//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Tape`] records every differentiable operation applied to tracked
//! [`Var`]s. [`Tape::backward`] walks the record in reverse and returns the
//! gradient of a scalar loss with respect to every tracked leaf. Untracked
//! values (inputs, targets, anything produced while recording is off) carry no
//! node, so inference through [`Tape::inference`] keeps no intermediates alive.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::Parameter;
use crate::ops::conv::{self, ConvSpec};
use crate::ops::{elementwise, matmul, norm, pool, sample};
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics drive normalization and are queued as running-stat updates.
    Train,
    /// Running statistics drive normalization.
    Eval,
}

/// A value flowing through the tape. Cloning is cheap.
#[derive(Debug, Clone)]
pub struct Var<S: Scalar> {
    id: Option<usize>,
    value: Arc<Tensor<S>>,
}

impl<S: Scalar> Var<S> {
    /// A value that never receives a gradient.
    pub fn constant(value: Tensor<S>) -> Self {
        Self {
            id: None,
            value: Arc::new(value),
        }
    }

    pub fn value(&self) -> &Tensor<S> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    pub fn into_tensor(self) -> Tensor<S> {
        Arc::try_unwrap(self.value).unwrap_or_else(|shared| (*shared).clone())
    }
}

struct BackCtx<'a, S: Scalar> {
    grad: &'a Tensor<S>,
    inputs: &'a [Arc<Tensor<S>>],
    output: &'a Tensor<S>,
    needs: &'a [bool],
}

type BackwardFn<S> = Box<dyn Fn(&BackCtx<'_, S>) -> Result<Vec<Option<Tensor<S>>>> + Send + Sync>;

struct Node<S: Scalar> {
    parents: Vec<Option<usize>>,
    inputs: Vec<Arc<Tensor<S>>>,
    output: Arc<Tensor<S>>,
    backward: Option<BackwardFn<S>>,
}

/// Running-statistics update produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct NormUpdate<S: Scalar> {
    pub key: String,
    pub mean: Vec<S>,
    /// Unbiased batch variance.
    pub var: Vec<S>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    mode: Mode,
    recording: bool,
    params: HashMap<String, usize>,
    norm_updates: Vec<NormUpdate<S>>,
}

/// Gradients of one backward pass, keyed by leaf.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
    params: HashMap<String, usize>,
}

impl<S: Scalar> Gradients<S> {
    pub fn wrt(&self, var: &Var<S>) -> Option<&Tensor<S>> {
        var.id.and_then(|id| self.grads[id].as_ref())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<S>> {
        self.params.get(name).and_then(|&id| self.grads[id].as_ref())
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }
}

fn add_into<S: Scalar>(slot: &mut Option<Tensor<S>>, delta: Tensor<S>) -> Result<()> {
    match slot {
        None => *slot = Some(delta),
        Some(acc) => {
            if !acc.same_shape(&delta) {
                return Err(Error::shape(
                    "backward",
                    format!("gradient {:?} vs accumulator {:?}", delta.shape(), acc.shape()),
                ));
            }
            acc.data_mut().iter_mut().zip(delta.data()).for_each(|(a, &d)| *a += d);
        }
    }
    Ok(())
}

fn same_shape<S: Scalar>(op: &'static str, a: &Var<S>, b: &Var<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn zip_map<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("shape preserved")
}

impl<S: Scalar> Tape<S> {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            recording: true,
            params: HashMap::new(),
            norm_updates: Vec::new(),
        }
    }

    /// Eval-mode tape that records nothing.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new(Mode::Eval)
        }
    }

    /// Tape in `mode` that records nothing; batch norm still follows `mode`.
    pub fn untracked(mode: Mode) -> Self {
        Self {
            recording: false,
            ..Self::new(mode)
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A tracked leaf (when recording); its gradient is available after backward.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var<S> {
        let value = Arc::new(value);
        if !self.recording {
            return Var { id: None, value };
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            parents: Vec::new(),
            inputs: Vec::new(),
            output: value.clone(),
            backward: None,
        });
        Var { id: Some(id), value }
    }

    /// Bind a parameter. Trainable parameters become tracked leaves, shared
    /// across repeated uses within this tape.
    pub fn param(&mut self, p: &Parameter<S>) -> Var<S> {
        if !self.recording || !p.is_trainable() {
            return Var::constant(p.tensor().detached());
        }
        if let Some(&id) = self.params.get(p.name()) {
            return Var {
                id: Some(id),
                value: self.nodes[id].output.clone(),
            };
        }
        let var = self.leaf(p.tensor().detached());
        self.params.insert(p.name().to_string(), var.id.expect("recording"));
        var
    }

    pub fn detach(&self, v: &Var<S>) -> Var<S> {
        Var {
            id: None,
            value: v.value.clone(),
        }
    }

    pub fn norm_updates(&self) -> &[NormUpdate<S>] {
        &self.norm_updates
    }

    fn record<F>(&mut self, inputs: &[&Var<S>], output: Tensor<S>, backward: F) -> Var<S>
    where
        F: Fn(&BackCtx<'_, S>) -> Result<Vec<Option<Tensor<S>>>> + Send + Sync + 'static,
    {
        let output = Arc::new(output);
        if !self.recording || inputs.iter().all(|v| v.id.is_none()) {
            return Var { id: None, value: output };
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            parents: inputs.iter().map(|v| v.id).collect(),
            inputs: inputs.iter().map(|v| v.value.clone()).collect(),
            output: output.clone(),
            backward: Some(Box::new(backward)),
        });
        Var {
            id: Some(id),
            value: output,
        }
    }

    /// Gradient of the scalar `loss` with respect to every tracked leaf.
    pub fn backward(&self, loss: &Var<S>) -> Result<Gradients<S>> {
        let Some(root) = loss.id else {
            return Err(Error::Usage(
                "backward on a value with no saved context (not recorded on this tape)".into(),
            ));
        };
        if root >= self.nodes.len() || !Arc::ptr_eq(&self.nodes[root].output, &loss.value) {
            return Err(Error::Usage("loss was recorded on a different tape".into()));
        }
        if loss.value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::full(loss.shape(), S::one())?);
        for id in (0..=root).rev() {
            let node = &self.nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let ctx = BackCtx {
                grad: &grad,
                inputs: &node.inputs,
                output: &node.output,
                needs: &needs,
            };
            let input_grads = backward(&ctx)?;
            for (parent, g) in node.parents.iter().zip(input_grads) {
                if let (Some(pid), Some(g)) = (parent, g) {
                    add_into(&mut grads[*pid], g)?;
                }
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    // ---- convolution -------------------------------------------------------

    pub fn conv2d(&mut self, x: &Var<S>, w: &Var<S>, b: Option<&Var<S>>, spec: &ConvSpec) -> Result<Var<S>> {
        let out = conv::conv2d(x.value(), w.value(), b.map(Var::value), spec)?;
        let spec = *spec;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.record(&inputs, out, move |c| {
            let needs = [c.needs[0], c.needs[1], c.needs.get(2).copied().unwrap_or(false)];
            let g = conv::conv2d_backward(c.grad, &c.inputs[0], &c.inputs[1], &spec, needs)?;
            Ok(vec![g.input, g.weight, g.bias])
        }))
    }

    pub fn transposed_conv2d(
        &mut self,
        x: &Var<S>,
        w: &Var<S>,
        b: Option<&Var<S>>,
        spec: &ConvSpec,
    ) -> Result<Var<S>> {
        let out = conv::transposed_conv2d(x.value(), w.value(), b.map(Var::value), spec)?;
        let spec = *spec;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.record(&inputs, out, move |c| {
            let needs = [c.needs[0], c.needs[1], c.needs.get(2).copied().unwrap_or(false)];
            let g = conv::transposed_conv2d_backward(c.grad, &c.inputs[0], &c.inputs[1], &spec, needs)?;
            Ok(vec![g.input, g.weight, g.bias])
        }))
    }

    /// `x [N, Cin] -> [N, Cout]` with weight `[Cout, Cin]` and bias `[Cout]`.
    pub fn linear(&mut self, x: &Var<S>, w: &Var<S>, b: &Var<S>) -> Result<Var<S>> {
        let (xs, ws, bs) = (x.shape(), w.shape(), b.shape());
        let ([n, cin], [cout, win], [bout]) = (xs, ws, bs) else {
            return Err(Error::shape(
                "linear",
                format!("expected x [N, Cin], w [Cout, Cin], b [Cout]; got {xs:?}, {ws:?}, {bs:?}"),
            ));
        };
        let (n, cin, cout) = (*n, *cin, *cout);
        if *win != cin || *bout != cout {
            return Err(Error::shape(
                "linear",
                format!("x {xs:?} incompatible with w {ws:?} / b {bs:?}"),
            ));
        }
        let mut out = vec![S::zero(); n * cout];
        matmul(x.value().data(), false, w.value().data(), true, &mut out, n, cin, cout, false);
        for row in out.chunks_mut(cout) {
            row.iter_mut().zip(b.value().data()).for_each(|(o, &bv)| *o += bv);
        }
        let out = Tensor::new(&[n, cout], out)?;
        Ok(self.record(&[x, w, b], out, move |c| {
            let g = c.grad.data();
            let dx = if c.needs[0] {
                let mut dx = vec![S::zero(); n * cin];
                matmul(g, false, c.inputs[1].data(), false, &mut dx, n, cout, cin, false);
                Some(Tensor::new(&[n, cin], dx)?)
            } else {
                None
            };
            let dw = if c.needs[1] {
                let mut dw = vec![S::zero(); cout * cin];
                matmul(g, true, c.inputs[0].data(), false, &mut dw, cout, n, cin, false);
                Some(Tensor::new(&[cout, cin], dw)?)
            } else {
                None
            };
            let db = if c.needs[2] {
                let mut db = vec![S::zero(); cout];
                for row in g.chunks(cout) {
                    db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                }
                Some(Tensor::new(&[cout], db)?)
            } else {
                None
            };
            Ok(vec![dx, dw, db])
        }))
    }

    // ---- sampling ----------------------------------------------------------

    pub fn grid_sample(&mut self, x: &Var<S>, coords: &Var<S>) -> Result<Var<S>> {
        let out = sample::grid_sample_bilinear(x.value(), coords.value())?;
        Ok(self.record(&[x, coords], out, |c| {
            let g = sample::grid_sample_backward(c.grad, &c.inputs[0], &c.inputs[1], [c.needs[0], c.needs[1]])?;
            Ok(vec![g.input, g.coords])
        }))
    }

    pub fn pixel_shuffle(&mut self, x: &Var<S>, scale: usize) -> Result<Var<S>> {
        let out = sample::pixel_shuffle(x.value(), scale)?;
        Ok(self.record(&[x], out, move |c| {
            Ok(vec![Some(sample::pixel_unshuffle(c.grad, scale)?)])
        }))
    }

    pub fn reshape(&mut self, x: &Var<S>, shape: &[usize]) -> Result<Var<S>> {
        let out = x.value().detached().reshape(shape)?;
        let original = x.shape().to_vec();
        Ok(self.record(&[x], out, move |c| Ok(vec![Some(c.grad.clone().reshape(&original)?)])))
    }

    // ---- pointwise ---------------------------------------------------------

    pub fn sigmoid(&mut self, x: &Var<S>) -> Result<Var<S>> {
        let out = x.value().map(elementwise::sigmoid);
        Ok(self.record(&[x], out, |c| {
            Ok(vec![Some(zip_map(c.grad, c.output, |g, y| g * y * (S::one() - y)))])
        }))
    }

    pub fn gelu(&mut self, x: &Var<S>) -> Result<Var<S>> {
        let out = x.value().map(elementwise::gelu);
        Ok(self.record(&[x], out, |c| {
            Ok(vec![Some(zip_map(c.grad, &c.inputs[0], |g, x| g * elementwise::gelu_grad(x)))])
        }))
    }

    pub fn add(&mut self, a: &Var<S>, b: &Var<S>) -> Result<Var<S>> {
        same_shape("add", a, b)?;
        let out = zip_map(a.value(), b.value(), |x, y| x + y);
        Ok(self.record(&[a, b], out, |c| {
            Ok(vec![
                c.needs[0].then(|| c.grad.clone()),
                c.needs[1].then(|| c.grad.clone()),
            ])
        }))
    }

    pub fn sub(&mut self, a: &Var<S>, b: &Var<S>) -> Result<Var<S>> {
        same_shape("sub", a, b)?;
        let out = zip_map(a.value(), b.value(), |x, y| x - y);
        Ok(self.record(&[a, b], out, |c| {
            Ok(vec![
                c.needs[0].then(|| c.grad.clone()),
                c.needs[1].then(|| c.grad.map(|g| -g)),
            ])
        }))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: &Var<S>, b: &Var<S>) -> Result<Var<S>> {
        same_shape("mul", a, b)?;
        let out = zip_map(a.value(), b.value(), |x, y| x * y);
        Ok(self.record(&[a, b], out, |c| {
            Ok(vec![
                c.needs[0].then(|| zip_map(c.grad, &c.inputs[1], |g, y| g * y)),
                c.needs[1].then(|| zip_map(c.grad, &c.inputs[0], |g, x| g * x)),
            ])
        }))
    }

    pub fn scale(&mut self, x: &Var<S>, factor: f64) -> Result<Var<S>> {
        let k = s::<S>(factor);
        let out = x.value().map(|v| v * k);
        Ok(self.record(&[x], out, move |c| Ok(vec![Some(c.grad.map(|g| g * k))])))
    }

    /// Clamp into `[lo, hi]`; the gradient is passed only where the input was
    /// strictly inside.
    pub fn clamp(&mut self, x: &Var<S>, lo: f64, hi: f64) -> Result<Var<S>> {
        let (l, h) = (s::<S>(lo), s::<S>(hi));
        let out = x.value().map(|v| v.max(l).min(h));
        Ok(self.record(&[x], out, move |c| {
            Ok(vec![Some(zip_map(c.grad, &c.inputs[0], |g, v| {
                if v > l && v < h {
                    g
                } else {
                    S::zero()
                }
            }))])
        }))
    }

    /// `x [N, C, H, W] * scale [N, C]`, one factor per channel plane.
    pub fn scale_channels(&mut self, x: &Var<S>, scale: &Var<S>) -> Result<Var<S>> {
        let (n, ch, h, w) = x.value().dims4()?;
        if scale.shape() != [n, ch] {
            return Err(Error::shape(
                "scale_channels",
                format!("scale {:?} vs feature map {:?}", scale.shape(), x.shape()),
            ));
        }
        let plane = h * w;
        let mut out = x.value().data().to_vec();
        for (chunk, &k) in out.chunks_mut(plane).zip(scale.value().data()) {
            chunk.iter_mut().for_each(|v| *v *= k);
        }
        let out = Tensor::new(x.shape(), out)?;
        Ok(self.record(&[x, scale], out, move |c| {
            let g = c.grad.data();
            let dx = if c.needs[0] {
                let mut dx = g.to_vec();
                for (chunk, &k) in dx.chunks_mut(plane).zip(c.inputs[1].data()) {
                    chunk.iter_mut().for_each(|v| *v *= k);
                }
                Some(Tensor::new(c.inputs[0].shape(), dx)?)
            } else {
                None
            };
            let ds = if c.needs[1] {
                let ds = g
                    .chunks(plane)
                    .zip(c.inputs[0].data().chunks(plane))
                    .map(|(gc, xc)| gc.iter().zip(xc).map(|(&a, &b)| a * b).sum::<S>())
                    .collect();
                Some(Tensor::new(&[n, ch], ds)?)
            } else {
                None
            };
            Ok(vec![dx, ds])
        }))
    }

    // ---- structure ---------------------------------------------------------

    /// Concatenate NCHW maps along channels, preserving operand order.
    pub fn concat_channels(&mut self, parts: &[&Var<S>]) -> Result<Var<S>> {
        let Some(first) = parts.first() else {
            return Err(Error::shape("concat_channels", "no operands"));
        };
        let (n, _, h, w) = first.value().dims4()?;
        let mut channels = Vec::with_capacity(parts.len());
        for p in parts {
            let (pn, pc, ph, pw) = p.value().dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("operand {:?} disagrees with {:?} on N/H/W", p.shape(), first.shape()),
                ));
            }
            channels.push(pc);
        }
        let total: usize = channels.iter().sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for (p, &pc) in parts.iter().zip(&channels) {
                out.extend_from_slice(&p.value().data()[b * pc * plane..(b + 1) * pc * plane]);
            }
        }
        let out = Tensor::new(&[n, total, h, w], out)?;
        Ok(self.record(parts, out, move |c| {
            let g = c.grad.data();
            let mut grads = Vec::with_capacity(channels.len());
            let mut offset = 0;
            for (i, &pc) in channels.iter().enumerate() {
                if c.needs[i] {
                    let mut d = Vec::with_capacity(n * pc * plane);
                    for b in 0..n {
                        let start = (b * total + offset) * plane;
                        d.extend_from_slice(&g[start..start + pc * plane]);
                    }
                    grads.push(Some(Tensor::new(&[n, pc, h, w], d)?));
                } else {
                    grads.push(None);
                }
                offset += pc;
            }
            Ok(grads)
        }))
    }

    pub fn global_avg_pool(&mut self, x: &Var<S>) -> Result<Var<S>> {
        let out = pool::global_avg_pool(x.value())?;
        let shape = x.shape().to_vec();
        Ok(self.record(&[x], out, move |c| {
            Ok(vec![Some(pool::global_avg_pool_backward(c.grad, &shape)?)])
        }))
    }

    pub fn avg_pool2d(&mut self, x: &Var<S>, k: usize) -> Result<Var<S>> {
        let out = pool::avg_pool2d(x.value(), k)?;
        let shape = x.shape().to_vec();
        Ok(self.record(&[x], out, move |c| {
            Ok(vec![Some(pool::avg_pool2d_backward(c.grad, &shape, k)?)])
        }))
    }

    // ---- normalization -----------------------------------------------------

    /// Batch norm. In training mode the batch statistics normalize and a
    /// running-stat update keyed by `key` is queued on the tape.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: &Var<S>,
        gamma: &Var<S>,
        beta: &Var<S>,
        running_mean: &Tensor<S>,
        running_var: &Tensor<S>,
        key: &str,
    ) -> Result<Var<S>> {
        match self.mode {
            Mode::Train => {
                let stats = norm::batch_stats(x.value())?;
                let out = norm::normalize(x.value(), &stats.mean, &stats.inv_std, gamma.value(), beta.value())?;
                let correction = if stats.count > 1 {
                    stats.count as f64 / (stats.count - 1) as f64
                } else {
                    1.0
                };
                self.norm_updates.push(NormUpdate {
                    key: key.to_string(),
                    mean: stats.mean.clone(),
                    var: stats.var.iter().map(|&v| v * s(correction)).collect(),
                });
                Ok(self.record(&[x, gamma, beta], out, move |c| {
                    let g = norm::batch_norm_train_backward(c.grad, &c.inputs[0], &stats, &c.inputs[1])?;
                    Ok(vec![Some(g.input), Some(g.gamma), Some(g.beta)])
                }))
            }
            Mode::Eval => {
                let mean = running_mean.data().to_vec();
                let inv_std: Vec<S> = running_var
                    .data()
                    .iter()
                    .map(|&v| S::one() / (v + s(norm::BN_EPS)).sqrt())
                    .collect();
                let out = norm::normalize(x.value(), &mean, &inv_std, gamma.value(), beta.value())?;
                Ok(self.record(&[x, gamma, beta], out, move |c| {
                    let g = norm::affine_backward(c.grad, &c.inputs[0], &mean, &inv_std, &c.inputs[1])?;
                    Ok(vec![Some(g.input), Some(g.gamma), Some(g.beta)])
                }))
            }
        }
    }

    // ---- reductions and losses ---------------------------------------------

    pub fn sum(&mut self, x: &Var<S>) -> Result<Var<S>> {
        let out = Tensor::scalar(x.value().sum());
        let shape = x.shape().to_vec();
        Ok(self.record(&[x], out, move |c| {
            Ok(vec![Some(Tensor::full(&shape, c.grad.data()[0])?)])
        }))
    }

    /// `sum(x * weights)` against a fixed weight tensor.
    pub fn weighted_sum(&mut self, x: &Var<S>, weights: &Tensor<S>) -> Result<Var<S>> {
        if x.shape() != weights.shape() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{:?} vs {:?}", x.shape(), weights.shape()),
            ));
        }
        let total = x.value().data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        let weights = weights.detached();
        Ok(self.record(&[x], Tensor::scalar(total), move |c| {
            let g = c.grad.data()[0];
            Ok(vec![Some(weights.map(|w| w * g))])
        }))
    }

    /// Mean squared error over the joint channels selected by `mask`
    /// (`[N, J, H, W]` operands, one flag per joint; `None` selects all).
    pub fn mse(&mut self, pred: &Var<S>, target: &Var<S>, mask: Option<&[bool]>) -> Result<Var<S>> {
        same_shape("mse", pred, target)?;
        let (n, j, h, w) = pred.value().dims4()?;
        let mask: Vec<bool> = match mask {
            Some(m) if m.len() == j => m.to_vec(),
            Some(m) => {
                return Err(Error::shape(
                    "mse",
                    format!("mask has {} entries for {j} joints", m.len()),
                ))
            }
            None => vec![true; j],
        };
        let active = mask.iter().filter(|&&m| m).count();
        let count = n * active * h * w;
        let plane = h * w;
        let (p, t) = (pred.value().data(), target.value().data());
        let mut total = S::zero();
        for (i, (pc, tc)) in p.chunks(plane).zip(t.chunks(plane)).enumerate() {
            if mask[i % j] {
                total += pc.iter().zip(tc).map(|(&a, &b)| (a - b) * (a - b)).sum::<S>();
            }
        }
        let inv = if count > 0 { s::<S>(1.0 / count as f64) } else { S::zero() };
        let out = Tensor::scalar(total * inv);
        Ok(self.record(&[pred, target], out, move |c| {
            let k = c.grad.data()[0] * s::<S>(2.0) * inv;
            let mut d = vec![S::zero(); c.inputs[0].numel()];
            let (p, t) = (c.inputs[0].data(), c.inputs[1].data());
            for (i, chunk) in d.chunks_mut(plane).enumerate() {
                if mask[i % j] {
                    let off = i * plane;
                    for (q, v) in chunk.iter_mut().enumerate() {
                        *v = k * (p[off + q] - t[off + q]);
                    }
                }
            }
            let dp = Tensor::new(c.inputs[0].shape(), d)?;
            let dt = c.needs[1].then(|| dp.map(|v| -v));
            Ok(vec![c.needs[0].then_some(dp), dt])
        }))
    }
}
