use std::borrow::Cow;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::matmul;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Geometry of a 2-D convolution. Pairs are `(height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Square `k x k` kernel, stride 1, no padding, bias on.
    pub fn new(in_channels: usize, out_channels: usize, k: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: (k, k),
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            groups: 1,
            has_bias: true,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = (p, p);
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = (d, d);
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn bias(mut self, on: bool) -> Self {
        self.has_bias = on;
        self
    }

    /// Depthwise `k x k` conv with "same" padding for odd `k`.
    pub fn depthwise(channels: usize, k: usize, dilation: usize) -> Self {
        Self::new(channels, channels, k)
            .groups(channels)
            .dilation(dilation)
            .padding(dilation * (k - 1) / 2)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.in_channels,
            self.out_channels,
            self.kernel.0,
            self.kernel.1,
            self.stride.0,
            self.stride.1,
            self.dilation.0,
            self.dilation.1,
            self.groups,
        ];
        if positive.contains(&0) {
            return Err(Error::InvalidSpec(format!(
                "channels, kernel, stride, dilation and groups must be positive: {self:?}"
            )));
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return Err(Error::InvalidSpec(format!(
                "groups {} must divide in_channels {} and out_channels {}",
                self.groups, self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }

    pub fn effective_kernel(&self) -> (usize, usize) {
        (
            (self.kernel.0 - 1) * self.dilation.0 + 1,
            (self.kernel.1 - 1) * self.dilation.1 + 1,
        )
    }

    /// Output extents of the forward convolution on an `h x w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let (eh, ew) = self.effective_kernel();
        let (ph, pw) = (h + 2 * self.padding.0, w + 2 * self.padding.1);
        if eh > ph || ew > pw {
            return Err(Error::InvalidSpec(format!(
                "effective kernel {eh}x{ew} exceeds padded input {ph}x{pw}"
            )));
        }
        Ok(((ph - eh) / self.stride.0 + 1, (pw - ew) / self.stride.1 + 1))
    }

    /// Output extents of the transposed convolution on an `h x w` input.
    pub fn transposed_output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let (eh, ew) = self.effective_kernel();
        let oh = ((h - 1) * self.stride.0 + eh) as isize - 2 * self.padding.0 as isize;
        let ow = ((w - 1) * self.stride.1 + ew) as isize - 2 * self.padding.1 as isize;
        if oh < 1 || ow < 1 {
            return Err(Error::InvalidSpec(format!(
                "transposed conv output would be {oh}x{ow}"
            )));
        }
        Ok((oh as usize, ow as usize))
    }

    /// `[out, in / groups, kh, kw]`
    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel.0,
            self.kernel.1,
        ]
    }

    /// `[in, out / groups, kh, kw]`
    pub fn transposed_weight_shape(&self) -> [usize; 4] {
        [
            self.in_channels,
            self.out_channels / self.groups,
            self.kernel.0,
            self.kernel.1,
        ]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels / self.groups * self.kernel.0 * self.kernel.1
    }

    /// The forward conv whose input-gradient is this spec's transposed conv.
    fn adjoint(&self) -> ConvSpec {
        ConvSpec {
            in_channels: self.out_channels,
            out_channels: self.in_channels,
            ..*self
        }
    }

    fn is_depthwise(&self) -> bool {
        self.in_channels == self.groups && self.out_channels == self.groups
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == (1, 1) && self.padding == (0, 0)
    }
}

/// Gradients produced by a convolution backward pass. Entries that were not
/// requested are `None`.
#[derive(Debug, Default)]
pub struct ConvGrads<S: Scalar> {
    pub input: Option<Tensor<S>>,
    pub weight: Option<Tensor<S>>,
    pub bias: Option<Tensor<S>>,
}

/// Resolved extents of one conv application.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    spec: ConvSpec,
    n: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn cin_g(&self) -> usize {
        self.spec.in_channels / self.spec.groups
    }
    fn cout_g(&self) -> usize {
        self.spec.out_channels / self.spec.groups
    }
    fn k_area(&self) -> usize {
        self.spec.kernel.0 * self.spec.kernel.1
    }
    fn in_plane(&self) -> usize {
        self.h * self.w
    }
    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }
    fn col_rows(&self) -> usize {
        self.cin_g() * self.k_area()
    }
    fn weight_group_len(&self) -> usize {
        self.cout_g() * self.col_rows()
    }

    /// Input row/column sampled by output position `o` and kernel tap `k`.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, dil: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * stride + k * dil) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

fn im2col<S: Scalar>(x: &[S], g: &Geometry) -> Vec<S> {
    let ConvSpec {
        kernel: (kh, kw),
        stride: (sh, sw),
        padding: (ph, pw),
        dilation: (dh, dw),
        ..
    } = g.spec;
    let plane = g.out_plane();
    let mut col = vec![S::zero(); g.col_rows() * plane];
    for c in 0..g.cin_g() {
        let xc = &x[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let Some(iy) = Geometry::src(oy, ki, sh, dh, ph, g.h) else {
                        continue;
                    };
                    let xrow = &xc[iy * g.w..(iy + 1) * g.w];
                    for ox in 0..g.ow {
                        if let Some(ix) = Geometry::src(ox, kj, sw, dw, pw, g.w) {
                            dst[oy * g.ow + ox] = xrow[ix];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im_add<S: Scalar>(col: &[S], g: &Geometry, dx: &mut [S]) {
    let ConvSpec {
        kernel: (kh, kw),
        stride: (sh, sw),
        padding: (ph, pw),
        dilation: (dh, dw),
        ..
    } = g.spec;
    let plane = g.out_plane();
    for c in 0..g.cin_g() {
        let dxc = &mut dx[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let Some(iy) = Geometry::src(oy, ki, sh, dh, ph, g.h) else {
                        continue;
                    };
                    for ox in 0..g.ow {
                        if let Some(ix) = Geometry::src(ox, kj, sw, dw, pw, g.w) {
                            dxc[iy * g.w + ix] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn group_cols<'a, S: Scalar>(xg: &'a [S], g: &Geometry) -> Cow<'a, [S]> {
    if g.spec.is_pointwise() {
        Cow::Borrowed(xg)
    } else {
        Cow::Owned(im2col(xg, g))
    }
}

/// Forward pass for one sample: `x` is `[C, H, W]`, `out` is `[O, Ho, Wo]`.
fn forward_sample<S: Scalar>(x: &[S], weight: &[S], g: &Geometry, out: &mut [S]) {
    if g.spec.is_depthwise() {
        depthwise_forward(x, weight, g, out);
        return;
    }
    let cin = g.cin_g() * g.in_plane();
    let cout = g.cout_g() * g.out_plane();
    for grp in 0..g.spec.groups {
        let col = group_cols(&x[grp * cin..(grp + 1) * cin], g);
        let wg = &weight[grp * g.weight_group_len()..(grp + 1) * g.weight_group_len()];
        matmul(
            wg,
            false,
            &col,
            false,
            &mut out[grp * cout..(grp + 1) * cout],
            g.cout_g(),
            g.col_rows(),
            g.out_plane(),
            false,
        );
    }
}

/// Input gradient for one sample: `dy` is `[O, Ho, Wo]`, `dx` is `[C, H, W]`.
fn input_grad_sample<S: Scalar>(dy: &[S], weight: &[S], g: &Geometry, dx: &mut [S]) {
    if g.spec.is_depthwise() {
        depthwise_input_grad(dy, weight, g, dx);
        return;
    }
    let cin = g.cin_g() * g.in_plane();
    let cout = g.cout_g() * g.out_plane();
    let mut col = vec![S::zero(); g.col_rows() * g.out_plane()];
    for grp in 0..g.spec.groups {
        let wg = &weight[grp * g.weight_group_len()..(grp + 1) * g.weight_group_len()];
        let dyg = &dy[grp * cout..(grp + 1) * cout];
        let dxg = &mut dx[grp * cin..(grp + 1) * cin];
        if g.spec.is_pointwise() {
            matmul(wg, true, dyg, false, dxg, g.col_rows(), g.cout_g(), g.out_plane(), true);
        } else {
            matmul(wg, true, dyg, false, &mut col, g.col_rows(), g.cout_g(), g.out_plane(), false);
            col2im_add(&col, g, dxg);
        }
    }
}

/// Accumulate the weight gradient of one sample into `dw`.
fn weight_grad_sample<S: Scalar>(x: &[S], dy: &[S], g: &Geometry, dw: &mut [S]) {
    if g.spec.is_depthwise() {
        depthwise_weight_grad(x, dy, g, dw);
        return;
    }
    let cin = g.cin_g() * g.in_plane();
    let cout = g.cout_g() * g.out_plane();
    for grp in 0..g.spec.groups {
        let col = group_cols(&x[grp * cin..(grp + 1) * cin], g);
        let dyg = &dy[grp * cout..(grp + 1) * cout];
        let dwg = &mut dw[grp * g.weight_group_len()..(grp + 1) * g.weight_group_len()];
        matmul(dyg, false, &col, true, dwg, g.cout_g(), g.out_plane(), g.col_rows(), true);
    }
}

fn depthwise_forward<S: Scalar>(x: &[S], weight: &[S], g: &Geometry, out: &mut [S]) {
    let ConvSpec {
        kernel: (kh, kw),
        stride: (sh, sw),
        padding: (ph, pw),
        dilation: (dh, dw),
        ..
    } = g.spec;
    for c in 0..g.spec.in_channels {
        let xc = &x[c * g.in_plane()..(c + 1) * g.in_plane()];
        let wc = &weight[c * kh * kw..(c + 1) * kh * kw];
        let oc = &mut out[c * g.out_plane()..(c + 1) * g.out_plane()];
        oc.iter_mut().for_each(|v| *v = S::zero());
        for ki in 0..kh {
            for kj in 0..kw {
                let wv = wc[ki * kw + kj];
                for oy in 0..g.oh {
                    let Some(iy) = Geometry::src(oy, ki, sh, dh, ph, g.h) else {
                        continue;
                    };
                    let xrow = &xc[iy * g.w..(iy + 1) * g.w];
                    let orow = &mut oc[oy * g.ow..(oy + 1) * g.ow];
                    for (ox, o) in orow.iter_mut().enumerate() {
                        if let Some(ix) = Geometry::src(ox, kj, sw, dw, pw, g.w) {
                            *o += wv * xrow[ix];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_input_grad<S: Scalar>(dy: &[S], weight: &[S], g: &Geometry, dx: &mut [S]) {
    let ConvSpec {
        kernel: (kh, kw),
        stride: (sh, sw),
        padding: (ph, pw),
        dilation: (dh, dw),
        ..
    } = g.spec;
    for c in 0..g.spec.in_channels {
        let dyc = &dy[c * g.out_plane()..(c + 1) * g.out_plane()];
        let wc = &weight[c * kh * kw..(c + 1) * kh * kw];
        let dxc = &mut dx[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ki in 0..kh {
            for kj in 0..kw {
                let wv = wc[ki * kw + kj];
                for oy in 0..g.oh {
                    let Some(iy) = Geometry::src(oy, ki, sh, dh, ph, g.h) else {
                        continue;
                    };
                    for ox in 0..g.ow {
                        if let Some(ix) = Geometry::src(ox, kj, sw, dw, pw, g.w) {
                            dxc[iy * g.w + ix] += wv * dyc[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_weight_grad<S: Scalar>(x: &[S], dy: &[S], g: &Geometry, dwt: &mut [S]) {
    let ConvSpec {
        kernel: (kh, kw),
        stride: (sh, sw),
        padding: (ph, pw),
        dilation: (dh, dw),
        ..
    } = g.spec;
    for c in 0..g.spec.in_channels {
        let xc = &x[c * g.in_plane()..(c + 1) * g.in_plane()];
        let dyc = &dy[c * g.out_plane()..(c + 1) * g.out_plane()];
        for ki in 0..kh {
            for kj in 0..kw {
                let mut acc = S::zero();
                for oy in 0..g.oh {
                    let Some(iy) = Geometry::src(oy, ki, sh, dh, ph, g.h) else {
                        continue;
                    };
                    for ox in 0..g.ow {
                        if let Some(ix) = Geometry::src(ox, kj, sw, dw, pw, g.w) {
                            acc += xc[iy * g.w + ix] * dyc[oy * g.ow + ox];
                        }
                    }
                }
                dwt[(c * kh + ki) * kw + kj] += acc;
            }
        }
    }
}

fn check_weight<S: Scalar>(op: &'static str, weight: &Tensor<S>, expected: [usize; 4]) -> Result<()> {
    if weight.shape() != expected {
        return Err(Error::shape(
            op,
            format!("weight shape {:?}, expected {expected:?}", weight.shape()),
        ));
    }
    Ok(())
}

fn check_bias<S: Scalar>(op: &'static str, bias: Option<&Tensor<S>>, spec: &ConvSpec) -> Result<()> {
    match (bias, spec.has_bias) {
        (Some(b), true) if b.shape() == [spec.out_channels] => Ok(()),
        (Some(b), true) => Err(Error::shape(
            op,
            format!("bias shape {:?}, expected [{}]", b.shape(), spec.out_channels),
        )),
        (None, false) => Ok(()),
        (Some(_), false) => Err(Error::InvalidSpec(format!("{op}: bias given but has_bias = false"))),
        (None, true) => Err(Error::InvalidSpec(format!("{op}: has_bias = true but no bias given"))),
    }
}

fn add_bias<S: Scalar>(out: &mut [S], bias: &[S], plane: usize) {
    for sample in out.chunks_mut(bias.len() * plane) {
        for (chan, &b) in sample.chunks_mut(plane).zip(bias) {
            chan.iter_mut().for_each(|v| *v += b);
        }
    }
}

fn bias_grad<S: Scalar>(dy: &[S], channels: usize, plane: usize) -> Vec<S> {
    let mut db = vec![S::zero(); channels];
    for sample in dy.chunks(channels * plane) {
        for (acc, chan) in db.iter_mut().zip(sample.chunks(plane)) {
            *acc += chan.iter().copied().sum::<S>();
        }
    }
    db
}

fn geometry<S: Scalar>(op: &'static str, input: &Tensor<S>, spec: &ConvSpec) -> Result<Geometry> {
    spec.validate()?;
    let (n, c, h, w) = input.dims4()?;
    if c != spec.in_channels {
        return Err(Error::shape(
            op,
            format!("input has {c} channels, spec expects {}", spec.in_channels),
        ));
    }
    let (oh, ow) = spec.output_size(h, w)?;
    Ok(Geometry {
        spec: *spec,
        n,
        h,
        w,
        oh,
        ow,
    })
}

fn run_forward<S: Scalar>(input: &[S], weight: &[S], g: &Geometry) -> Vec<S> {
    let in_len = g.spec.in_channels * g.in_plane();
    let out_len = g.spec.out_channels * g.out_plane();
    let mut out = vec![S::zero(); g.n * out_len];
    out.par_chunks_mut(out_len)
        .zip(input.par_chunks(in_len))
        .for_each(|(o, x)| forward_sample(x, weight, g, o));
    out
}

fn run_input_grad<S: Scalar>(dy: &[S], weight: &[S], g: &Geometry) -> Vec<S> {
    let in_len = g.spec.in_channels * g.in_plane();
    let out_len = g.spec.out_channels * g.out_plane();
    let mut dx = vec![S::zero(); g.n * in_len];
    dx.par_chunks_mut(in_len)
        .zip(dy.par_chunks(out_len))
        .for_each(|(dx, dy)| input_grad_sample(dy, weight, g, dx));
    dx
}

fn run_weight_grad<S: Scalar>(x: &[S], dy: &[S], g: &Geometry) -> Vec<S> {
    let in_len = g.spec.in_channels * g.in_plane();
    let out_len = g.spec.out_channels * g.out_plane();
    let mut dw = vec![S::zero(); g.spec.groups * g.weight_group_len()];
    // Samples accumulate in index order so results do not depend on threads.
    for (x, dy) in x.chunks(in_len).zip(dy.chunks(out_len)) {
        weight_grad_sample(x, dy, g, &mut dw);
    }
    dw
}

/// Cross-correlation of an NCHW input with `[out, in/groups, kh, kw]` weights.
pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    spec: &ConvSpec,
) -> Result<Tensor<S>> {
    let g = geometry("conv2d", input, spec)?;
    check_weight("conv2d", weight, spec.weight_shape())?;
    check_bias("conv2d", bias, spec)?;
    let mut out = run_forward(input.data(), weight.data(), &g);
    if let Some(b) = bias {
        add_bias(&mut out, b.data(), g.out_plane());
    }
    Tensor::new(&[g.n, spec.out_channels, g.oh, g.ow], out)
}

/// Which gradients a backward pass should produce: `[input, weight, bias]`.
pub type Needs = [bool; 3];

pub const ALL_GRADS: Needs = [true, true, true];

pub fn conv2d_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    input: &Tensor<S>,
    weight: &Tensor<S>,
    spec: &ConvSpec,
    needs: Needs,
) -> Result<ConvGrads<S>> {
    let g = geometry("conv2d_backward", input, spec)?;
    check_weight("conv2d_backward", weight, spec.weight_shape())?;
    let expected = [g.n, spec.out_channels, g.oh, g.ow];
    if grad_out.shape() != expected {
        return Err(Error::shape(
            "conv2d_backward",
            format!("grad_out shape {:?}, forward output {expected:?}", grad_out.shape()),
        ));
    }
    let dy = grad_out.data();
    let mut grads = ConvGrads::default();
    if needs[0] {
        let dx = run_input_grad(dy, weight.data(), &g);
        grads.input = Some(Tensor::new(input.shape(), dx)?);
    }
    if needs[1] {
        let dw = run_weight_grad(input.data(), dy, &g);
        grads.weight = Some(Tensor::new(weight.shape(), dw)?);
    }
    if needs[2] && spec.has_bias {
        let db = bias_grad(dy, spec.out_channels, g.out_plane());
        grads.bias = Some(Tensor::new(&[spec.out_channels], db)?);
    }
    Ok(grads)
}

fn transposed_geometry<S: Scalar>(input: &Tensor<S>, spec: &ConvSpec) -> Result<Geometry> {
    spec.validate()?;
    let (n, c, h, w) = input.dims4()?;
    if c != spec.in_channels {
        return Err(Error::shape(
            "transposed_conv2d",
            format!("input has {c} channels, spec expects {}", spec.in_channels),
        ));
    }
    let (oh, ow) = spec.transposed_output_size(h, w)?;
    // The adjoint conv maps the (oh, ow) output back onto (h, w).
    let adj = spec.adjoint();
    let back = adj.output_size(oh, ow)?;
    if back != (h, w) {
        return Err(Error::InvalidSpec(format!(
            "transposed conv is not invertible in shape: {h}x{w} -> {oh}x{ow} -> {back:?}"
        )));
    }
    Ok(Geometry {
        spec: adj,
        n,
        h: oh,
        w: ow,
        oh: h,
        ow: w,
    })
}

/// Transposed convolution ("deconvolution") with `[in, out/groups, kh, kw]`
/// weights. Output extent per axis is `(H-1)*s - 2p + d*(k-1) + 1`.
pub fn transposed_conv2d<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    spec: &ConvSpec,
) -> Result<Tensor<S>> {
    let g = transposed_geometry(input, spec)?;
    check_weight("transposed_conv2d", weight, spec.transposed_weight_shape())?;
    check_bias("transposed_conv2d", bias, spec)?;
    let mut out = run_input_grad(input.data(), weight.data(), &g);
    if let Some(b) = bias {
        add_bias(&mut out, b.data(), g.in_plane());
    }
    Tensor::new(&[g.n, spec.out_channels, g.h, g.w], out)
}

pub fn transposed_conv2d_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    input: &Tensor<S>,
    weight: &Tensor<S>,
    spec: &ConvSpec,
    needs: Needs,
) -> Result<ConvGrads<S>> {
    let g = transposed_geometry(input, spec)?;
    check_weight("transposed_conv2d_backward", weight, spec.transposed_weight_shape())?;
    let expected = [g.n, spec.out_channels, g.h, g.w];
    if grad_out.shape() != expected {
        return Err(Error::shape(
            "transposed_conv2d_backward",
            format!("grad_out shape {:?}, forward output {expected:?}", grad_out.shape()),
        ));
    }
    let dy = grad_out.data();
    let mut grads = ConvGrads::default();
    if needs[0] {
        let dx = run_forward(dy, weight.data(), &g);
        grads.input = Some(Tensor::new(input.shape(), dx)?);
    }
    if needs[1] {
        let dw = run_weight_grad(dy, input.data(), &g);
        grads.weight = Some(Tensor::new(weight.shape(), dw)?);
    }
    if needs[2] && spec.has_bias {
        let db = bias_grad(dy, spec.out_channels, g.in_plane());
        grads.bias = Some(Tensor::new(&[spec.out_channels], db)?);
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_kernel_sums_window() {
        let x = Tensor::<f32>::ones(&[1, 1, 3, 3]).unwrap();
        let w = Tensor::<f32>::ones(&[1, 1, 3, 3]).unwrap();
        let spec = ConvSpec::new(1, 1, 3).bias(false);
        let y = conv2d(&x, &w, None, &spec).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn unit_pointwise_kernel_is_identity() {
        let x = Tensor::<f64>::from_fn(&[2, 1, 4, 5], |i| i as f64 * 0.5 - 3.0).unwrap();
        let w = Tensor::<f64>::ones(&[1, 1, 1, 1]).unwrap();
        let y = conv2d(&x, &w, None, &ConvSpec::new(1, 1, 1).bias(false)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn transposed_stride2_tiles() {
        let x = Tensor::<f32>::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::<f32>::ones(&[1, 1, 2, 2]).unwrap();
        let spec = ConvSpec::new(1, 1, 2).stride(2).bias(false);
        let y = transposed_conv2d(&x, &w, None, &spec).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        #[rustfmt::skip]
        let expected = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(y.data(), &expected);
    }

    #[test]
    fn decoder_deconv_doubles_extent() {
        let spec = ConvSpec::new(8, 8, 4).stride(2).padding(1).bias(false);
        assert_eq!(spec.transposed_output_size(32, 24).unwrap(), (64, 48));
    }

    #[test]
    fn rejects_bad_specs() {
        let x = Tensor::<f32>::ones(&[1, 4, 5, 5]).unwrap();
        let w = Tensor::<f32>::ones(&[6, 2, 3, 3]).unwrap();
        let spec = ConvSpec::new(4, 6, 3).groups(3).bias(false);
        assert!(matches!(conv2d(&x, &w, None, &spec), Err(Error::InvalidSpec(_))));

        let big = ConvSpec::new(4, 6, 7).bias(false);
        let w7 = Tensor::<f32>::ones(&[6, 4, 7, 7]).unwrap();
        assert!(matches!(conv2d(&x, &w7, None, &big), Err(Error::InvalidSpec(_))));

        let wrong = Tensor::<f32>::ones(&[6, 3, 3, 3]).unwrap();
        let spec = ConvSpec::new(4, 6, 3).bias(false);
        assert!(matches!(conv2d(&x, &wrong, None, &spec), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 5, 5], |i| (i as f64).sin()).unwrap();
        let w = Tensor::<f64>::from_fn(&[3, 2, 3, 3], |i| (i as f64).cos()).unwrap();
        let spec = ConvSpec::new(2, 3, 3).padding(1);
        let dy = Tensor::<f64>::zeros(&[1, 3, 5, 5]).unwrap();
        let g = conv2d_backward(&dy, &x, &w, &spec, ALL_GRADS).unwrap();
        for t in [g.input.unwrap(), g.weight.unwrap(), g.bias.unwrap()] {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn constant_weight_interior_input_grad_is_weight_sum() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 6, 6], |i| i as f64).unwrap();
        let w = Tensor::<f64>::full(&[1, 1, 3, 3], 0.5).unwrap();
        let spec = ConvSpec::new(1, 1, 3).padding(1).bias(false);
        let dy = Tensor::<f64>::ones(&[1, 1, 6, 6]).unwrap();
        let g = conv2d_backward(&dy, &x, &w, &spec, ALL_GRADS).unwrap();
        let dx = g.input.unwrap();
        for r in 1..5 {
            for c in 1..5 {
                assert_eq!(dx.at4(0, 0, r, c), 4.5);
            }
        }
    }
}
