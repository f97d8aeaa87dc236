use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{join, BatchNorm2d, Conv2d, Module, Parameter};
use crate::ops::ConvSpec;
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

/// Parallel `(kernel, dilation)` branches added to a large depthwise kernel.
pub fn default_branches(kernel: usize) -> Vec<(usize, usize)> {
    match kernel {
        9 => vec![(5, 1), (3, 2), (3, 3), (3, 4)],
        11 => vec![(5, 1), (5, 2), (3, 3), (3, 4), (3, 5)],
        13 => vec![(5, 1), (7, 2), (3, 3), (3, 4), (3, 5)],
        15 => vec![(5, 1), (7, 2), (3, 3), (3, 5), (3, 7)],
        17 => vec![(5, 1), (9, 2), (3, 4), (3, 5), (3, 7)],
        _ => vec![(5, 1), (3, 2), (3, 3)],
    }
}

/// Expand a dilated kernel `[.., .., k, k]` into the equivalent dense kernel of
/// extent `(k - 1) * r + 1` by inserting `r - 1` zeros between taps.
pub fn dilated_to_dense<S: Scalar>(weight: &Tensor<S>, dilation: usize) -> Result<Tensor<S>> {
    let (o, i, kh, kw) = weight.dims4()?;
    if kh != kw || kh % 2 == 0 {
        return Err(Error::InvalidSpec(format!(
            "dilated kernel must be square with odd extent, got {kh}x{kw}"
        )));
    }
    if dilation == 0 {
        return Err(Error::InvalidSpec("dilation must be positive".into()));
    }
    let e = (kh - 1) * dilation + 1;
    let mut out = Tensor::zeros(&[o, i, e, e])?;
    let src = weight.data();
    let dst = out.data_mut();
    for plane in 0..o * i {
        for y in 0..kh {
            for x in 0..kw {
                dst[plane * e * e + y * dilation * e + x * dilation] = src[plane * kh * kw + y * kw + x];
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ReparamBranch<S: Scalar> {
    pub kernel: usize,
    pub dilation: usize,
    pub conv: Conv2d<S>,
    pub bn: BatchNorm2d<S>,
}

/// Large-kernel depthwise conv plus parallel small dilated depthwise branches,
/// each followed by batch norm. [`merge_reparam`](Self::merge_reparam) folds
/// everything into one depthwise conv with bias.
#[derive(Debug, Clone)]
pub struct DilatedReparamBlock<S: Scalar> {
    prefix: String,
    channels: usize,
    kernel: usize,
    pub main: Option<(Conv2d<S>, BatchNorm2d<S>)>,
    pub branches: Vec<ReparamBranch<S>>,
    pub merged: Option<Conv2d<S>>,
}

impl<S: Scalar> DilatedReparamBlock<S> {
    pub fn new(prefix: &str, channels: usize, kernel: usize, seed: u64) -> Result<Self> {
        Self::with_branches(prefix, channels, kernel, &default_branches(kernel), seed)
    }

    pub fn with_branches(
        prefix: &str,
        channels: usize,
        kernel: usize,
        branches: &[(usize, usize)],
        seed: u64,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) || channels == 0 {
            return Err(Error::InvalidSpec(format!(
                "reparam block needs an odd kernel and channels > 0, got kernel {kernel}, channels {channels}"
            )));
        }
        let main_name = join(prefix, "main");
        let main_conv = Conv2d::new(
            &join(&main_name, "conv"),
            ConvSpec::depthwise(channels, kernel, 1).bias(false),
            seed,
        )?;
        let main_bn = BatchNorm2d::new(&join(&main_name, "bn"), channels)?;
        let mut out = Vec::with_capacity(branches.len());
        for (i, &(k, r)) in branches.iter().enumerate() {
            if k % 2 == 0 || r == 0 || (k - 1) * r + 1 > kernel {
                return Err(Error::InvalidSpec(format!(
                    "branch ({k}, {r}) must have odd kernel and extent within {kernel}"
                )));
            }
            let name = join(prefix, &format!("branches.{i}"));
            out.push(ReparamBranch {
                kernel: k,
                dilation: r,
                conv: Conv2d::new(
                    &join(&name, "conv"),
                    ConvSpec::depthwise(channels, k, r).bias(false),
                    seed,
                )?,
                bn: BatchNorm2d::new(&join(&name, "bn"), channels)?,
            });
        }
        Ok(Self {
            prefix: prefix.to_string(),
            channels,
            kernel,
            main: Some((main_conv, main_bn)),
            branches: out,
            merged: None,
        })
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn is_deployed(&self) -> bool {
        self.merged.is_some()
    }

    pub fn forward(&self, tape: &mut Tape<S>, x: &Var<S>) -> Result<Var<S>> {
        if let Some(merged) = &self.merged {
            return merged.forward(tape, x);
        }
        let (conv, bn) = self
            .main
            .as_ref()
            .ok_or_else(|| Error::State("reparam block has neither branches nor merged kernel".into()))?;
        let y = conv.forward(tape, x)?;
        let mut acc = bn.forward(tape, &y)?;
        for b in &self.branches {
            let y = b.conv.forward(tape, x)?;
            let y = b.bn.forward(tape, &y)?;
            acc = tape.add(&acc, &y)?;
        }
        Ok(acc)
    }

    /// The merged `[C, 1, K, K]` kernel and `[C]` bias, computed in f64 from the
    /// current weights and running statistics.
    pub fn merged_kernel(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let (conv, bn) = self
            .main
            .as_ref()
            .ok_or_else(|| Error::State("block is already deployed".into()))?;
        let (c, k) = (self.channels, self.kernel);
        let (scale, shift) = bn.fold();
        let mut weight = conv.weight.tensor().to_f64_vec();
        for ch in 0..c {
            for v in &mut weight[ch * k * k..(ch + 1) * k * k] {
                *v *= scale[ch];
            }
        }
        let mut bias = shift;
        for b in &self.branches {
            let dense = dilated_to_dense(b.conv.weight.tensor(), b.dilation)?;
            let e = dense.shape()[2];
            let off = (k - e) / 2;
            let dense = dense.to_f64_vec();
            let (scale, shift) = b.bn.fold();
            for ch in 0..c {
                for y in 0..e {
                    for x in 0..e {
                        weight[ch * k * k + (y + off) * k + x + off] += scale[ch] * dense[ch * e * e + y * e + x];
                    }
                }
                bias[ch] += shift[ch];
            }
        }
        Ok((weight, bias))
    }

    /// Replace the branches with a single depthwise conv that computes the same
    /// eval-mode function.
    pub fn merge_reparam(&mut self) -> Result<()> {
        if self.is_deployed() {
            return Err(Error::State(format!("{} is already deployed", self.prefix)));
        }
        let (w, b) = self.merged_kernel()?;
        let (c, k) = (self.channels, self.kernel);
        let spec = ConvSpec::depthwise(c, k, 1);
        let weight = Tensor::new(&[c, 1, k, k], w.into_iter().map(s::<S>).collect())?;
        let mut conv = Conv2d::with_weight(&join(&self.prefix, "merged"), spec, weight)?;
        let bias: Vec<S> = b.into_iter().map(s::<S>).collect();
        conv.bias
            .as_mut()
            .expect("depthwise spec has bias")
            .set_values(&bias)?;
        self.merged = Some(conv);
        self.main = None;
        self.branches.clear();
        Ok(())
    }
}

impl<S: Scalar> Module<S> for DilatedReparamBlock<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<S>)) {
        if let Some((c, b)) = &self.main {
            c.visit(f);
            b.visit(f);
        }
        for br in &self.branches {
            br.conv.visit(f);
            br.bn.visit(f);
        }
        self.merged.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<S>)) {
        if let Some((c, b)) = &mut self.main {
            c.visit_mut(f);
            b.visit_mut(f);
        }
        for br in &mut self.branches {
            br.conv.visit_mut(f);
            br.bn.visit_mut(f);
        }
        self.merged.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::indexed_rng;
    use rand::Rng;

    #[test]
    fn dense_expansion_places_taps() {
        let w = Tensor::<f64>::from_fn(&[1, 1, 3, 3], |i| (i + 1) as f64).unwrap();
        let d = dilated_to_dense(&w, 2).unwrap();
        assert_eq!(d.shape(), &[1, 1, 5, 5]);
        assert_eq!(d.data()[0], 1.0);
        assert_eq!(d.data()[2], 2.0);
        assert_eq!(d.data()[1], 0.0);
        assert_eq!(d.data()[24], 9.0);
        assert_eq!(dilated_to_dense(&w, 1).unwrap(), w);
    }

    #[test]
    fn even_kernel_rejected() {
        let w = Tensor::<f64>::ones(&[1, 1, 4, 4]).unwrap();
        assert!(matches!(dilated_to_dense(&w, 2), Err(Error::InvalidSpec(_))));
        assert!(DilatedReparamBlock::<f64>::new("m", 4, 8, 0).is_err());
        assert!(DilatedReparamBlock::<f64>::with_branches("m", 4, 7, &[(5, 2)], 0).is_err());
    }

    #[test]
    fn merge_matches_branches_in_eval_mode() {
        let mut block = DilatedReparamBlock::<f64>::new("m", 3, 7, 11).unwrap();
        let mut rng = indexed_rng(5, 5);
        block.visit_mut(&mut |p| {
            let vals: Vec<f64> = if p.name().ends_with("running_var") {
                (0..p.numel()).map(|_| rng.gen_range(0.5..2.0)).collect()
            } else {
                (0..p.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect()
            };
            p.set_values(&vals).unwrap();
        });
        let x = Var::constant(Tensor::<f64>::randn(&[2, 3, 9, 11], &mut rng).unwrap());
        let before = block.forward(&mut Tape::inference(), &x).unwrap();
        block.merge_reparam().unwrap();
        let after = block.forward(&mut Tape::inference(), &x).unwrap();
        assert!(before.value().max_abs_diff(after.value()).unwrap() <= 1e-8);
        assert!(matches!(block.merge_reparam(), Err(Error::State(_))));
        assert_eq!(block.parameters().len(), 2);
    }
}
