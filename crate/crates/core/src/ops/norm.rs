//! Batch normalization kernels over the N, H, W axes of NCHW tensors.

use crate::error::{Error, Result};
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

/// Per-channel statistics of a training-mode forward.
#[derive(Debug, Clone)]
pub struct BatchStats<S: Scalar> {
    pub mean: Vec<S>,
    /// Biased variance, as used for normalization.
    pub var: Vec<S>,
    pub inv_std: Vec<S>,
    /// Elements per channel.
    pub count: usize,
}

fn check_affine<S: Scalar>(x: &Tensor<S>, gamma: &Tensor<S>, beta: &Tensor<S>) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "batch_norm",
            format!(
                "gamma {:?} / beta {:?} do not match {c} channels",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    Ok((n, c, h * w))
}

pub fn batch_stats<S: Scalar>(x: &Tensor<S>) -> Result<BatchStats<S>> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let count = n * plane;
    let xd = x.data();
    let inv_count = s::<S>(1.0 / count as f64);
    let mut mean = vec![S::zero(); c];
    let mut var = vec![S::zero(); c];
    for ch in 0..c {
        let mut acc = S::zero();
        for b in 0..n {
            acc += xd[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().copied().sum::<S>();
        }
        let m = acc * inv_count;
        let mut sq = S::zero();
        for b in 0..n {
            for &v in &xd[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                sq += (v - m) * (v - m);
            }
        }
        mean[ch] = m;
        var[ch] = sq * inv_count;
    }
    let inv_std = var.iter().map(|&v| S::one() / (v + s(BN_EPS)).sqrt()).collect();
    Ok(BatchStats {
        mean,
        var,
        inv_std,
        count,
    })
}

/// `y = gamma * (x - mean) * inv_std + beta`, per channel.
pub fn normalize<S: Scalar>(
    x: &Tensor<S>,
    mean: &[S],
    inv_std: &[S],
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (_, c, plane) = check_affine(x, gamma, beta)?;
    let (g, b) = (gamma.data(), beta.data());
    let mut out = x.data().to_vec();
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let ch = i % c;
        let scale = g[ch] * inv_std[ch];
        let shift = b[ch] - mean[ch] * scale;
        chunk.iter_mut().for_each(|v| *v = *v * scale + shift);
    }
    Tensor::new(x.shape(), out)
}

/// Running-statistics normalization (eval mode).
pub fn batch_norm_eval<S: Scalar>(
    x: &Tensor<S>,
    running_mean: &Tensor<S>,
    running_var: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
) -> Result<Tensor<S>> {
    let inv_std: Vec<S> = running_var
        .data()
        .iter()
        .map(|&v| S::one() / (v + s(BN_EPS)).sqrt())
        .collect();
    normalize(x, running_mean.data(), &inv_std, gamma, beta)
}

pub struct NormGrads<S: Scalar> {
    pub input: Tensor<S>,
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
}

/// Backward of a normalization with fixed statistics (eval mode).
pub fn affine_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    x: &Tensor<S>,
    mean: &[S],
    inv_std: &[S],
    gamma: &Tensor<S>,
) -> Result<NormGrads<S>> {
    let (_, c, h, w) = x.dims4()?;
    let plane = h * w;
    let g = gamma.data();
    let mut dx = grad_out.data().to_vec();
    let mut dgamma = vec![S::zero(); c];
    let mut dbeta = vec![S::zero(); c];
    for (i, (dchunk, xchunk)) in dx.chunks_mut(plane).zip(x.data().chunks(plane)).enumerate() {
        let ch = i % c;
        for (d, &xv) in dchunk.iter_mut().zip(xchunk) {
            dbeta[ch] += *d;
            dgamma[ch] += *d * (xv - mean[ch]) * inv_std[ch];
            *d *= g[ch] * inv_std[ch];
        }
    }
    Ok(NormGrads {
        input: Tensor::new(x.shape(), dx)?,
        gamma: Tensor::new(&[c], dgamma)?,
        beta: Tensor::new(&[c], dbeta)?,
    })
}

/// Backward of a training-mode normalization, where mean and variance are
/// themselves functions of the input.
pub fn batch_norm_train_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    x: &Tensor<S>,
    stats: &BatchStats<S>,
    gamma: &Tensor<S>,
) -> Result<NormGrads<S>> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let dy = grad_out.data();
    let xd = x.data();
    let g = gamma.data();
    let mut dgamma = vec![S::zero(); c];
    let mut dbeta = vec![S::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                let xhat = (xd[i] - stats.mean[ch]) * stats.inv_std[ch];
                dbeta[ch] += dy[i];
                dgamma[ch] += dy[i] * xhat;
            }
        }
    }
    let inv_count = s::<S>(1.0 / stats.count as f64);
    let mut dx = vec![S::zero(); xd.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let k = g[ch] * stats.inv_std[ch];
            for i in off..off + plane {
                let xhat = (xd[i] - stats.mean[ch]) * stats.inv_std[ch];
                dx[i] = k * (dy[i] - dbeta[ch] * inv_count - xhat * dgamma[ch] * inv_count);
            }
        }
    }
    Ok(NormGrads {
        input: Tensor::new(x.shape(), dx)?,
        gamma: Tensor::new(&[c], dgamma)?,
        beta: Tensor::new(&[c], dbeta)?,
    })
}
