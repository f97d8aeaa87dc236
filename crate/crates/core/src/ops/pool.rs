use crate::error::{Error, Result};
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

/// Non-overlapping `k x k` average pooling.
pub fn avg_pool2d<S: Scalar>(x: &Tensor<S>, k: usize) -> Result<Tensor<S>> {
    let (n, c, h, w) = x.dims4()?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::shape(
            "avg_pool2d",
            format!("extent {h}x{w} not divisible by window {k}"),
        ));
    }
    let (oh, ow) = (h / k, w / k);
    let scale = s::<S>(1.0 / (k * k) as f64);
    let xd = x.data();
    let mut out = vec![S::zero(); n * c * oh * ow];
    for (plane, o) in out.chunks_mut(oh * ow).enumerate() {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                o[(y / k) * ow + xx / k] += src[y * w + xx];
            }
        }
        o.iter_mut().for_each(|v| *v *= scale);
    }
    Tensor::new(&[n, c, oh, ow], out)
}

pub fn avg_pool2d_backward<S: Scalar>(grad_out: &Tensor<S>, input_shape: &[usize], k: usize) -> Result<Tensor<S>> {
    let [n, c, h, w] = input_shape[..] else {
        return Err(Error::shape("avg_pool2d_backward", "input must be NCHW"));
    };
    let (oh, ow) = (h / k, w / k);
    if grad_out.shape() != [n, c, oh, ow] {
        return Err(Error::shape(
            "avg_pool2d_backward",
            format!("grad_out {:?} vs pooled [{n}, {c}, {oh}, {ow}]", grad_out.shape()),
        ));
    }
    let scale = s::<S>(1.0 / (k * k) as f64);
    let g = grad_out.data();
    let mut dx = vec![S::zero(); n * c * h * w];
    for (plane, d) in dx.chunks_mut(h * w).enumerate() {
        let src = &g[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..h {
            for xx in 0..w {
                d[y * w + xx] = src[(y / k) * ow + xx / k] * scale;
            }
        }
    }
    Tensor::new(input_shape, dx)
}

/// `[N, C, H, W] -> [N, C]`
pub fn global_avg_pool<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let scale = s::<S>(1.0 / plane as f64);
    let out = x
        .data()
        .chunks(plane)
        .map(|p| p.iter().copied().sum::<S>() * scale)
        .collect();
    Tensor::new(&[n, c], out)
}

pub fn global_avg_pool_backward<S: Scalar>(grad_out: &Tensor<S>, input_shape: &[usize]) -> Result<Tensor<S>> {
    let [n, c, h, w] = input_shape[..] else {
        return Err(Error::shape("global_avg_pool_backward", "input must be NCHW"));
    };
    if grad_out.shape() != [n, c] {
        return Err(Error::shape(
            "global_avg_pool_backward",
            format!("grad_out {:?} vs [{n}, {c}]", grad_out.shape()),
        ));
    }
    let scale = s::<S>(1.0 / (h * w) as f64);
    let mut dx = Vec::with_capacity(n * c * h * w);
    for &g in grad_out.data() {
        dx.extend(std::iter::repeat_n(g * scale, h * w));
    }
    Tensor::new(input_shape, dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn global_pool_of_constant() {
        let x = Tensor::<f64>::full(&[2, 3, 4, 5], 1.75).unwrap();
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert!(y.data().iter().all(|&v| (v - 1.75).abs() < 1e-15));
    }

    #[test]
    fn avg_pool_windows() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 2, 4], |i| i as f64).unwrap();
        let y = avg_pool2d(&x, 2).unwrap();
        assert_eq!(y.data(), &[2.5, 4.5]);
        assert!(avg_pool2d(&x, 3).is_err());
    }
}
