//! Bilinear sampling at arbitrary positions, the primitive under DySample.

use crate::error::{Error, Result};
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

/// Four-tap bilinear stencil at a border-clamped position.
#[derive(Debug, Clone, Copy)]
struct Tap<S> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    wx: S,
    wy: S,
    /// Whether the raw coordinate was inside the valid range on each axis;
    /// clamped axes carry no coordinate gradient.
    inside_x: bool,
    inside_y: bool,
}

#[inline]
fn tap<S: Scalar>(cx: S, cy: S, h: usize, w: usize) -> Tap<S> {
    let (wmax, hmax) = (s::<S>((w - 1) as f64), s::<S>((h - 1) as f64));
    let inside_x = cx >= S::zero() && cx <= wmax;
    let inside_y = cy >= S::zero() && cy <= hmax;
    let x = cx.max(S::zero()).min(wmax);
    let y = cy.max(S::zero()).min(hmax);
    let xf = x.floor();
    let yf = y.floor();
    let x0 = xf.to_f64() as usize;
    let y0 = yf.to_f64() as usize;
    Tap {
        x0,
        x1: (x0 + 1).min(w - 1),
        y0,
        y1: (y0 + 1).min(h - 1),
        wx: x - xf,
        wy: y - yf,
        inside_x,
        inside_y,
    }
}

fn check<S: Scalar>(input: &Tensor<S>, coords: &Tensor<S>) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = input.dims4()?;
    let (cn, two, oh, ow) = coords.dims4()?;
    if two != 2 {
        return Err(Error::shape(
            "grid_sample_bilinear",
            format!("coords must have 2 channels (x, y), got {two}"),
        ));
    }
    if cn != n {
        return Err(Error::shape(
            "grid_sample_bilinear",
            format!("coords batch {cn} vs input batch {n}"),
        ));
    }
    Ok((n, c, h, w, oh, ow))
}

/// Sample `input` at absolute pixel positions `coords[:, 0]` (x) and
/// `coords[:, 1]` (y). Positions outside the map are clamped to the border.
pub fn grid_sample_bilinear<S: Scalar>(input: &Tensor<S>, coords: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c, h, w, oh, ow) = check(input, coords)?;
    let plane = oh * ow;
    let xd = input.data();
    let cd = coords.data();
    let mut out = vec![S::zero(); n * c * plane];
    for b in 0..n {
        let cx = &cd[(b * 2) * plane..(b * 2 + 1) * plane];
        let cy = &cd[(b * 2 + 1) * plane..(b * 2 + 2) * plane];
        for p in 0..plane {
            let t = tap(cx[p], cy[p], h, w);
            for ch in 0..c {
                let img = &xd[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                let top = img[t.y0 * w + t.x0] * (S::one() - t.wx) + img[t.y0 * w + t.x1] * t.wx;
                let bot = img[t.y1 * w + t.x0] * (S::one() - t.wx) + img[t.y1 * w + t.x1] * t.wx;
                out[(b * c + ch) * plane + p] = top * (S::one() - t.wy) + bot * t.wy;
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

pub struct SampleGrads<S: Scalar> {
    pub input: Option<Tensor<S>>,
    pub coords: Option<Tensor<S>>,
}

pub fn grid_sample_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    input: &Tensor<S>,
    coords: &Tensor<S>,
    needs: [bool; 2],
) -> Result<SampleGrads<S>> {
    let (n, c, h, w, oh, ow) = check(input, coords)?;
    if grad_out.shape() != [n, c, oh, ow] {
        return Err(Error::shape(
            "grid_sample_backward",
            format!("grad_out {:?} vs output [{n}, {c}, {oh}, {ow}]", grad_out.shape()),
        ));
    }
    let plane = oh * ow;
    let g = grad_out.data();
    let xd = input.data();
    let cd = coords.data();
    let mut dx = needs[0].then(|| vec![S::zero(); xd.len()]);
    let mut dc = needs[1].then(|| vec![S::zero(); cd.len()]);
    for b in 0..n {
        for p in 0..plane {
            let cx = cd[(b * 2) * plane + p];
            let cy = cd[(b * 2 + 1) * plane + p];
            let t = tap(cx, cy, h, w);
            let (ux, uy) = (S::one() - t.wx, S::one() - t.wy);
            let mut gx = S::zero();
            let mut gy = S::zero();
            for ch in 0..c {
                let go = g[(b * c + ch) * plane + p];
                let base = (b * c + ch) * h * w;
                if let Some(dx) = dx.as_mut() {
                    dx[base + t.y0 * w + t.x0] += go * ux * uy;
                    dx[base + t.y0 * w + t.x1] += go * t.wx * uy;
                    dx[base + t.y1 * w + t.x0] += go * ux * t.wy;
                    dx[base + t.y1 * w + t.x1] += go * t.wx * t.wy;
                }
                if dc.is_some() {
                    let v00 = xd[base + t.y0 * w + t.x0];
                    let v01 = xd[base + t.y0 * w + t.x1];
                    let v10 = xd[base + t.y1 * w + t.x0];
                    let v11 = xd[base + t.y1 * w + t.x1];
                    gx += go * (uy * (v01 - v00) + t.wy * (v11 - v10));
                    gy += go * (ux * (v10 - v00) + t.wx * (v11 - v01));
                }
            }
            if let Some(dc) = dc.as_mut() {
                if t.inside_x {
                    dc[(b * 2) * plane + p] = gx;
                }
                if t.inside_y {
                    dc[(b * 2 + 1) * plane + p] = gy;
                }
            }
        }
    }
    Ok(SampleGrads {
        input: dx.map(|d| Tensor::new(input.shape(), d)).transpose()?,
        coords: dc.map(|d| Tensor::new(coords.shape(), d)).transpose()?,
    })
}

/// Regular `scale`x upsampling grid over an `h x w` map, half-pixel aligned:
/// output pixel `j` samples input position `(j + 0.5) / scale - 0.5`.
pub fn upsample_grid<S: Scalar>(n: usize, h: usize, w: usize, scale: usize) -> Result<Tensor<S>> {
    if scale == 0 {
        return Err(Error::InvalidSpec("upsampling scale must be positive".into()));
    }
    let (oh, ow) = (h * scale, w * scale);
    let inv = 1.0 / scale as f64;
    let mut data = Vec::with_capacity(n * 2 * oh * ow);
    for _ in 0..n {
        for _y in 0..oh {
            for x in 0..ow {
                data.push(s::<S>((x as f64 + 0.5) * inv - 0.5));
            }
        }
        for y in 0..oh {
            let v = s::<S>((y as f64 + 0.5) * inv - 0.5);
            data.extend(std::iter::repeat_n(v, ow));
        }
    }
    Tensor::new(&[n, 2, oh, ow], data)
}

/// `[N, C*s*s, H, W] -> [N, C, H*s, W*s]` with sub-position `(dy, dx)` taken
/// from channel `c*s*s + dy*s + dx`.
pub fn pixel_shuffle<S: Scalar>(x: &Tensor<S>, scale: usize) -> Result<Tensor<S>> {
    let (n, cs, h, w) = x.dims4()?;
    let s2 = scale * scale;
    if scale == 0 || cs % s2 != 0 {
        return Err(Error::shape(
            "pixel_shuffle",
            format!("{cs} channels not divisible by scale^2 = {s2}"),
        ));
    }
    let c = cs / s2;
    let (oh, ow) = (h * scale, w * scale);
    let xd = x.data();
    let mut out = vec![S::zero(); xd.len()];
    for b in 0..n {
        for ch in 0..c {
            for dy in 0..scale {
                for dx in 0..scale {
                    let src = ((b * cs) + ch * s2 + dy * scale + dx) * h * w;
                    for y in 0..h {
                        for xx in 0..w {
                            out[((b * c + ch) * oh + y * scale + dy) * ow + xx * scale + dx] = xd[src + y * w + xx];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

/// Inverse permutation of [`pixel_shuffle`]; also its backward.
pub fn pixel_unshuffle<S: Scalar>(x: &Tensor<S>, scale: usize) -> Result<Tensor<S>> {
    let (n, c, oh, ow) = x.dims4()?;
    if scale == 0 || oh % scale != 0 || ow % scale != 0 {
        return Err(Error::shape(
            "pixel_unshuffle",
            format!("{oh}x{ow} not divisible by scale {scale}"),
        ));
    }
    let (h, w) = (oh / scale, ow / scale);
    let s2 = scale * scale;
    let cs = c * s2;
    let xd = x.data();
    let mut out = vec![S::zero(); xd.len()];
    for b in 0..n {
        for ch in 0..c {
            for dy in 0..scale {
                for dx in 0..scale {
                    let dst = ((b * cs) + ch * s2 + dy * scale + dx) * h * w;
                    for y in 0..h {
                        for xx in 0..w {
                            out[dst + y * w + xx] = xd[((b * c + ch) * oh + y * scale + dy) * ow + xx * scale + dx];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, cs, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coords(xs: &[f64], ys: &[f64]) -> Tensor<f64> {
        let mut v = xs.to_vec();
        v.extend_from_slice(ys);
        Tensor::from_f64(&[1, 2, 1, xs.len()], &v).unwrap()
    }

    #[test]
    fn lattice_points_are_exact() {
        let img = Tensor::<f64>::from_f64(&[1, 1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = grid_sample_bilinear(&img, &coords(&[0.0, 2.0, 1.0], &[0.0, 1.0, 1.0])).unwrap();
        assert_eq!(out.data(), &[1.0, 6.0, 5.0]);
    }

    #[test]
    fn cell_center_averages_corners() {
        let img = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 4.0, 8.0]).unwrap();
        let out = grid_sample_bilinear(&img, &coords(&[0.5], &[0.5])).unwrap();
        assert_eq!(out.data(), &[15.0 / 4.0]);
    }

    #[test]
    fn outside_positions_clamp_to_border() {
        let img = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 4.0, 8.0]).unwrap();
        let out = grid_sample_bilinear(&img, &coords(&[-3.0, 9.0], &[-1.0, 0.0])).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);
    }

    #[test]
    fn coordinate_channels_checked() {
        let img = Tensor::<f64>::ones(&[1, 1, 2, 2]).unwrap();
        let bad = Tensor::<f64>::zeros(&[1, 3, 1, 1]).unwrap();
        assert!(matches!(grid_sample_bilinear(&img, &bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn shuffle_roundtrip() {
        let x = Tensor::<f64>::from_fn(&[2, 8, 3, 2], |i| i as f64).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[2, 2, 6, 4]);
        assert_eq!(pixel_unshuffle(&y, 2).unwrap(), x);
    }
}
