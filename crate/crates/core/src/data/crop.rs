use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Crop boxes are grown by this factor about their centre.
pub const CROP_PADDING: f64 = 1.25;

/// Uniform scale plus translation: `u = scale * x + tx`, `v = scale * y + ty`.
/// Coordinates are pixel-centre based (pixel `i` is centred at `i`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropTransform {
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
}

impl CropTransform {
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (self.scale * x + self.tx, self.scale * y + self.ty)
    }

    pub fn invert(&self, u: f64, v: f64) -> (f64, f64) {
        ((u - self.tx) / self.scale, (v - self.ty) / self.scale)
    }
}

/// Expand `[x, y, w, h]` about its centre to the target aspect, then pad.
pub fn expand_box(bbox: [f64; 4], target: [usize; 2], padding: f64) -> [f64; 4] {
    let [x, y, w, h] = bbox;
    let aspect = target[1] as f64 / target[0] as f64;
    let (cx, cy) = (x + 0.5 * w, y + 0.5 * h);
    let (w, h) = if w > aspect * h { (w, w / aspect) } else { (h * aspect, h) };
    let (w, h) = (w * padding, h * padding);
    [cx - 0.5 * w, cy - 0.5 * h, w, h]
}

/// The transform that maps a box (after aspect expansion and `padding`) onto a
/// `target = [height, width]` canvas.
pub fn crop_transform(bbox: [f64; 4], target: [usize; 2], padding: f64) -> Result<CropTransform> {
    if !(bbox[2] > 0.0 && bbox[3] > 0.0) || bbox.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("degenerate crop box {bbox:?}")));
    }
    let [left, top, w, _] = expand_box(bbox, target, padding);
    let scale = target[1] as f64 / w;
    // Box edges are pixel boundaries, pixel centres sit half a pixel inside.
    Ok(CropTransform {
        scale,
        tx: scale * (0.5 - left) - 0.5,
        ty: scale * (0.5 - top) - 0.5,
    })
}

/// Crop `image` (`[C, H, W]`) to `target` around `bbox`, clamped to the image,
/// with bilinear resampling; samples outside the image read as zero.
pub fn crop_to_input<S: Scalar>(
    image: &Tensor<S>,
    bbox: [f64; 4],
    target: [usize; 2],
) -> Result<(Tensor<S>, CropTransform)> {
    if image.rank() != 3 {
        return Err(Error::shape("crop_to_input", format!("expected [C, H, W], got {:?}", image.shape())));
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let x0 = bbox[0].max(0.0);
    let y0 = bbox[1].max(0.0);
    let x1 = (bbox[0] + bbox[2]).min(w as f64);
    let y1 = (bbox[1] + bbox[3]).min(h as f64);
    let clamped = [x0, y0, x1 - x0, y1 - y0];
    let t = crop_transform(clamped, target, CROP_PADDING)?;
    let [th, tw] = target;
    let src = image.data();
    let mut out = vec![S::zero(); c * th * tw];
    let read = |ch: usize, y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            src[(ch * h + y as usize) * w + x as usize].to_f64()
        }
    };
    for v in 0..th {
        for u in 0..tw {
            let (x, y) = t.invert(u as f64, v as f64);
            let (fx, fy) = (x.floor(), y.floor());
            let (ax, ay) = (x - fx, y - fy);
            let (ix, iy) = (fx as isize, fy as isize);
            for ch in 0..c {
                let val = (1.0 - ay) * ((1.0 - ax) * read(ch, iy, ix) + ax * read(ch, iy, ix + 1))
                    + ay * ((1.0 - ax) * read(ch, iy + 1, ix) + ax * read(ch, iy + 1, ix + 1));
                out[(ch * th + v) * tw + u] = S::from_f64(val);
            }
        }
    }
    Ok((Tensor::new(&[c, th, tw], out)?, t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_fit_is_translation() {
        // 192 / 1.25 = 153.6 wide, 256 / 1.25 = 204.8 tall.
        let t = crop_transform([10.0, 20.0, 153.6, 204.8], [256, 192], CROP_PADDING).unwrap();
        assert!((t.scale - 1.0).abs() < 1e-12);
        let (u, v) = t.apply(10.0 + 76.8 - 0.5, 20.0 + 102.4 - 0.5);
        assert!((u - 95.5).abs() < 1e-9 && (v - 127.5).abs() < 1e-9);
    }

    #[test]
    fn double_size_halves_scale() {
        let t = crop_transform([0.0, 0.0, 384.0, 512.0], [256, 192], 1.0).unwrap();
        assert_eq!(t.scale, 0.5);
        let t = crop_transform([0.0, 0.0, 307.2, 409.6], [256, 192], CROP_PADDING).unwrap();
        assert!((t.scale - 0.5).abs() < 1e-15);
    }

    #[test]
    fn aspect_expansion() {
        let b = expand_box([0.0, 0.0, 30.0, 10.0], [256, 192], 1.0);
        assert_eq!((b[2], b[3]), (30.0, 40.0));
        assert!(crop_transform([0.0, 0.0, 0.0, 3.0], [256, 192], 1.25).is_err());
    }

    #[test]
    fn crop_samples_image() {
        let img = Tensor::<f64>::from_fn(&[1, 40, 30], |i| (i % 30) as f64).unwrap();
        let (crop, t) = crop_to_input(&img, [5.0, 5.0, 12.0, 16.0], [32, 24]).unwrap();
        let (x, _) = t.invert(12.0, 16.0);
        assert!((crop.data()[16 * 24 + 12] - x).abs() < 1e-9);
    }
}
