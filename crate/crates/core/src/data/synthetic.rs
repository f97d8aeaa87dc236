//! Seeded synthetic pose data: one coloured Gaussian blob per joint over
//! textured noise. Sample `i` draws from its own generator derived from
//! `(seed, i)`, so any subset can be regenerated independently and parallel
//! generation matches serial generation exactly.

use std::f64::consts::TAU;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{Keypoint, KeypointSet};
use crate::error::{Error, Result};
use crate::rng::indexed_rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::annotations::AnnotationRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub joints: usize,
    /// `[height, width]`
    pub image_size: [usize; 2],
    /// Blob standard deviation in pixels.
    pub blob_radius: f64,
    /// Maximum displacement of each joint from its template position, in pixels.
    pub jitter: f64,
    pub samples: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.image_size;
        if self.joints == 0 || h == 0 || w == 0 || self.samples == 0 {
            return Err(Error::InvalidSpec("synthetic joints, image size and samples must be positive".into()));
        }
        if !(self.blob_radius > 0.0) || !(self.jitter >= 0.0) {
            return Err(Error::InvalidSpec("blob radius must be positive and jitter non-negative".into()));
        }
        if 2.0 * self.blob_radius + 1.0 > h.min(w) as f64 {
            return Err(Error::InvalidSpec("blob radius does not fit in the image".into()));
        }
        Ok(())
    }

    /// Colour of joint `j`: evenly spaced hues at full saturation.
    pub fn joint_colour(&self, j: usize) -> [f64; 3] {
        let hue = 6.0 * j as f64 / self.joints as f64;
        let f = |n: f64| {
            let k = (n + hue) % 6.0;
            1.0 - (k.min(4.0 - k).clamp(0.0, 1.0))
        };
        [f(5.0), f(3.0), f(1.0)]
    }

    /// Joint template positions `(x, y)` on an ellipse about the image centre.
    pub fn template(&self) -> Vec<(f64, f64)> {
        let [h, w] = self.image_size;
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        (0..self.joints)
            .map(|j| {
                let a = TAU * j as f64 / self.joints as f64;
                (cx + 0.3 * w as f64 * a.cos(), cy + 0.3 * h as f64 * a.sin())
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample<S: Scalar> {
    /// `[3, H, W]`
    pub image: Tensor<S>,
    pub keypoints: KeypointSet,
    pub record: AnnotationRecord,
}

/// Sample `index` of the dataset described by `spec` (indices beyond
/// `spec.samples` are valid and give held-out data).
pub fn synthetic_sample<S: Scalar>(spec: &SyntheticSpec, index: u64) -> Result<SyntheticSample<S>> {
    spec.validate()?;
    let [h, w] = spec.image_size;
    let mut rng = indexed_rng(spec.seed, index);
    let r = spec.blob_radius;
    let joints: Vec<(f64, f64)> = spec
        .template()
        .into_iter()
        .map(|(x, y)| {
            let dx = rng.gen_range(-1.0..=1.0) * spec.jitter;
            let dy = rng.gen_range(-1.0..=1.0) * spec.jitter;
            ((x + dx).clamp(r, w as f64 - 1.0 - r), (y + dy).clamp(r, h as f64 - 1.0 - r))
        })
        .collect();

    let mut planes = vec![0.0f64; 3 * h * w];
    for plane in planes.chunks_mut(h * w) {
        let fx: f64 = rng.gen_range(0.05..0.4);
        let fy: f64 = rng.gen_range(0.05..0.4);
        let phase: f64 = rng.gen_range(0.0..TAU);
        for y in 0..h {
            for x in 0..w {
                let texture = 0.05 * (fx * x as f64 + fy * y as f64 + phase).sin();
                plane[y * w + x] = 0.15 + texture + 0.05 * rng.gen_range(-1.0..1.0);
            }
        }
    }
    let reach = (4.0 * r).ceil() as isize;
    for (j, &(jx, jy)) in joints.iter().enumerate() {
        let colour = spec.joint_colour(j);
        let (x0, y0) = (jx.round() as isize, jy.round() as isize);
        for y in (y0 - reach).max(0)..=(y0 + reach).min(h as isize - 1) {
            for x in (x0 - reach).max(0)..=(x0 + reach).min(w as isize - 1) {
                let d2 = (x as f64 - jx).powi(2) + (y as f64 - jy).powi(2);
                let g = (-d2 / (2.0 * r * r)).exp();
                for (c, col) in colour.iter().enumerate() {
                    planes[(c * h + y as usize) * w + x as usize] += g * col;
                }
            }
        }
    }
    let image = Tensor::new(&[3, h, w], planes.into_iter().map(S::from_f64).collect())?;
    let keypoints = KeypointSet::new(joints.iter().map(|&(x, y)| Keypoint::new(x, y, 2)).collect())?;
    let min_x = joints.iter().map(|p| p.0).fold(f64::INFINITY, f64::min) - r;
    let max_x = joints.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max) + r;
    let min_y = joints.iter().map(|p| p.1).fold(f64::INFINITY, f64::min) - r;
    let max_y = joints.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max) + r;
    let bbox = [min_x, min_y, max_x - min_x, max_y - min_y];
    let record = AnnotationRecord {
        id: index,
        image_id: index,
        bbox,
        keypoints: keypoints.clone(),
        area: bbox[2] * bbox[3],
        category_id: 1,
        head_size: None,
    };
    Ok(SyntheticSample { image, keypoints, record })
}

/// Samples `start..start + count`, generated in parallel.
pub fn synthetic_range<S: Scalar>(spec: &SyntheticSpec, start: u64, count: usize) -> Result<Vec<SyntheticSample<S>>> {
    (start..start + count as u64)
        .into_par_iter()
        .map(|i| synthetic_sample(spec, i))
        .collect()
}

/// The full dataset, samples `0..spec.samples`.
pub fn generate_synthetic<S: Scalar>(spec: &SyntheticSpec) -> Result<Vec<SyntheticSample<S>>> {
    synthetic_range(spec, 0, spec.samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            joints: 5,
            image_size: [64, 48],
            blob_radius: 2.0,
            jitter: 6.0,
            samples: 4,
            seed: 9,
        }
    }

    #[test]
    fn deterministic_and_in_frame() {
        let a = generate_synthetic::<f32>(&spec()).unwrap();
        let b = generate_synthetic::<f32>(&spec()).unwrap();
        assert_eq!(a, b);
        let single = synthetic_sample::<f32>(&spec(), 2).unwrap();
        assert_eq!(single, a[2]);
        for s in &a {
            for k in s.keypoints.joints() {
                assert!(k.x >= 2.0 && k.x <= 45.0 && k.y >= 2.0 && k.y <= 61.0);
            }
        }
        assert_ne!(a[0].keypoints, a[1].keypoints);
    }

    #[test]
    fn colours_are_distinct() {
        let s = spec();
        let cols: Vec<[f64; 3]> = (0..5).map(|j| s.joint_colour(j)).collect();
        assert_eq!(cols[0], [1.0, 0.0, 0.0]);
        for i in 0..5 {
            for j in i + 1..5 {
                assert_ne!(cols[i], cols[j]);
            }
        }
    }
}
