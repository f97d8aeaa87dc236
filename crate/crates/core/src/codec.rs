//! Gaussian heatmap targets and sub-pixel argmax decoding.
//!
//! Pixel `p` and heatmap cell `c` are related by `c = (p + 0.5) / stride - 0.5`
//! in both directions, so a joint on a cell's pixel centre lands exactly on
//! the cell.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    /// 0 unlabeled, 1 labeled but occluded, 2 visible.
    pub v: u8,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, v: u8) -> Self {
        Self { x, y, v }
    }

    pub fn is_labeled(&self) -> bool {
        self.v > 0
    }
}

/// Joint coordinates of one instance, in pixels of some reference frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    joints: Vec<Keypoint>,
}

impl KeypointSet {
    pub fn new(joints: Vec<Keypoint>) -> Result<Self> {
        for (i, k) in joints.iter().enumerate() {
            if !k.x.is_finite() || !k.y.is_finite() {
                return Err(Error::InvalidInput(format!("joint {i} has non-finite coordinates")));
            }
            if k.v > 2 {
                return Err(Error::InvalidInput(format!("joint {i} has visibility {} (expected 0..=2)", k.v)));
            }
        }
        Ok(Self { joints })
    }

    /// From COCO-style flat `(x, y, v)` triplets.
    pub fn from_triplets(values: &[f64]) -> Result<Self> {
        if !values.len().is_multiple_of(3) {
            return Err(Error::InvalidInput(format!(
                "{} keypoint values is not a multiple of 3",
                values.len()
            )));
        }
        let joints = values
            .chunks_exact(3)
            .map(|t| {
                let v = t[2];
                if v.fract() != 0.0 || !(0.0..=2.0).contains(&v) {
                    return Err(Error::InvalidInput(format!("visibility {v} is not 0, 1 or 2")));
                }
                Ok(Keypoint::new(t[0], t[1], v as u8))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(joints)
    }

    pub fn to_triplets(&self) -> Vec<f64> {
        self.joints.iter().flat_map(|k| [k.x, k.y, k.v as f64]).collect()
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn joints(&self) -> &[Keypoint] {
        &self.joints
    }

    pub fn labeled_count(&self) -> usize {
        self.joints.iter().filter(|k| k.is_labeled()).count()
    }

    pub fn map(&self, mut f: impl FnMut(f64, f64) -> (f64, f64)) -> Self {
        Self {
            joints: self
                .joints
                .iter()
                .map(|k| {
                    let (x, y) = f(k.x, k.y);
                    Keypoint::new(x, y, k.v)
                })
                .collect(),
        }
    }
}

/// Sub-cell adjustment applied after the integer argmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Refinement {
    None,
    /// Shift a quarter cell toward the larger neighbour on each axis.
    Quarter,
    /// Vertex of the parabola through the peak and its two neighbours, per axis.
    #[default]
    Parabolic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodedJoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
    pub low_confidence: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatmapCodec {
    /// Input pixels per heatmap cell.
    pub stride: usize,
    /// Gaussian standard deviation in heatmap cells.
    pub sigma: f64,
    pub refinement: Refinement,
    /// Peaks below this are flagged as low confidence.
    pub min_confidence: f64,
}

impl Default for HeatmapCodec {
    fn default() -> Self {
        Self {
            stride: 4,
            sigma: 2.0,
            refinement: Refinement::Parabolic,
            min_confidence: 0.1,
        }
    }
}

impl HeatmapCodec {
    pub fn pixel_to_cell(&self, p: f64) -> f64 {
        (p + 0.5) / self.stride as f64 - 0.5
    }

    pub fn cell_to_pixel(&self, c: f64) -> f64 {
        (c + 0.5) * self.stride as f64 - 0.5
    }

    /// `[joints, h, w]` unnormalized Gaussians with unit peak; unlabeled joints
    /// give all-zero channels.
    pub fn encode<S: Scalar>(&self, kps: &KeypointSet, size: [usize; 2]) -> Result<Tensor<S>> {
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidSpec(format!("sigma must be positive, got {}", self.sigma)));
        }
        if kps.is_empty() {
            return Err(Error::InvalidInput("keypoint set is empty".into()));
        }
        let [h, w] = size;
        let mut out = Tensor::zeros(&[kps.len(), h, w])?;
        let denom = 2.0 * self.sigma * self.sigma;
        let data = out.data_mut();
        for (j, k) in kps.joints().iter().enumerate() {
            if !k.is_labeled() {
                continue;
            }
            let (cx, cy) = (self.pixel_to_cell(k.x), self.pixel_to_cell(k.y));
            let gx: Vec<f64> = (0..w).map(|x| (-(x as f64 - cx).powi(2) / denom).exp()).collect();
            for y in 0..h {
                let gy = (-(y as f64 - cy).powi(2) / denom).exp();
                let row = &mut data[(j * h + y) * w..(j * h + y + 1) * w];
                for (v, g) in row.iter_mut().zip(&gx) {
                    *v = s(gy * g);
                }
            }
        }
        Ok(out)
    }

    /// Decode a `[joints, h, w]` heatmap into input-pixel coordinates.
    pub fn decode<S: Scalar>(&self, hm: &Tensor<S>) -> Result<Vec<DecodedJoint>> {
        if hm.rank() != 3 {
            return Err(Error::shape("decode", format!("expected [joints, h, w], got {:?}", hm.shape())));
        }
        let (j, h, w) = (hm.shape()[0], hm.shape()[1], hm.shape()[2]);
        Ok(hm
            .data()
            .chunks_exact(h * w)
            .take(j)
            .map(|plane| self.decode_plane(plane, h, w))
            .collect())
    }

    /// Decode `[N, joints, h, w]` into one list per sample.
    pub fn decode_batch<S: Scalar>(&self, hm: &Tensor<S>) -> Result<Vec<Vec<DecodedJoint>>> {
        let (n, j, h, w) = hm.dims4()?;
        (0..n)
            .map(|i| {
                let t = Tensor::new(&[j, h, w], hm.data()[i * j * h * w..(i + 1) * j * h * w].to_vec())?;
                self.decode(&t)
            })
            .collect()
    }

    fn decode_plane<S: Scalar>(&self, plane: &[S], h: usize, w: usize) -> DecodedJoint {
        let mut best = 0;
        for (i, v) in plane.iter().enumerate() {
            if *v > plane[best] {
                best = i;
            }
        }
        let (r, c) = (best / w, best % w);
        let at = |y: usize, x: usize| plane[y * w + x].to_f64();
        let peak = at(r, c);
        let (mut dx, mut dy) = (0.0, 0.0);
        if c > 0 && c + 1 < w {
            dx = self.offset(at(r, c - 1), peak, at(r, c + 1));
        }
        if r > 0 && r + 1 < h {
            dy = self.offset(at(r - 1, c), peak, at(r + 1, c));
        }
        let confidence = if peak.is_finite() { peak } else { 0.0 };
        DecodedJoint {
            x: self.cell_to_pixel(c as f64 + dx),
            y: self.cell_to_pixel(r as f64 + dy),
            confidence,
            low_confidence: !(confidence >= self.min_confidence),
        }
    }

    fn offset(&self, left: f64, mid: f64, right: f64) -> f64 {
        match self.refinement {
            Refinement::None => 0.0,
            Refinement::Quarter => {
                if right > left {
                    0.25
                } else if left > right {
                    -0.25
                } else {
                    0.0
                }
            }
            Refinement::Parabolic => {
                let curvature = left - 2.0 * mid + right;
                if curvature < 0.0 && curvature.is_finite() {
                    (0.5 * (left - right) / curvature).clamp(-0.5, 0.5)
                } else {
                    0.0
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(x: f64, y: f64, v: u8) -> KeypointSet {
        KeypointSet::new(vec![Keypoint::new(x, y, v)]).unwrap()
    }

    #[test]
    fn peak_on_cell_centre() {
        let c = HeatmapCodec::default();
        let px = c.cell_to_pixel(10.0);
        let hm: Tensor<f64> = c.encode(&one(px, px, 2), [64, 48]).unwrap();
        assert_eq!(hm.data()[10 * 48 + 10], 1.0);
        let expected = (-9.0f64 / 8.0).exp();
        assert!((hm.data()[10 * 48 + 13] - expected).abs() < 1e-12);
        assert!((expected - 0.3247).abs() < 1e-4);
    }

    #[test]
    fn invisible_joint_is_zero() {
        let hm: Tensor<f32> = HeatmapCodec::default().encode(&one(20.0, 20.0, 0), [16, 16]).unwrap();
        assert!(hm.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn one_hot_and_empty_decode() {
        let c = HeatmapCodec::default();
        let mut t = Tensor::<f64>::zeros(&[2, 8, 8]).unwrap();
        t.data_mut()[3 * 8 + 5] = 0.7;
        let d = c.decode(&t).unwrap();
        assert_eq!((d[0].x, d[0].y), (c.cell_to_pixel(5.0), c.cell_to_pixel(3.0)));
        assert_eq!(d[0].confidence, 0.7);
        assert!(!d[0].low_confidence);
        assert_eq!((d[1].x, d[1].y, d[1].confidence), (c.cell_to_pixel(0.0), c.cell_to_pixel(0.0), 0.0));
        assert!(d[1].low_confidence);
    }

    #[test]
    fn quarter_shift_moves_toward_larger_neighbour() {
        let c = HeatmapCodec {
            refinement: Refinement::Quarter,
            ..Default::default()
        };
        let mut t = Tensor::<f64>::zeros(&[1, 5, 5]).unwrap();
        t.data_mut()[2 * 5 + 2] = 1.0;
        t.data_mut()[2 * 5 + 3] = 0.5;
        let d = c.decode(&t).unwrap();
        assert_eq!(d[0].x, c.cell_to_pixel(2.25));
        assert_eq!(d[0].y, c.cell_to_pixel(2.0));
    }

    #[test]
    fn triplets_validate() {
        assert!(KeypointSet::from_triplets(&[1.0, 2.0]).is_err());
        assert!(KeypointSet::from_triplets(&[1.0, 2.0, 3.0]).is_err());
        let k = KeypointSet::from_triplets(&[1.0, 2.0, 2.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(k.labeled_count(), 1);
        assert_eq!(k.to_triplets(), vec![1.0, 2.0, 2.0, 0.0, 0.0, 0.0]);
    }
}
