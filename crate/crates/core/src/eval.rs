//! Keypoint metrics: OKS-based average precision (COCO / CrowdPose protocol)
//! and head-normalized PCKh (MPII protocol).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::codec::KeypointSet;
use crate::error::{Error, Result};

const COCO_SIGMAS: [f64; 17] = [
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107, 0.107, 0.087, 0.087,
    0.089, 0.089,
];
const CROWDPOSE_SIGMAS: [f64; 14] = [
    0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107, 0.107, 0.087, 0.087, 0.089, 0.089, 0.079, 0.079,
];

/// Per-joint falloff constants `k_i` (twice the per-joint standard deviations).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OksParams {
    k: Vec<f64>,
}

impl OksParams {
    pub fn new(k: Vec<f64>) -> Result<Self> {
        if k.is_empty() || k.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput("OKS constants must be positive and finite".into()));
        }
        Ok(Self { k })
    }

    pub fn from_sigmas(sigmas: &[f64]) -> Result<Self> {
        Self::new(sigmas.iter().map(|s| 2.0 * s).collect())
    }

    pub fn coco() -> Self {
        Self::from_sigmas(&COCO_SIGMAS).expect("positive table")
    }

    pub fn crowdpose() -> Self {
        Self::from_sigmas(&CROWDPOSE_SIGMAS).expect("positive table")
    }

    /// COCO table for 17 joints, CrowdPose for 14.
    pub fn for_joints(joints: usize) -> Result<Self> {
        match joints {
            17 => Ok(Self::coco()),
            14 => Ok(Self::crowdpose()),
            n => Err(Error::InvalidInput(format!("no default OKS table for {n} joints"))),
        }
    }

    pub fn k(&self) -> &[f64] {
        &self.k
    }
}

/// `sum_i [v_i > 0] exp(-d_i^2 / (2 s^2 k_i^2)) / sum_i [v_i > 0]` over the
/// ground truth's labeled joints; `scale` is `s`, the square root of the area.
pub fn oks(pred: &KeypointSet, gt: &KeypointSet, params: &OksParams, scale: f64) -> Result<f64> {
    if pred.len() != gt.len() || gt.len() != params.k().len() {
        return Err(Error::shape(
            "oks",
            format!("{} predicted, {} ground-truth joints, {} constants", pred.len(), gt.len(), params.k().len()),
        ));
    }
    if !(scale > 0.0) {
        return Err(Error::InvalidInput(format!("instance scale must be positive, got {scale}")));
    }
    let mut total = 0.0;
    let mut labeled = 0usize;
    for ((p, g), k) in pred.joints().iter().zip(gt.joints()).zip(params.k()) {
        if !g.is_labeled() {
            continue;
        }
        let d2 = (p.x - g.x).powi(2) + (p.y - g.y).powi(2);
        total += (-d2 / (2.0 * scale * scale * k * k)).exp();
        labeled += 1;
    }
    if labeled == 0 {
        return Err(Error::UndefinedOks("ground truth has no labeled joints".into()));
    }
    Ok(total / labeled as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub image_id: u64,
    pub keypoints: KeypointSet,
    /// Object area in px²; the OKS scale is its square root.
    pub area: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub image_id: u64,
    pub score: f64,
    pub keypoints: KeypointSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Ap,
    Pckh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdValue {
    pub threshold: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointValue {
    pub name: String,
    /// `None` when no joint of this group was visible.
    pub value: Option<f64>,
    pub visible: usize,
}

/// Metric results. Values are fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: Metric,
    pub value: f64,
    pub thresholds: Vec<ThresholdValue>,
    pub joints: Vec<JointValue>,
    /// AP: matches at the loosest threshold. PCKh: correct joints.
    pub matched: usize,
    pub unmatched_predictions: usize,
    pub unmatched_ground_truths: usize,
    /// Ground truths or records that took part.
    pub evaluated: usize,
    /// Ground truths without labeled joints, or records without a head size.
    pub skipped: usize,
    /// Nothing to evaluate; `value` is 0.
    pub empty: bool,
}

impl EvalReport {
    pub fn threshold(&self, t: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .find(|v| (v.threshold - t).abs() < 1e-9)
            .map(|v| v.value)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text table with values ×100.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        match self.metric {
            Metric::Ap => {
                let ap50 = self.threshold(0.5).unwrap_or(0.0);
                let ap75 = self.threshold(0.75).unwrap_or(0.0);
                let _ = writeln!(out, "{:>7} {:>7} {:>7}", "AP", "AP50", "AP75");
                let _ = writeln!(out, "{:>7.1} {:>7.1} {:>7.1}", 100.0 * self.value, 100.0 * ap50, 100.0 * ap75);
            }
            Metric::Pckh => {
                let mut head = String::new();
                let mut row = String::new();
                for j in &self.joints {
                    let _ = write!(head, "{:>7}", j.name);
                    match j.value {
                        Some(v) => {
                            let _ = write!(row, "{:>7.1}", 100.0 * v);
                        }
                        None => {
                            let _ = write!(row, "{:>7}", "-");
                        }
                    }
                }
                let _ = writeln!(out, "{head}{:>7}", "Mean");
                let _ = writeln!(out, "{row}{:>7.1}", 100.0 * self.value);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApConfig {
    pub thresholds: Vec<f64>,
    pub max_dets: usize,
    pub params: OksParams,
}

impl ApConfig {
    pub fn new(params: OksParams) -> Self {
        Self {
            thresholds: coco_oks_thresholds(),
            max_dets: 20,
            params,
        }
    }
}

/// `0.50:0.05:0.95`, generated the way the reference evaluator does so that
/// exact-equality comparisons agree bit for bit.
pub fn coco_oks_thresholds() -> Vec<f64> {
    linspace(0.5, 0.95, 10)
}

fn recall_thresholds() -> Vec<f64> {
    linspace(0.0, 1.0, 101)
}

fn linspace(start: f64, stop: f64, num: usize) -> Vec<f64> {
    let step = (stop - start) / (num - 1) as f64;
    let mut v: Vec<f64> = (0..num).map(|i| i as f64 * step + start).collect();
    v[num - 1] = stop;
    v
}

/// Precision averaged over 101 recall points, per OKS threshold, then over
/// thresholds.
pub fn average_precision(preds: &[Prediction], gts: &[GroundTruth], cfg: &ApConfig) -> Result<EvalReport> {
    let joints = cfg.params.k().len();
    for p in preds {
        if p.keypoints.len() != joints {
            return Err(Error::shape("average_precision", format!("prediction has {} joints, expected {joints}", p.keypoints.len())));
        }
        if !p.score.is_finite() {
            return Err(Error::InvalidInput(format!("prediction on image {} has a non-finite score", p.image_id)));
        }
    }
    for g in gts {
        if g.keypoints.len() != joints {
            return Err(Error::shape("average_precision", format!("ground truth has {} joints, expected {joints}", g.keypoints.len())));
        }
    }
    let skipped = gts.iter().filter(|g| g.keypoints.labeled_count() == 0).count();
    let mut images: BTreeMap<u64, (Vec<&GroundTruth>, Vec<&Prediction>)> = BTreeMap::new();
    for g in gts.iter().filter(|g| g.keypoints.labeled_count() > 0) {
        images.entry(g.image_id).or_default().0.push(g);
    }
    for p in preds {
        images.entry(p.image_id).or_default().1.push(p);
    }
    let total_gt: usize = images.values().map(|(g, _)| g.len()).sum();

    // Per image: detections by descending score (stable), capped, with their OKS rows.
    struct ImageEval<'a> {
        dets: Vec<&'a Prediction>,
        ious: Vec<Vec<f64>>,
        gts: usize,
    }
    let mut evals = Vec::with_capacity(images.len());
    for (gs, ps) in images.values() {
        let mut dets = ps.clone();
        dets.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("finite scores"));
        dets.truncate(cfg.max_dets);
        let ious = dets
            .iter()
            .map(|d| {
                gs.iter()
                    .map(|g| oks(&d.keypoints, &g.keypoints, &cfg.params, g.area.max(0.0).sqrt().max(f64::MIN_POSITIVE)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        evals.push(ImageEval { dets, ious, gts: gs.len() });
    }

    let rec_thrs = recall_thresholds();
    let mut per_threshold = Vec::with_capacity(cfg.thresholds.len());
    let mut matched_first = 0;
    let mut det_count = 0;
    for (ti, &t) in cfg.thresholds.iter().enumerate() {
        // (score, is_true_positive) in image order, detections within an image by score.
        let mut scored: Vec<(f64, bool)> = Vec::new();
        let mut matched = 0;
        for ev in &evals {
            let mut gt_used = vec![false; ev.gts];
            for (d, row) in ev.dets.iter().zip(&ev.ious) {
                let mut best = t.min(1.0 - 1e-10);
                let mut m = None;
                for (g, &o) in row.iter().enumerate() {
                    if gt_used[g] || o < best {
                        continue;
                    }
                    best = o;
                    m = Some(g);
                }
                if let Some(g) = m {
                    gt_used[g] = true;
                    matched += 1;
                }
                scored.push((d.score, m.is_some()));
            }
        }
        if ti == 0 {
            matched_first = matched;
            det_count = scored.len();
        }
        // Stable sort keeps image order among equal scores.
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));
        per_threshold.push(ThresholdValue {
            threshold: t,
            value: interpolated_ap(&scored, total_gt, &rec_thrs),
        });
    }
    let empty = total_gt == 0;
    let value = if empty || per_threshold.is_empty() {
        0.0
    } else {
        per_threshold.iter().map(|v| v.value).sum::<f64>() / per_threshold.len() as f64
    };
    Ok(EvalReport {
        metric: Metric::Ap,
        value,
        thresholds: per_threshold,
        joints: Vec::new(),
        matched: matched_first,
        unmatched_predictions: det_count - matched_first,
        unmatched_ground_truths: total_gt - matched_first,
        evaluated: total_gt,
        skipped,
        empty,
    })
}

fn interpolated_ap(scored: &[(f64, bool)], total_gt: usize, rec_thrs: &[f64]) -> f64 {
    if total_gt == 0 || scored.is_empty() {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(scored.len());
    let mut precision = Vec::with_capacity(scored.len());
    let (mut tp, mut fp) = (0.0f64, 0.0f64);
    for &(_, hit) in scored {
        if hit {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        recall.push(tp / total_gt as f64);
        precision.push(tp / (tp + fp));
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let sum: f64 = rec_thrs
        .iter()
        .map(|&r| {
            let idx = recall.partition_point(|&x| x < r);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .sum();
    sum / rec_thrs.len() as f64
}

/// MPII joint order.
pub const MPII_JOINTS: [&str; 16] = [
    "r_ankle", "r_knee", "r_hip", "l_hip", "l_knee", "l_ankle", "pelvis", "thorax", "upper_neck", "head_top",
    "r_wrist", "r_elbow", "r_shoulder", "l_shoulder", "l_elbow", "l_wrist",
];
/// Reported groups as `(label, joint indices)`; pairs are averaged left/right.
pub const PCKH_GROUPS: [(&str, &[usize]); 7] = [
    ("Hea.", &[9]),
    ("Sho.", &[12, 13]),
    ("Elb.", &[11, 14]),
    ("Wri.", &[10, 15]),
    ("Hip.", &[2, 3]),
    ("Kne.", &[1, 4]),
    ("Ank.", &[0, 5]),
];
/// Pelvis and thorax are left out of the mean.
const PCKH_EXCLUDED: [usize; 2] = [6, 7];

#[derive(Debug, Clone, PartialEq)]
pub struct PckhGroundTruth {
    pub keypoints: KeypointSet,
    pub head_size: Option<f64>,
}

/// A joint is correct iff its error is at most `fraction * head_size`.
pub fn pckh(preds: &[KeypointSet], gts: &[PckhGroundTruth], fraction: f64) -> Result<EvalReport> {
    if !(fraction > 0.0) {
        return Err(Error::InvalidInput(format!("PCKh fraction must be positive, got {fraction}")));
    }
    if preds.len() != gts.len() {
        return Err(Error::shape("pckh", format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    let joints = MPII_JOINTS.len();
    let mut visible = [0usize; 16];
    let mut correct = [0usize; 16];
    let mut skipped = 0;
    for (p, g) in preds.iter().zip(gts) {
        if p.len() != joints || g.keypoints.len() != joints {
            return Err(Error::shape("pckh", format!("expected {joints} joints, got {} / {}", p.len(), g.keypoints.len())));
        }
        let head = match g.head_size {
            Some(h) if h > 0.0 && h.is_finite() => h,
            _ => {
                skipped += 1;
                continue;
            }
        };
        let limit = fraction * head;
        for (j, (pk, gk)) in p.joints().iter().zip(g.keypoints.joints()).enumerate() {
            if !gk.is_labeled() {
                continue;
            }
            visible[j] += 1;
            if ((pk.x - gk.x).powi(2) + (pk.y - gk.y).powi(2)).sqrt() <= limit {
                correct[j] += 1;
            }
        }
    }
    let rate = |j: usize| (visible[j] > 0).then(|| correct[j] as f64 / visible[j] as f64);
    let joint_values = PCKH_GROUPS
        .iter()
        .map(|(name, idx)| {
            let rates: Vec<f64> = idx.iter().filter_map(|&j| rate(j)).collect();
            JointValue {
                name: name.to_string(),
                value: (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64),
                visible: idx.iter().map(|&j| visible[j]).sum(),
            }
        })
        .collect();
    let used = (0..joints).filter(|j| !PCKH_EXCLUDED.contains(j));
    let (c, v) = used.fold((0, 0), |(c, v), j| (c + correct[j], v + visible[j]));
    let evaluated = gts.len() - skipped;
    Ok(EvalReport {
        metric: Metric::Pckh,
        value: if v > 0 { c as f64 / v as f64 } else { 0.0 },
        thresholds: vec![ThresholdValue {
            threshold: fraction,
            value: if v > 0 { c as f64 / v as f64 } else { 0.0 },
        }],
        joints: joint_values,
        matched: c,
        unmatched_predictions: 0,
        unmatched_ground_truths: v - c,
        evaluated,
        skipped,
        empty: v == 0,
    })
}

/// Fraction of labeled ground-truth joints predicted within `threshold` pixels.
pub fn pck(preds: &[KeypointSet], gts: &[KeypointSet], threshold: f64) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::shape("pck", format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for (p, g) in preds.iter().zip(gts) {
        if p.len() != g.len() {
            return Err(Error::shape("pck", format!("{} vs {} joints", p.len(), g.len())));
        }
        for (pk, gk) in p.joints().iter().zip(g.joints()) {
            if gk.is_labeled() {
                total += 1;
                if ((pk.x - gk.x).powi(2) + (pk.y - gk.y).powi(2)).sqrt() <= threshold {
                    hit += 1;
                }
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Keypoint;

    fn kps(points: &[(f64, f64, u8)]) -> KeypointSet {
        KeypointSet::new(points.iter().map(|&(x, y, v)| Keypoint::new(x, y, v)).collect()).unwrap()
    }

    #[test]
    fn oks_closed_forms() {
        let p = OksParams::coco();
        let g = kps(&(0..17).map(|j| (j as f64 * 3.0, 7.0, 2)).collect::<Vec<_>>());
        assert_eq!(oks(&g, &g, &p, 50.0).unwrap(), 1.0);
        let mut pts: Vec<(f64, f64, u8)> = (0..17).map(|_| (0.0, 0.0, 0)).collect();
        pts[5] = (10.0, 10.0, 2);
        let single = kps(&pts);
        let s = 40.0;
        let d = s * p.k()[5] * 2f64.sqrt();
        let mut moved = pts.clone();
        moved[5].0 += d;
        moved[3] = (999.0, 999.0, 0);
        let v = oks(&kps(&moved), &single, &p, s).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-12);
        let none = kps(&vec![(0.0, 0.0, 0); 17]);
        assert!(matches!(oks(&g, &none, &p, 1.0), Err(Error::UndefinedOks(_))));
    }

    #[test]
    fn threshold_grid() {
        let t = coco_oks_thresholds();
        assert_eq!(t.len(), 10);
        assert_eq!(t[0], 0.5);
        assert_eq!(t[9], 0.95);
        assert!((t[5] - 0.75).abs() < 1e-12);
        let r = recall_thresholds();
        assert_eq!((r[0], r[100], r.len()), (0.0, 1.0, 101));
    }

    #[test]
    fn perfect_and_empty() {
        let g = kps(&(0..17).map(|j| (j as f64 * 3.0, 7.0, 2)).collect::<Vec<_>>());
        let gts = vec![GroundTruth { image_id: 1, keypoints: g.clone(), area: 900.0 }];
        let preds = vec![Prediction { image_id: 1, score: 0.3, keypoints: g }];
        let cfg = ApConfig::new(OksParams::coco());
        let r = average_precision(&preds, &gts, &cfg).unwrap();
        assert_eq!((r.value, r.threshold(0.5), r.threshold(0.75)), (1.0, Some(1.0), Some(1.0)));
        let r = average_precision(&[], &gts, &cfg).unwrap();
        assert_eq!(r.value, 0.0);
        let r = average_precision(&[], &[], &cfg).unwrap();
        assert!(r.empty);
    }

    #[test]
    fn pckh_boundary_is_closed() {
        let g = kps(&(0..16).map(|j| (j as f64 * 10.0, 0.0, 1)).collect::<Vec<_>>());
        let p = g.map(|x, y| (x + 3.0, y + 4.0));
        let gts = vec![PckhGroundTruth { keypoints: g, head_size: Some(10.0) }];
        let r = pckh(std::slice::from_ref(&p), &gts, 0.5).unwrap();
        assert_eq!(r.value, 1.0);
        let missing = vec![PckhGroundTruth { keypoints: gts[0].keypoints.clone(), head_size: None }];
        let r = pckh(&[p], &missing, 0.5).unwrap();
        assert_eq!((r.skipped, r.evaluated, r.empty), (1, 0, true));
    }
}
