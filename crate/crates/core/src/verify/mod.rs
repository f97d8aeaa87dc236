//! Property suites behind the `verify` command and the acceptance run.
//!
//! Every check yields a [`CheckResult`] holding the worst observed value and
//! the tolerance it was held to, so reports can print both.

pub mod cases;
pub mod gradcheck;

use std::f64::consts::SQRT_2;
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::blocks::{DilatedReparamBlock, DySampleUpsampler, GatedConvLayer};
use crate::codec::{HeatmapCodec, Keypoint, KeypointSet};
use crate::data::{pair_predictions, parse_annotations, parse_predictions};
use crate::error::Result;
use crate::eval::{average_precision, oks, pckh, ApConfig, EvalReport, GroundTruth, OksParams, Prediction};
use crate::model::{GatedUniPoseModel, ModelConfig};
use crate::ops::{grid_sample_bilinear, upsample_grid, ConvSpec};
use crate::rng::{fnv1a, indexed_rng};
use crate::scalar::{Precision, Scalar};
use crate::tensor::Tensor;

use gradcheck::{jitter_parameters, FdSettings};

pub const AP_FIXTURE_ANNOTATIONS: &str = include_str!("../../tests/fixtures/ap_scene_annotations.json");
pub const AP_FIXTURE_PREDICTIONS: &str = include_str!("../../tests/fixtures/ap_scene_predictions.json");
pub const AP_FIXTURE_GOLDEN: &str = include_str!("../../tests/fixtures/ap_scene_golden.json");
pub const PCKH_FIXTURE_ANNOTATIONS: &str = include_str!("../../tests/fixtures/pckh_annotations.json");
pub const PCKH_FIXTURE_PREDICTIONS: &str = include_str!("../../tests/fixtures/pckh_predictions.json");
pub const PCKH_FIXTURE_GOLDEN: &str = include_str!("../../tests/fixtures/pckh_golden.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Gradient,
    Reparam,
    GatedConv,
    DySample,
    Codec,
    Metric,
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Gradient => "gradient",
            Self::Reparam => "reparam",
            Self::GatedConv => "gconv",
            Self::DySample => "dysample",
            Self::Codec => "codec",
            Self::Metric => "metric",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub suite: Suite,
    pub name: String,
    /// Worst observed value (an error, a difference or a violation count).
    pub value: f64,
    pub tolerance: f64,
    pub cases: usize,
    pub passed: bool,
}

impl CheckResult {
    fn new(suite: Suite, name: impl Into<String>, value: f64, tolerance: f64, cases: usize) -> Self {
        Self {
            suite,
            name: name.into(),
            value,
            tolerance,
            cases,
            passed: value <= tolerance,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub model: ModelConfig,
    pub seed: u64,
    pub gradient_cases: usize,
    pub equivalence_trials: usize,
    pub codec_positions: usize,
    pub ap_scenes: usize,
}

impl VerifyOptions {
    pub fn new(model: ModelConfig, seed: u64) -> Self {
        Self {
            model,
            seed,
            gradient_cases: 20,
            equivalence_trials: 10,
            codec_positions: 600,
            ap_scenes: 50,
        }
    }
}

fn case_rng(seed: u64, name: &str, case: usize) -> ChaCha8Rng {
    indexed_rng(seed ^ fnv1a(name.as_bytes()), case as u64)
}

/// Relative-error budget for finite-difference checks at precision `S`.
pub fn gradient_tolerance<S: Scalar>() -> f64 {
    match S::PRECISION {
        Precision::F64 => 1e-3,
        Precision::F32 => 5e-2,
    }
}

/// Max-abs budget for pre/post deploy agreement at precision `S`.
pub fn deploy_tolerance<S: Scalar>() -> f64 {
    match S::PRECISION {
        Precision::F64 => 1e-8,
        Precision::F32 => 1e-4,
    }
}

/// Finite differences for every registered operation and block.
pub fn gradient_suite<S: Scalar>(opts: &VerifyOptions, mut on_result: impl FnMut(&CheckResult)) -> Result<Vec<CheckResult>> {
    let fd = FdSettings::for_precision::<S>();
    let tol = gradient_tolerance::<S>();
    let mut out = Vec::new();
    for (name, case) in cases::registry::<S>() {
        let mut worst: f64 = 0.0;
        for i in 0..opts.gradient_cases {
            let r = case(&mut case_rng(opts.seed, name, i), fd)?;
            worst = worst.max(r.relative_error);
        }
        let r = CheckResult::new(Suite::Gradient, name, worst, tol, opts.gradient_cases);
        on_result(&r);
        out.push(r);
    }
    Ok(out)
}

fn max_abs_diff<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.to_f64() - y.to_f64()).abs())
        .fold(0.0, f64::max)
}

fn infer<S: Scalar>(f: impl FnOnce(&mut Tape<S>) -> Result<Var<S>>) -> Result<Tensor<S>> {
    let mut tape = Tape::inference();
    Ok(f(&mut tape)?.into_tensor())
}

/// Worst pre/post deploy difference of a randomized reparam block.
pub fn reparam_block_gap<S: Scalar>(kernel: usize, rng: &mut ChaCha8Rng, inputs: usize) -> Result<f64> {
    let channels = rng.gen_range(1..=6);
    let mut block = DilatedReparamBlock::<S>::new("r", channels, kernel, rng.gen())?;
    jitter_parameters(&mut block, 0.3, rng);
    let mut deployed = block.clone();
    deployed.merge_reparam()?;
    let mut worst: f64 = 0.0;
    for _ in 0..inputs {
        let shape = [rng.gen_range(1..=2), channels, rng.gen_range(4..=16), rng.gen_range(4..=16)];
        let x = Var::constant(Tensor::<S>::uniform(&shape, -1.0, 1.0, rng)?);
        let a = infer(|t| block.forward(t, &x))?;
        let b = infer(|t| deployed.forward(t, &x))?;
        worst = worst.max(max_abs_diff(&a, &b));
    }
    Ok(worst)
}

/// Worst pre/post deploy difference of a full model with jittered weights
/// and normalization statistics.
pub fn model_deploy_gap<S: Scalar>(config: &ModelConfig, rng: &mut ChaCha8Rng, inputs: usize) -> Result<f64> {
    let mut model = GatedUniPoseModel::<S>::build(config)?;
    jitter_parameters(&mut model, 0.02, rng);
    let mut deployed = model.clone();
    deployed.switch_to_deploy()?;
    let [h, w] = config.input_size;
    let mut worst: f64 = 0.0;
    for _ in 0..inputs {
        let x = Var::constant(Tensor::<S>::uniform(&[1, 3, h, w], 0.0, 1.0, rng)?);
        let a = infer(|t| model.forward(t, &x))?;
        let b = infer(|t| deployed.forward(t, &x))?;
        worst = worst.max(max_abs_diff(&a, &b));
    }
    Ok(worst)
}

pub fn reparam_suite<S: Scalar>(opts: &VerifyOptions, mut on_result: impl FnMut(&CheckResult)) -> Result<Vec<CheckResult>> {
    let tol = deploy_tolerance::<S>();
    let trials = opts.equivalence_trials;
    let mut out = Vec::new();
    for k in [7, 9, 13] {
        let name = format!("reparam_k{k}");
        let mut worst: f64 = 0.0;
        for i in 0..trials {
            worst = worst.max(reparam_block_gap::<S>(k, &mut case_rng(opts.seed, &name, i), 1)?);
        }
        let r = CheckResult::new(Suite::Reparam, name, worst, tol, trials);
        on_result(&r);
        out.push(r);
    }
    let gap = model_deploy_gap::<S>(&opts.model, &mut case_rng(opts.seed, "reparam_model", 0), trials)?;
    let r = CheckResult::new(Suite::Reparam, "reparam_model", gap, tol, trials);
    on_result(&r);
    out.push(r);
    Ok(out)
}

/// Saturation and magnitude-bound checks for the gated convolution.
pub fn gconv_suite<S: Scalar>(opts: &VerifyOptions, mut on_result: impl FnMut(&CheckResult)) -> Result<Vec<CheckResult>> {
    let trials = opts.gradient_cases;
    let (mut open, mut closed, mut bound) = (0.0f64, 0.0f64, f64::NEG_INFINITY);
    for i in 0..trials {
        let mut rng = case_rng(opts.seed, "gconv", i);
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let spec = ConvSpec::new(rng.gen_range(1..=4), rng.gen_range(1..=4), k).padding(k / 2);
        let mut layer = GatedConvLayer::<S>::new("g", spec, rng.gen())?;
        let shape = [rng.gen_range(1..=2), spec.in_channels, rng.gen_range(3..=8), rng.gen_range(3..=8)];
        let x = Var::constant(Tensor::<S>::uniform(&shape, -2.0, 2.0, &mut rng)?);
        let value = infer(|t| layer.value.forward(t, &x))?;
        let gated = infer(|t| layer.forward(t, &x))?;
        for (g, v) in gated.data().iter().zip(value.data()) {
            bound = bound.max(g.to_f64().abs() - v.to_f64().abs());
        }
        for (bias, slot) in [(1000.0, &mut open), (-1000.0, &mut closed)] {
            let b = layer.gate.bias.as_mut().expect("gate has a bias");
            b.set_values(&vec![S::from_f64(bias); spec.out_channels])?;
            let y = infer(|t| layer.forward(t, &x))?;
            let gap = if bias > 0.0 {
                max_abs_diff(&y, &value)
            } else {
                y.data().iter().map(|v| v.to_f64().abs()).fold(0.0, f64::max)
            };
            *slot = slot.max(gap);
        }
    }
    let out = vec![
        CheckResult::new(Suite::GatedConv, "gconv_open_gate", open, 1e-6, trials),
        CheckResult::new(Suite::GatedConv, "gconv_closed_gate", closed, 1e-6, trials),
        CheckResult::new(Suite::GatedConv, "gconv_bound", bound.max(0.0), 0.0, trials),
    ];
    out.iter().for_each(&mut on_result);
    Ok(out)
}

/// Zero offsets must reproduce fixed bilinear upsampling.
pub fn dysample_suite<S: Scalar>(opts: &VerifyOptions, mut on_result: impl FnMut(&CheckResult)) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for s in [2, 4] {
        let name = format!("dysample_zero_offsets_s{s}");
        let mut worst: f64 = 0.0;
        for i in 0..opts.gradient_cases {
            let mut rng = case_rng(opts.seed, &name, i);
            let (n, c, h, w) = (rng.gen_range(1..=2), rng.gen_range(1..=4), rng.gen_range(1..=9), rng.gen_range(1..=9));
            let x = Tensor::<S>::uniform(&[n, c, h, w], -1.0, 1.0, &mut rng)?;
            let up = DySampleUpsampler::<S>::new("up", c, s)?;
            let xv = Var::constant(x.clone());
            let y = infer(|t| up.forward(t, &xv))?;
            let reference = grid_sample_bilinear(&x, &upsample_grid(n, h, w, s)?)?;
            worst = worst.max(max_abs_diff(&y, &reference));
        }
        let r = CheckResult::new(Suite::DySample, name, worst, 1e-6, opts.gradient_cases);
        on_result(&r);
        out.push(r);
    }
    Ok(out)
}

/// Sub-pixel sweep positions over a `[height, width]` image, `margin` px
/// inside the border. Deterministic low-discrepancy sequence.
pub fn sweep_positions(count: usize, size: [usize; 2], margin: f64) -> Vec<(f64, f64)> {
    let golden = (5f64.sqrt() - 1.0) / 2.0;
    let [h, w] = size;
    (0..count)
        .map(|i| {
            let fx = (i as f64 * golden).fract();
            let fy = (i as f64 * SQRT_2).fract();
            (margin + fx * (w as f64 - 2.0 * margin), margin + fy * (h as f64 - 2.0 * margin))
        })
        .collect()
}

/// Worst encode/decode error in input pixels over a position sweep.
pub fn codec_round_trip_error<S: Scalar>(codec: &HeatmapCodec, positions: &[(f64, f64)], input: [usize; 2]) -> Result<f64> {
    let size = [input[0] / codec.stride, input[1] / codec.stride];
    let mut worst: f64 = 0.0;
    for &(x, y) in positions {
        let kps = KeypointSet::new(vec![Keypoint::new(x, y, 2)])?;
        let hm = codec.encode::<S>(&kps, size)?;
        let d = &codec.decode(&hm)?[0];
        worst = worst.max(((d.x - x).powi(2) + (d.y - y).powi(2)).sqrt());
    }
    Ok(worst)
}

pub fn codec_suite<S: Scalar>(opts: &VerifyOptions, mut on_result: impl FnMut(&CheckResult)) -> Result<Vec<CheckResult>> {
    let codec = HeatmapCodec::default();
    let input = [256, 192];
    let positions = sweep_positions(opts.codec_positions, input, 3.0 * codec.sigma * codec.stride as f64);
    let worst = codec_round_trip_error::<S>(&codec, &positions, input)?;
    let r = CheckResult::new(Suite::Codec, "codec_round_trip_px", worst, 0.5, positions.len());
    on_result(&r);
    Ok(vec![r])
}

/// Largest difference between two reports: `INFINITY` when any count, name
/// or threshold disagrees, else the largest metric-value gap.
pub fn report_gap(a: &EvalReport, b: &EvalReport) -> f64 {
    let counts = |r: &EvalReport| {
        (r.metric, r.matched, r.unmatched_predictions, r.unmatched_ground_truths, r.evaluated, r.skipped, r.empty)
    };
    if counts(a) != counts(b) || a.thresholds.len() != b.thresholds.len() || a.joints.len() != b.joints.len() {
        return f64::INFINITY;
    }
    let mut gap = (a.value - b.value).abs();
    for (x, y) in a.thresholds.iter().zip(&b.thresholds) {
        if x.threshold != y.threshold {
            return f64::INFINITY;
        }
        gap = gap.max((x.value - y.value).abs());
    }
    for (x, y) in a.joints.iter().zip(&b.joints) {
        if x.name != y.name || x.visible != y.visible || x.value.is_some() != y.value.is_some() {
            return f64::INFINITY;
        }
        if let (Some(p), Some(q)) = (x.value, y.value) {
            gap = gap.max((p - q).abs());
        }
    }
    if a.to_table() != b.to_table() {
        return f64::INFINITY;
    }
    gap
}

fn golden(text: &str) -> Result<EvalReport> {
    serde_json::from_str(text).map_err(|e| crate::error::Error::parse("golden report", e.to_string()))
}

pub fn ap_fixture_report() -> Result<EvalReport> {
    let gts: Vec<GroundTruth> = parse_annotations(AP_FIXTURE_ANNOTATIONS, 17)?
        .iter()
        .map(|r| r.to_ground_truth())
        .collect();
    let preds = parse_predictions(AP_FIXTURE_PREDICTIONS, 17)?;
    average_precision(&preds, &gts, &ApConfig::new(OksParams::coco()))
}

pub fn pckh_fixture_report() -> Result<EvalReport> {
    let records = parse_annotations(PCKH_FIXTURE_ANNOTATIONS, 16)?;
    let preds = parse_predictions(PCKH_FIXTURE_PREDICTIONS, 16)?;
    let paired = pair_predictions(&preds, &records)?;
    let gts: Vec<_> = records.iter().map(|r| r.to_pckh()).collect();
    pckh(&paired, &gts, 0.5)
}

/// A random scene: ground truths scattered over a few images and
/// predictions that are noisy copies, spurious detections or misses.
pub fn random_scene(rng: &mut ChaCha8Rng, joints: usize) -> Result<(Vec<Prediction>, Vec<GroundTruth>)> {
    let mut gts = Vec::new();
    let mut preds = Vec::new();
    let images = rng.gen_range(1..=3);
    for image_id in 0..images {
        for _ in 0..rng.gen_range(0..=4) {
            let (cx, cy) = (rng.gen_range(50.0..450.0), rng.gen_range(50.0..450.0));
            let side: f64 = rng.gen_range(20.0..120.0);
            let kps: Vec<Keypoint> = (0..joints)
                .map(|_| {
                    let v = if rng.gen_bool(0.85) { 2 } else { 0 };
                    Keypoint::new(cx + rng.gen_range(-0.5..0.5) * side, cy + rng.gen_range(-0.5..0.5) * side, v)
                })
                .collect();
            let gt = GroundTruth {
                image_id,
                keypoints: KeypointSet::new(kps)?,
                area: side * side,
            };
            if rng.gen_bool(0.8) {
                let noise = rng.gen_range(0.0..0.15) * side;
                preds.push(Prediction {
                    image_id,
                    score: rng.gen_range(0.0..1.0),
                    keypoints: gt
                        .keypoints
                        .map(|x, y| (x + rng.gen_range(-1.0..1.0) * noise, y + rng.gen_range(-1.0..1.0) * noise)),
                });
            }
            gts.push(gt);
        }
        for _ in 0..rng.gen_range(0..=2) {
            let kps: Vec<Keypoint> = (0..joints)
                .map(|_| Keypoint::new(rng.gen_range(0.0..500.0), rng.gen_range(0.0..500.0), 1))
                .collect();
            preds.push(Prediction {
                image_id,
                score: rng.gen_range(0.0..1.0),
                keypoints: KeypointSet::new(kps)?,
            });
        }
    }
    Ok((preds, gts))
}

pub fn metric_suite(opts: &VerifyOptions, mut on_result: impl FnMut(&CheckResult)) -> Result<Vec<CheckResult>> {
    let params = OksParams::coco();
    let trials = opts.gradient_cases;
    let (mut identity, mut e_inv) = (0.0f64, 0.0f64);
    for i in 0..trials {
        let mut rng = case_rng(opts.seed, "oks", i);
        let scale = rng.gen_range(5.0..200.0);
        let gt = KeypointSet::new(
            (0..17)
                .map(|_| Keypoint::new(rng.gen_range(0.0..640.0), rng.gen_range(0.0..480.0), 2))
                .collect(),
        )?;
        identity = identity.max((oks(&gt, &gt, &params, scale)? - 1.0).abs());
        let k = params.k().to_vec();
        let mut j = 0;
        let moved = gt.map(|x, y| {
            let d = scale * k[j] * SQRT_2;
            let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            j += 1;
            (x + d * a.cos(), y + d * a.sin())
        });
        e_inv = e_inv.max((oks(&moved, &gt, &params, scale)? - (-1f64).exp()).abs());
    }
    let ap_gap = report_gap(&ap_fixture_report()?, &golden(AP_FIXTURE_GOLDEN)?);
    let pckh_gap = report_gap(&pckh_fixture_report()?, &golden(PCKH_FIXTURE_GOLDEN)?);

    let mut violations = 0usize;
    let mut perfect_gap: f64 = 0.0;
    let cfg = ApConfig::new(params.clone());
    for i in 0..opts.ap_scenes {
        let mut rng = case_rng(opts.seed, "ap_scene", i);
        let (preds, gts) = random_scene(&mut rng, 17)?;
        let report = average_precision(&preds, &gts, &cfg)?;
        violations += report
            .thresholds
            .windows(2)
            .filter(|w| w[1].value > w[0].value)
            .count();
        let labeled: Vec<&GroundTruth> = gts.iter().filter(|g| g.keypoints.labeled_count() > 0).collect();
        if !labeled.is_empty() {
            let as_preds: Vec<Prediction> = labeled
                .iter()
                .map(|g| Prediction {
                    image_id: g.image_id,
                    score: 1.0,
                    keypoints: g.keypoints.clone(),
                })
                .collect();
            perfect_gap = perfect_gap.max((average_precision(&as_preds, &gts, &cfg)?.value - 1.0).abs());
        }
    }
    let out = vec![
        CheckResult::new(Suite::Metric, "oks_identity", identity, 1e-12, trials),
        CheckResult::new(Suite::Metric, "oks_e_inverse", e_inv, 1e-6, trials),
        CheckResult::new(Suite::Metric, "ap_fixture_golden", ap_gap, 1e-12, 1),
        CheckResult::new(Suite::Metric, "pckh_fixture_golden", pckh_gap, 1e-12, 1),
        CheckResult::new(Suite::Metric, "ap_monotone_thresholds", violations as f64, 0.0, opts.ap_scenes),
        CheckResult::new(Suite::Metric, "ap_ground_truth_as_prediction", perfect_gap, 1e-12, opts.ap_scenes),
    ];
    out.iter().for_each(&mut on_result);
    Ok(out)
}

/// Every suite in order. `on_result` sees each check as it completes.
pub fn run_all<S: Scalar>(opts: &VerifyOptions, mut on_result: impl FnMut(&CheckResult)) -> Result<Vec<CheckResult>> {
    let mut out = gradient_suite::<S>(opts, &mut on_result)?;
    out.extend(reparam_suite::<S>(opts, &mut on_result)?);
    out.extend(gconv_suite::<S>(opts, &mut on_result)?);
    out.extend(dysample_suite::<S>(opts, &mut on_result)?);
    out.extend(codec_suite::<S>(opts, &mut on_result)?);
    out.extend(metric_suite(opts, &mut on_result)?);
    Ok(out)
}
