//! Metric oracles: closed-form OKS and the committed hand-enumerated scenes.

use std::path::PathBuf;

use gatedunipose::data::{load_annotations, pair_predictions, read_predictions};
use gatedunipose::eval::{average_precision, oks, pckh, ApConfig, EvalReport, OksParams};
use gatedunipose::verify::{ap_fixture_report, pckh_fixture_report, report_gap};
use gatedunipose::{Keypoint, KeypointSet};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn golden(name: &str) -> EvalReport {
    serde_json::from_str(&std::fs::read_to_string(fixture(name)).unwrap()).unwrap()
}

#[test]
fn oks_closed_forms() {
    let params = OksParams::coco();
    let gt = KeypointSet::new((0..17).map(|j| Keypoint::new(10.0 * j as f64, 5.0, 2)).collect()).unwrap();
    assert_eq!(oks(&gt, &gt, &params, 40.0).unwrap(), 1.0);
    let s = 40.0;
    let k = params.k().to_vec();
    let mut j = 0;
    let shifted = gt.map(|x, y| {
        let d = s * k[j] * 2f64.sqrt();
        j += 1;
        (x + d * 0.6, y - d * 0.8)
    });
    assert!((oks(&shifted, &gt, &params, s).unwrap() - (-1f64).exp()).abs() <= 1e-6);
}

#[test]
fn ap_scene_matches_hand_enumeration() {
    let gts: Vec<_> = load_annotations(&fixture("ap_scene_annotations.json"), 17)
        .unwrap()
        .iter()
        .map(|r| r.to_ground_truth())
        .collect();
    let preds = read_predictions(&fixture("ap_scene_predictions.json"), 17).unwrap();
    let report = average_precision(&preds, &gts, &ApConfig::new(OksParams::coco())).unwrap();
    // thresholds up to 0.60 accept the 0.62-OKS match; recall 2/3 covers 67 of 101 points
    for t in &report.thresholds {
        let expect = if t.threshold < 0.62 { 67.0 / 101.0 } else { 34.0 / 101.0 };
        assert!((t.value - expect).abs() < 1e-15, "{t:?}");
    }
    assert!((report.value - 439.0 / 1010.0).abs() < 1e-12);
    assert_eq!((report.matched, report.unmatched_predictions, report.unmatched_ground_truths), (2, 1, 1));
    assert!(report_gap(&report, &golden("ap_scene_golden.json")) <= 1e-12);
    assert_eq!(report.to_table(), golden("ap_scene_golden.json").to_table());
    assert_eq!(report, ap_fixture_report().unwrap());
}

#[test]
fn pckh_scene_matches_hand_enumeration() {
    let records = load_annotations(&fixture("pckh_annotations.json"), 16).unwrap();
    let preds = read_predictions(&fixture("pckh_predictions.json"), 16).unwrap();
    let paired = pair_predictions(&preds, &records).unwrap();
    let gts: Vec<_> = records.iter().map(|r| r.to_pckh()).collect();
    let report = pckh(&paired, &gts, 0.5).unwrap();
    let expect = [1.0, 1.0, 1.0, 0.75, 1.0, 0.875, 0.75];
    for (j, e) in report.joints.iter().zip(expect) {
        assert_eq!(j.value, Some(e), "{}", j.name);
    }
    assert_eq!(report.value, 50.0 / 55.0);
    let table = report.to_table();
    assert!(table.starts_with("   Hea.   Sho.   Elb.   Wri.   Hip.   Kne.   Ank.   Mean"), "{table}");
    assert!(table.contains("  100.0  100.0  100.0   75.0  100.0   87.5   75.0   90.9"), "{table}");
    assert!(report_gap(&report, &golden("pckh_golden.json")) <= 1e-12);
    assert_eq!(report, pckh_fixture_report().unwrap());
}

#[test]
fn ground_truth_as_prediction_is_perfect() {
    let records = load_annotations(&fixture("ap_scene_annotations.json"), 17).unwrap();
    let gts: Vec<_> = records.iter().map(|r| r.to_ground_truth()).collect();
    let preds: Vec<_> = gts
        .iter()
        .map(|g| gatedunipose::eval::Prediction { image_id: g.image_id, score: 1.0, keypoints: g.keypoints.clone() })
        .collect();
    let report = average_precision(&preds, &gts, &ApConfig::new(OksParams::coco())).unwrap();
    assert_eq!(report.value, 1.0);
}

#[test]
fn no_predictions_score_zero() {
    let gts: Vec<_> = load_annotations(&fixture("ap_scene_annotations.json"), 17)
        .unwrap()
        .iter()
        .map(|r| r.to_ground_truth())
        .collect();
    let report = average_precision(&[], &gts, &ApConfig::new(OksParams::coco())).unwrap();
    assert_eq!(report.value, 0.0);
    assert_eq!(report.unmatched_ground_truths, 3);
}
