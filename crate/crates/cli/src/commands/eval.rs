use gatedunipose::data::annotations::prediction_joint_count;
use gatedunipose::data::{pair_predictions, parse_annotations_lenient, parse_predictions};
use gatedunipose::eval::{average_precision, pckh, ApConfig, EvalReport, OksParams};
use gatedunipose::Error;
use serde::Serialize;
use serde_json::{json, Value};

use super::read_text;
use crate::args::{EvalArgs, GlobalArgs, MetricArg};
use crate::error::{CliError, CliResult};
use crate::log::Record;
use crate::manifest::{sha256_hex, RunManifest};

#[derive(Serialize)]
struct EvalSettings<'a> {
    metric: &'a str,
    predictions: String,
    predictions_sha256: String,
    annotations: String,
    annotations_sha256: String,
    pckh_fraction: f64,
}

pub fn run(args: &EvalArgs, g: &GlobalArgs, manifest: &mut RunManifest) -> CliResult<()> {
    let pred_text = read_text(&args.pred)?;
    let ann_text = read_text(&args.ann)?;
    let metric = match args.metric {
        MetricArg::Ap => "ap",
        MetricArg::Pckh => "pckh",
    };
    let settings = EvalSettings {
        metric,
        predictions: args.pred.display().to_string(),
        predictions_sha256: sha256_hex(pred_text.as_bytes()),
        annotations: args.ann.display().to_string(),
        annotations_sha256: sha256_hex(ann_text.as_bytes()),
        pckh_fraction: args.pckh_fraction,
    };
    manifest.set_config(toml::to_string(&settings).expect("settings serialize"));

    let joints = annotation_joint_count(&ann_text)?;
    if let Some(pj) = prediction_joint_count(&pred_text)? {
        if pj != joints {
            return Err(CliError::Usage(format!(
                "joint count mismatch: predictions have {pj} joints, annotations have {joints}"
            )));
        }
    }
    let loaded = parse_annotations_lenient(&ann_text, joints)?;
    for r in &loaded.rejected {
        Record::new("warning").kv("annotation", &r.record).kv("reason", &r.reason).emit();
    }
    let preds = parse_predictions(&pred_text, joints)?;
    if preds.is_empty() {
        Record::new("warning").kv("message", "prediction file is empty").emit();
    }

    let report = match args.metric {
        MetricArg::Ap => {
            let gts: Vec<_> = loaded.records.iter().map(|r| r.to_ground_truth()).collect();
            average_precision(&preds, &gts, &ApConfig::new(OksParams::for_joints(joints)?))?
        }
        MetricArg::Pckh => {
            let gts: Vec<_> = loaded.records.iter().map(|r| r.to_pckh()).collect();
            pckh(&pair_predictions(&preds, &loaded.records)?, &gts, args.pckh_fraction)?
        }
    };
    print!("{}", report.to_table());
    std::fs::create_dir_all(&g.out_dir)?;
    let path = g.out_dir.join(format!("eval-{metric}.json"));
    std::fs::write(&path, report.to_json() + "\n")?;
    Record::new("report")
        .kv("metric", metric)
        .kv("value", format!("{:.6}", report.value))
        .kv("rejected_annotations", loaded.rejected.len())
        .kv("path", path.display())
        .emit();
    manifest.result = summary(&report, loaded.rejected.len());
    Ok(())
}

fn summary(report: &EvalReport, rejected: usize) -> Value {
    json!({
        "value": report.value,
        "matched": report.matched,
        "unmatched_predictions": report.unmatched_predictions,
        "unmatched_ground_truths": report.unmatched_ground_truths,
        "evaluated": report.evaluated,
        "skipped": report.skipped,
        "rejected_annotations": rejected,
        "empty": report.empty,
    })
}

/// Joints per record, read from the first annotation.
fn annotation_joint_count(text: &str) -> CliResult<usize> {
    let doc: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        context: "annotation file".into(),
        reason: e.to_string(),
    })?;
    doc.get("annotations")
        .and_then(Value::as_array)
        .and_then(|a| a.first())
        .and_then(|a| a.get("keypoints"))
        .and_then(Value::as_array)
        .map(|k| k.len() / 3)
        .filter(|&n| n > 0)
        .ok_or_else(|| {
            Error::Parse {
                context: "annotation file".into(),
                reason: "no annotation with a keypoints array".into(),
            }
            .into()
        })
}
