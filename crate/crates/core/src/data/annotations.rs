//! COCO-keypoint-style annotation subset and prediction files.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::codec::KeypointSet;
use crate::error::{Error, Result};
use crate::eval::{GroundTruth, PckhGroundTruth, Prediction};

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub id: u64,
    pub image_id: u64,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    pub keypoints: KeypointSet,
    pub area: f64,
    pub category_id: u64,
    /// Head segment length, for PCKh.
    pub head_size: Option<f64>,
}

impl AnnotationRecord {
    pub fn to_ground_truth(&self) -> GroundTruth {
        GroundTruth {
            image_id: self.image_id,
            keypoints: self.keypoints.clone(),
            area: self.area,
        }
    }

    pub fn to_pckh(&self) -> PckhGroundTruth {
        PckhGroundTruth {
            keypoints: self.keypoints.clone(),
            head_size: self.head_size,
        }
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct RawAnnotation {
    id: u64,
    image_id: u64,
    bbox: [f64; 4],
    keypoints: Vec<f64>,
    area: f64,
    #[serde(default = "person")]
    category_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_keypoints: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    head_size: Option<f64>,
}

fn person() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    /// Annotation id when readable, else `#index`.
    pub record: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedAnnotations {
    pub records: Vec<AnnotationRecord>,
    pub rejected: Vec<Rejection>,
    /// Number of entries in the file's `annotations` array.
    pub total: usize,
}

impl LoadedAnnotations {
    pub fn ground_truths(&self) -> Vec<GroundTruth> {
        self.records.iter().map(AnnotationRecord::to_ground_truth).collect()
    }
}

fn validate(raw: RawAnnotation, joints: usize) -> std::result::Result<AnnotationRecord, String> {
    if raw.keypoints.len() != 3 * joints {
        return Err(format!(
            "{} keypoint values, expected {} ({joints} joints)",
            raw.keypoints.len(),
            3 * joints
        ));
    }
    let [_, _, w, h] = raw.bbox;
    if !(w > 0.0 && h > 0.0) || raw.bbox.iter().any(|v| !v.is_finite()) {
        return Err(format!("bbox {:?} must be finite with positive size", raw.bbox));
    }
    if !(raw.area >= 0.0) || !raw.area.is_finite() {
        return Err(format!("area {} must be finite and non-negative", raw.area));
    }
    if let Some(h) = raw.head_size {
        if !(h > 0.0) || !h.is_finite() {
            return Err(format!("head_size {h} must be positive"));
        }
    }
    let keypoints = KeypointSet::from_triplets(&raw.keypoints).map_err(|e| e.to_string())?;
    if let Some(n) = raw.num_keypoints {
        if n != keypoints.labeled_count() {
            return Err(format!("num_keypoints {n} but {} joints are labeled", keypoints.labeled_count()));
        }
    }
    Ok(AnnotationRecord {
        id: raw.id,
        image_id: raw.image_id,
        bbox: raw.bbox,
        keypoints,
        area: raw.area,
        category_id: raw.category_id,
        head_size: raw.head_size,
    })
}

/// Parse every annotation, keeping the rejected ones with a reason.
pub fn parse_annotations_lenient(text: &str, joints: usize) -> Result<LoadedAnnotations> {
    let doc: Value = serde_json::from_str(text).map_err(|e| Error::parse("annotation file", e.to_string()))?;
    let list = doc
        .get("annotations")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::parse("annotation file", "missing `annotations` array"))?;
    let mut records = Vec::with_capacity(list.len());
    let mut rejected = Vec::new();
    for (i, v) in list.iter().enumerate() {
        let label = v
            .get("id")
            .and_then(Value::as_u64)
            .map_or_else(|| format!("#{i}"), |id| format!("id {id}"));
        match serde_json::from_value::<RawAnnotation>(v.clone())
            .map_err(|e| e.to_string())
            .and_then(|raw| validate(raw, joints))
        {
            Ok(r) => records.push(r),
            Err(reason) => rejected.push(Rejection { record: label, reason }),
        }
    }
    Ok(LoadedAnnotations {
        records,
        rejected,
        total: list.len(),
    })
}

/// Strict variant: the first malformed record is an error naming it.
pub fn parse_annotations(text: &str, joints: usize) -> Result<Vec<AnnotationRecord>> {
    let loaded = parse_annotations_lenient(text, joints)?;
    match loaded.rejected.into_iter().next() {
        Some(r) => Err(Error::parse(format!("annotation {}", r.record), r.reason)),
        None => Ok(loaded.records),
    }
}

pub fn load_annotations(path: &Path, joints: usize) -> Result<Vec<AnnotationRecord>> {
    parse_annotations(&std::fs::read_to_string(path)?, joints)
}

pub fn load_annotations_lenient(path: &Path, joints: usize) -> Result<LoadedAnnotations> {
    parse_annotations_lenient(&std::fs::read_to_string(path)?, joints)
}

/// Serialize records back into the annotation schema.
pub fn annotations_to_json(records: &[AnnotationRecord]) -> String {
    let mut image_ids: Vec<u64> = records.iter().map(|r| r.image_id).collect();
    image_ids.sort_unstable();
    image_ids.dedup();
    let anns: Vec<RawAnnotation> = records
        .iter()
        .map(|r| RawAnnotation {
            id: r.id,
            image_id: r.image_id,
            bbox: r.bbox,
            keypoints: r.keypoints.to_triplets(),
            area: r.area,
            category_id: r.category_id,
            num_keypoints: Some(r.keypoints.labeled_count()),
            head_size: r.head_size,
        })
        .collect();
    let doc = serde_json::json!({
        "images": image_ids.iter().map(|id| serde_json::json!({ "id": id })).collect::<Vec<_>>(),
        "annotations": anns,
        "categories": [{ "id": 1, "name": "person" }],
    });
    serde_json::to_string_pretty(&doc).expect("annotations serialize")
}

#[derive(Debug, Serialize, Deserialize)]
struct RawPrediction {
    image_id: u64,
    #[serde(default = "person")]
    category_id: u64,
    score: f64,
    keypoints: Vec<f64>,
}

pub fn predictions_to_json(preds: &[Prediction]) -> String {
    let raw: Vec<RawPrediction> = preds
        .iter()
        .map(|p| RawPrediction {
            image_id: p.image_id,
            category_id: 1,
            score: p.score,
            keypoints: p.keypoints.to_triplets(),
        })
        .collect();
    serde_json::to_string_pretty(&raw).expect("predictions serialize")
}

pub fn parse_predictions(text: &str, joints: usize) -> Result<Vec<Prediction>> {
    let raw: Vec<RawPrediction> =
        serde_json::from_str(text).map_err(|e| Error::parse("prediction file", e.to_string()))?;
    raw.into_iter()
        .enumerate()
        .map(|(i, r)| {
            if r.keypoints.len() != 3 * joints {
                return Err(Error::parse(
                    format!("prediction #{i} (image {})", r.image_id),
                    format!("{} keypoint values, expected {}", r.keypoints.len(), 3 * joints),
                ));
            }
            if !r.score.is_finite() {
                return Err(Error::parse(format!("prediction #{i}"), "score is not finite"));
            }
            Ok(Prediction {
                image_id: r.image_id,
                score: r.score,
                keypoints: KeypointSet::from_triplets(&r.keypoints)
                    .map_err(|e| Error::parse(format!("prediction #{i}"), e.to_string()))?,
            })
        })
        .collect()
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    std::fs::write(path, predictions_to_json(preds))?;
    Ok(())
}

pub fn read_predictions(path: &Path, joints: usize) -> Result<Vec<Prediction>> {
    parse_predictions(&std::fs::read_to_string(path)?, joints)
}

/// Joint count of the first prediction in a file, if any.
pub fn prediction_joint_count(text: &str) -> Result<Option<usize>> {
    let raw: Vec<RawPrediction> =
        serde_json::from_str(text).map_err(|e| Error::parse("prediction file", e.to_string()))?;
    Ok(raw.first().map(|r| r.keypoints.len() / 3))
}

/// One prediction per annotation record, matched by image id. The
/// highest-scoring prediction of an image wins; an image without any is an
/// error naming the record.
pub fn pair_predictions(preds: &[Prediction], records: &[AnnotationRecord]) -> Result<Vec<KeypointSet>> {
    records
        .iter()
        .map(|r| {
            preds
                .iter()
                .filter(|p| p.image_id == r.image_id)
                .max_by(|a, b| a.score.total_cmp(&b.score))
                .map(|p| p.keypoints.clone())
                .ok_or_else(|| {
                    Error::InvalidInput(format!("no prediction for image {} (annotation {})", r.image_id, r.id))
                })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(id: u64, values: usize) -> String {
        let kps: Vec<String> = (0..values).map(|i| if i % 3 == 2 { "2".into() } else { format!("{}", i) }).collect();
        format!(
            r#"{{"id": {id}, "image_id": 1, "bbox": [0, 0, 10, 20], "area": 200, "keypoints": [{}]}}"#,
            kps.join(",")
        )
    }

    #[test]
    fn strict_and_lenient() {
        let text = format!(r#"{{"images": [{{"id": 1}}], "annotations": [{}, {}]}}"#, ann(1, 51), ann(7, 50));
        let loaded = parse_annotations_lenient(&text, 17).unwrap();
        assert_eq!((loaded.records.len(), loaded.rejected.len(), loaded.total), (1, 1, 2));
        assert_eq!(loaded.rejected[0].record, "id 7");
        match parse_annotations(&text, 17) {
            Err(Error::Parse { context, .. }) => assert!(context.contains("id 7")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_box_rejected() {
        let text = r#"{"annotations": [{"id": 3, "image_id": 1, "bbox": [0, 0, 0, 5], "area": 1, "keypoints": [1, 2, 2]}]}"#;
        assert!(parse_annotations(text, 1).is_err());
        let missing = r#"{"annotations": [{"id": 4, "bbox": [0, 0, 3, 5], "area": 1, "keypoints": [1, 2, 2]}]}"#;
        let l = parse_annotations_lenient(missing, 1).unwrap();
        assert!(l.rejected[0].reason.contains("image_id"));
    }

    #[test]
    fn predictions_round_trip() {
        let text = format!(r#"{{"annotations": [{}]}}"#, ann(1, 51));
        let recs = parse_annotations(&text, 17).unwrap();
        let preds: Vec<Prediction> = recs
            .iter()
            .map(|r| Prediction { image_id: r.image_id, score: 0.5, keypoints: r.keypoints.clone() })
            .collect();
        let back = parse_predictions(&predictions_to_json(&preds), 17).unwrap();
        assert_eq!(back, preds);
        let again = parse_annotations(&annotations_to_json(&recs), 17).unwrap();
        assert_eq!(again, recs);
    }

    #[test]
    fn pairing_takes_best_score_and_reports_gaps() {
        let text = format!(r#"{{"annotations": [{}]}}"#, ann(1, 3));
        let recs = parse_annotations(&text, 1).unwrap();
        let kp = |x: f64| KeypointSet::from_triplets(&[x, 0.0, 1.0]).unwrap();
        let preds = vec![
            Prediction { image_id: 1, score: 0.2, keypoints: kp(1.0) },
            Prediction { image_id: 1, score: 0.9, keypoints: kp(2.0) },
        ];
        assert_eq!(pair_predictions(&preds, &recs).unwrap(), vec![kp(2.0)]);
        assert!(pair_predictions(&preds[..0], &recs).is_err());
    }
}
