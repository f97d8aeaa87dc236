//! Annotation and prediction files, top-down cropping, raw images and the
//! synthetic dataset.

pub mod annotations;
pub mod crop;
pub mod image;
pub mod synthetic;

pub use annotations::{
    annotations_to_json, load_annotations, load_annotations_lenient, pair_predictions, parse_annotations,
    parse_annotations_lenient, parse_predictions, predictions_to_json, read_predictions, write_predictions, AnnotationRecord, LoadedAnnotations, Rejection,
};
pub use crop::{crop_to_input, crop_transform, CropTransform, CROP_PADDING};
pub use image::{read_image, write_image};
pub use synthetic::{generate_synthetic, synthetic_range, synthetic_sample, SyntheticSample, SyntheticSpec};
