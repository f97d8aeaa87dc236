//! Seeded inputs shared by the benchmarks.

use gatedunipose::codec::KeypointSet;
use gatedunipose::rng::indexed_rng;
use gatedunipose::{GatedUniPoseModel, Mode, ModelConfig, Result, Scalar, Tensor};

/// Uniform `[0, 1)` tensor, reproducible from `seed`.
pub fn input<S: Scalar>(shape: &[usize], seed: u64) -> Result<Tensor<S>> {
    Tensor::uniform(shape, 0.0, 1.0, &mut indexed_rng(seed, 0))
}

/// Toy model in eval mode.
pub fn toy_model<S: Scalar>() -> Result<GatedUniPoseModel<S>> {
    let mut m = GatedUniPoseModel::build(&ModelConfig::toy())?;
    m.set_mode(Mode::Eval);
    Ok(m)
}

/// `joints` keypoints spread over a `[h, w]` frame, all visible.
pub fn spread_keypoints(joints: usize, [h, w]: [usize; 2]) -> Result<KeypointSet> {
    let triplets: Vec<f64> = (0..joints)
        .flat_map(|j| {
            let t = (j as f64 + 0.5) / joints as f64;
            [w as f64 * (0.15 + 0.7 * t), h as f64 * (0.2 + 0.6 * (1.0 - t)), 2.0]
        })
        .collect();
    KeypointSet::from_triplets(&triplets)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_reproducible() {
        let a = input::<f32>(&[1, 3, 4, 4], 7).unwrap();
        assert_eq!(a, input::<f32>(&[1, 3, 4, 4], 7).unwrap());
        let k = spread_keypoints(17, [256, 192]).unwrap();
        assert_eq!(k.labeled_count(), 17);
        assert!(toy_model::<f32>().unwrap().mode() == Mode::Eval);
    }
}
