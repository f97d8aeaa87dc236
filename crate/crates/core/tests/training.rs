//! Toy-training behaviour on a deliberately small run.

use gatedunipose::data::SyntheticSpec;
use gatedunipose::model::StageConfig;
use gatedunipose::train::{ToyRunConfig, TrainConfig, TrainEvent, Trainer};
use gatedunipose::{Error, Module, ModelConfig};

fn small_run(lr: f64) -> ToyRunConfig {
    let mut model = ModelConfig::toy();
    model.input_size = [64, 64];
    model.heatmap_size = [16, 16];
    model.joints = 3;
    model.stem_channels = 8;
    model.decoder_channels = 16;
    model.stages = [8, 8, 16, 16]
        .iter()
        .map(|&channels| StageConfig { depth: 1, channels, kernel_sizes: vec![7] })
        .collect();
    ToyRunConfig {
        data: SyntheticSpec {
            joints: 3,
            image_size: [64, 64],
            blob_radius: 2.5,
            jitter: 6.0,
            samples: 24,
            seed: 4,
        },
        model,
        train: TrainConfig {
            steps: 9,
            batch_size: 8,
            lr,
            distill_weight: 0.0,
            teacher: None,
            sigma: 2.0,
            eval_samples: 8,
            pck_threshold: 2.0,
        },
    }
}

fn epoch_losses(events: &[TrainEvent]) -> Vec<f64> {
    events
        .iter()
        .filter_map(|e| match e {
            TrainEvent::Epoch { mean_loss, .. } => Some(*mean_loss),
            _ => None,
        })
        .collect()
}

#[test]
fn zero_learning_rate_keeps_loss_constant() {
    let mut trainer = Trainer::<f32>::new(small_run(0.0)).unwrap();
    let before: Vec<Vec<f32>> = trainer.model.parameters().iter().map(|p| p.tensor().data().to_vec()).collect();
    let mut events = Vec::new();
    trainer.run(9, |e| events.push(e.clone())).unwrap();
    let losses = epoch_losses(&events);
    assert_eq!(losses.len(), 3);
    assert!(losses.iter().all(|&l| l == losses[0]), "{losses:?}");
    let after: Vec<Vec<f32>> = trainer
        .model
        .parameters()
        .iter()
        .filter(|p| p.is_trainable())
        .map(|p| p.tensor().data().to_vec())
        .collect();
    let trainable_before: Vec<Vec<f32>> = trainer
        .model
        .parameters()
        .iter()
        .zip(before)
        .filter(|(p, _)| p.is_trainable())
        .map(|(_, b)| b)
        .collect();
    assert_eq!(after, trainable_before);
}

#[test]
fn loss_falls_with_a_positive_learning_rate() {
    let mut trainer = Trainer::<f32>::new(small_run(1e-3)).unwrap();
    let summary = trainer.run(9, |_| {}).unwrap();
    assert_eq!(summary.steps, 9);
    assert!(summary.losses[8] < summary.losses[0], "{:?}", summary.losses);
}

fn resume_matches_straight_run<S: gatedunipose::Scalar>() {
    let cfg = small_run(1e-3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.gupz");

    let mut straight = Trainer::<S>::new(cfg.clone()).unwrap();
    let full = straight.run(7, |_| {}).unwrap();

    let mut first = Trainer::<S>::new(cfg.clone()).unwrap();
    let head = first.run(4, |_| {}).unwrap();
    first.save(&path).unwrap();
    let mut second = Trainer::<S>::resume(cfg, &path).unwrap();
    assert_eq!(second.steps_taken(), 4);
    let tail = second.run(7, |_| {}).unwrap();

    let joined: Vec<f64> = head.losses.iter().chain(&tail.losses).copied().collect();
    assert_eq!(joined, full.losses);
    for (a, b) in straight.model.parameters().iter().zip(second.model.parameters()) {
        assert_eq!(a.tensor().data(), b.tensor().data(), "{}", a.name());
    }
}

#[test]
fn resumed_run_reproduces_the_loss_trajectory_f32() {
    resume_matches_straight_run::<f32>();
}

#[test]
fn resumed_run_reproduces_the_loss_trajectory_f64() {
    resume_matches_straight_run::<f64>();
}

#[test]
fn resume_rejects_a_different_model() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.gupz");
    Trainer::<f32>::new(small_run(1e-3)).unwrap().save(&path).unwrap();
    let mut other = small_run(1e-3);
    other.model.seed = 99;
    assert!(matches!(Trainer::<f32>::resume(other, &path), Err(Error::Checkpoint(_))));
}

#[test]
fn non_finite_loss_dumps_the_batch() {
    let dir = tempfile::tempdir().unwrap();
    let mut trainer = Trainer::<f32>::new(small_run(1e-3)).unwrap();
    trainer.set_dump_dir(dir.path());
    trainer.model.decoder.final_conv.bias.as_mut().unwrap().tensor_mut().data_mut()[0] = f32::NAN;
    match trainer.train_step() {
        Err(Error::NonFiniteLoss { step: 0, dump: Some(base) }) => {
            let images = gatedunipose::data::read_image::<f32>(&base.with_extension("images.gupi")).unwrap();
            assert_eq!(images.shape(), &[8, 3, 64, 64]);
            let targets = gatedunipose::data::read_image::<f32>(&base.with_extension("targets.gupi")).unwrap();
            assert_eq!(targets.shape(), &[8, 3, 16, 16]);
        }
        other => panic!("expected a non-finite loss, got {other:?}"),
    }
}

#[test]
fn run_config_round_trips_through_toml() {
    let cfg = small_run(1e-3);
    assert_eq!(ToyRunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    let shipped = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/toy_train.toml")).unwrap();
    let parsed = ToyRunConfig::from_toml(&shipped).unwrap();
    assert_eq!(parsed.train.steps, 300);
    let mut broken = cfg.clone();
    broken.data.joints = 4;
    assert!(matches!(broken.validate(), Err(Error::Config { .. })));
}
