//! Toy training on synthetic data.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::{Mode, Var};
use crate::codec::{HeatmapCodec, KeypointSet};
use crate::data::image::write_image;
use crate::data::{synthetic_range, SyntheticSample, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::pck;
use crate::losses::training_loss;
use crate::model::{checkpoint, GatedUniPoseModel, ModelConfig, HEATMAP_STRIDE};
use crate::nn::{accumulate_grads, commit_norm_stats};
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the output-distillation term; 0 disables it.
    #[serde(default)]
    pub distill_weight: f64,
    /// Teacher checkpoint for distillation.
    #[serde(default)]
    pub teacher: Option<PathBuf>,
    /// Target Gaussian width in heatmap cells.
    pub sigma: f64,
    /// Held-out samples used for PCK.
    pub eval_samples: usize,
    /// PCK distance threshold in input pixels.
    pub pck_threshold: f64,
}

/// Everything a toy run needs, as one TOML document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyRunConfig {
    pub model: ModelConfig,
    pub data: SyntheticSpec,
    pub train: TrainConfig,
}

impl ToyRunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config("toy run", e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate().map_err(|e| Error::config("data", e.to_string()))?;
        if self.data.joints != self.model.joints {
            return Err(Error::config("data.joints", "must equal model.joints"));
        }
        if self.data.image_size != self.model.input_size {
            return Err(Error::config("data.image_size", "must equal model.input_size"));
        }
        let t = &self.train;
        if t.batch_size == 0 || t.eval_samples == 0 {
            return Err(Error::config("train", "batch_size and eval_samples must be positive"));
        }
        if !(t.lr >= 0.0) || !(t.sigma > 0.0) || !(t.pck_threshold > 0.0) || !(t.distill_weight >= 0.0) {
            return Err(Error::config("train", "lr and distill_weight must be >= 0, sigma and pck_threshold > 0"));
        }
        if t.distill_weight > 0.0 && t.teacher.is_none() {
            return Err(Error::config("train.teacher", "required when distill_weight > 0"));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.data.samples.div_ceil(self.train.batch_size)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainEvent {
    Step { step: u64, loss: f64 },
    Epoch { epoch: u64, step: u64, mean_loss: f64, pck: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub losses: Vec<f64>,
    pub final_pck: f64,
}

impl TrainSummary {
    /// Mean of the last `window` step losses over the first step's loss.
    pub fn loss_ratio(&self, window: usize) -> Option<f64> {
        let first = *self.losses.first()?;
        let tail = &self.losses[self.losses.len().saturating_sub(window.max(1))..];
        Some(tail.iter().sum::<f64>() / tail.len() as f64 / first)
    }
}

pub struct Trainer<S: Scalar> {
    pub model: GatedUniPoseModel<S>,
    pub optimizer: Adam<S>,
    config: ToyRunConfig,
    codec: HeatmapCodec,
    train_set: Vec<SyntheticSample<S>>,
    targets: Vec<Tensor<S>>,
    heldout: Vec<SyntheticSample<S>>,
    teacher: Option<GatedUniPoseModel<S>>,
    dump_dir: Option<PathBuf>,
    epoch_losses: Vec<f64>,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(config: ToyRunConfig) -> Result<Self> {
        config.validate()?;
        let model = GatedUniPoseModel::build(&config.model)?;
        let optimizer = Adam::new(config.train.lr);
        Self::assemble(config, model, optimizer)
    }

    /// Continue from a checkpoint written by [`Trainer::save`].
    pub fn resume(config: ToyRunConfig, path: &Path) -> Result<Self> {
        config.validate()?;
        let (model, aux) = checkpoint::load::<S>(path)?;
        if model.config() != &config.model {
            return Err(Error::Checkpoint("checkpoint model config differs from the run config".into()));
        }
        let mut optimizer = Adam::new(config.train.lr);
        optimizer.load_state(&aux)?;
        Self::assemble(config, model, optimizer)
    }

    fn assemble(config: ToyRunConfig, model: GatedUniPoseModel<S>, optimizer: Adam<S>) -> Result<Self> {
        let codec = HeatmapCodec {
            stride: HEATMAP_STRIDE,
            sigma: config.train.sigma,
            ..HeatmapCodec::default()
        };
        let train_set = synthetic_range(&config.data, 0, config.data.samples)?;
        let heldout = synthetic_range(&config.data, config.data.samples as u64, config.train.eval_samples)?;
        let targets = train_set
            .iter()
            .map(|s| codec.encode(&s.keypoints, config.model.heatmap_size))
            .collect::<Result<Vec<_>>>()?;
        let teacher = match (&config.train.teacher, config.train.distill_weight > 0.0) {
            (Some(path), true) => {
                let (t, _) = checkpoint::load::<S>(path)?;
                if t.config().heatmap_size != config.model.heatmap_size || t.config().joints != config.model.joints {
                    return Err(Error::config("train.teacher", "teacher output shape differs from the student's"));
                }
                Some(t)
            }
            _ => None,
        };
        Ok(Self {
            model,
            optimizer,
            config,
            codec,
            train_set,
            targets,
            heldout,
            teacher,
            dump_dir: None,
            epoch_losses: Vec::new(),
        })
    }

    /// Where a non-finite loss dumps its batch.
    pub fn set_dump_dir(&mut self, dir: impl Into<PathBuf>) {
        self.dump_dir = Some(dir.into());
    }

    pub fn config(&self) -> &ToyRunConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.optimizer.steps_taken()
    }

    /// The batch used at 0-based `step`: consecutive samples, wrapping around.
    pub fn batch(&self, step: u64) -> Result<(Tensor<S>, Tensor<S>)> {
        let b = self.config.train.batch_size;
        let n = self.train_set.len();
        let idx: Vec<usize> = (0..b).map(|i| (step as usize * b + i) % n).collect();
        let images = stack(idx.iter().map(|&i| &self.train_set[i].image))?;
        let targets = stack(idx.iter().map(|&i| &self.targets[i]))?;
        Ok((images, targets))
    }

    /// One optimizer step; returns the batch loss.
    pub fn train_step(&mut self) -> Result<f64> {
        let step = self.steps_taken();
        let (images, targets) = self.batch(step)?;
        self.model.set_mode(Mode::Train);
        let mut tape = self.model.tape();
        let x = Var::constant(images);
        let pred = self.model.forward(&mut tape, &x)?;
        let teacher = match &self.teacher {
            Some(t) => Some(Var::constant(t.forward(&mut t.tape(), &x)?.into_tensor())),
            None => None,
        };
        let target = Var::constant(targets);
        let loss = training_loss(
            &mut tape,
            &pred,
            &target,
            None,
            teacher.as_ref(),
            self.config.train.distill_weight,
        )?;
        let value = loss.value().data()[0].to_f64();
        if !value.is_finite() {
            let dump = self.dump_batch(step, x.value(), target.value())?;
            return Err(Error::NonFiniteLoss { step: step as usize, dump });
        }
        let grads = tape.backward(&loss)?;
        accumulate_grads(&mut self.model, &grads)?;
        self.optimizer.step(&mut self.model);
        commit_norm_stats(&mut self.model, tape.norm_updates());
        self.model.set_mode(Mode::Eval);
        Ok(value)
    }

    fn dump_batch(&self, step: u64, images: &Tensor<S>, targets: &Tensor<S>) -> Result<Option<PathBuf>> {
        let Some(dir) = &self.dump_dir else { return Ok(None) };
        std::fs::create_dir_all(dir)?;
        let base = dir.join(format!("nonfinite_step{step}"));
        write_image(&base.with_extension("images.gupi"), images)?;
        write_image(&base.with_extension("targets.gupi"), targets)?;
        Ok(Some(base))
    }

    /// Decoded held-out predictions in input pixels, alongside the truth.
    pub fn heldout_predictions(&self) -> Result<(Vec<KeypointSet>, Vec<KeypointSet>)> {
        let mut preds = Vec::with_capacity(self.heldout.len());
        let chunk = self.config.train.batch_size.max(1);
        for group in self.heldout.chunks(chunk) {
            let images = stack(group.iter().map(|s| &s.image))?;
            let out = self.model.forward(&mut self.model.tape(), &Var::constant(images))?;
            for joints in self.codec.decode_batch(out.value())? {
                preds.push(KeypointSet::from_triplets(
                    &joints.iter().flat_map(|d| [d.x, d.y, 2.0]).collect::<Vec<_>>(),
                )?);
            }
        }
        Ok((preds, self.heldout.iter().map(|s| s.keypoints.clone()).collect()))
    }

    /// PCK at the configured pixel threshold on held-out samples (eval mode).
    pub fn evaluate_pck(&self) -> Result<f64> {
        let (preds, gts) = self.heldout_predictions()?;
        pck(&preds, &gts, self.config.train.pck_threshold)
    }

    /// Train until `total_steps` optimizer steps have been taken, reporting
    /// every step and every completed epoch.
    pub fn run(&mut self, total_steps: u64, mut on_event: impl FnMut(&TrainEvent)) -> Result<TrainSummary> {
        let per_epoch = self.config.steps_per_epoch() as u64;
        let mut losses = Vec::new();
        while self.steps_taken() < total_steps {
            let loss = self.train_step()?;
            let step = self.steps_taken();
            losses.push(loss);
            self.epoch_losses.push(loss);
            on_event(&TrainEvent::Step { step, loss });
            if step.is_multiple_of(per_epoch) || step == total_steps {
                let mean_loss = self.epoch_losses.iter().sum::<f64>() / self.epoch_losses.len() as f64;
                self.epoch_losses.clear();
                on_event(&TrainEvent::Epoch {
                    epoch: step.div_ceil(per_epoch),
                    step,
                    mean_loss,
                    pck: self.evaluate_pck()?,
                });
            }
        }
        Ok(TrainSummary {
            steps: self.steps_taken(),
            losses,
            final_pck: self.evaluate_pck()?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.model, &self.optimizer.state_records()?, path)
    }
}

/// Concatenate equal-shape tensors along a new leading axis.
pub fn stack<'a, S: Scalar + 'a>(items: impl IntoIterator<Item = &'a Tensor<S>>) -> Result<Tensor<S>> {
    let mut data = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    let mut n = 0;
    for t in items {
        match &shape {
            None => shape = Some(t.shape().to_vec()),
            Some(s) if s != t.shape() => {
                return Err(Error::shape("stack", format!("{:?} vs {:?}", s, t.shape())));
            }
            _ => {}
        }
        data.extend_from_slice(t.data());
        n += 1;
    }
    let mut full = vec![n];
    full.extend(shape.ok_or_else(|| Error::InvalidInput("nothing to stack".into()))?);
    Tensor::new(&full, data)
}
