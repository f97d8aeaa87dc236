use std::fs::File;
use std::io::{BufWriter, Write};
use std::time::Instant;

use gatedunipose::train::{ToyRunConfig, TrainEvent, Trainer};
use gatedunipose::Scalar;
use serde_json::json;

use super::{read_text, DEFAULT_TOY_RUN};
use crate::args::{GlobalArgs, TrainArgs};
use crate::error::CliResult;
use crate::log::Record;
use crate::manifest::RunManifest;

/// Losses averaged at the end of a run when reporting the reduction.
const LOSS_WINDOW: usize = 10;

pub fn run<S: Scalar>(args: &TrainArgs, g: &GlobalArgs, manifest: &mut RunManifest) -> CliResult<()> {
    let text = match &g.config {
        Some(path) => read_text(path)?,
        None => DEFAULT_TOY_RUN.to_string(),
    };
    let mut cfg = ToyRunConfig::from_toml(&text)?;
    if let Some(s) = g.seed {
        cfg.model.seed = s;
        cfg.data.seed = s.wrapping_add(1);
    }
    if let Some(steps) = args.steps {
        cfg.train.steps = steps;
    }
    cfg.validate()?;
    manifest.seed = cfg.model.seed;
    manifest.set_config(cfg.to_toml());

    std::fs::create_dir_all(&g.out_dir)?;
    let total = cfg.train.steps as u64;
    let mut trainer = match &args.resume {
        Some(path) => Trainer::<S>::resume(cfg, path)?,
        None => Trainer::<S>::new(cfg)?,
    };
    trainer.set_dump_dir(g.out_dir.join("dump"));
    let log_path = g.out_dir.join("train_log.txt");
    let mut log = BufWriter::new(File::create(&log_path)?);
    let mut log_error = None;
    let start_step = trainer.steps_taken();
    let t0 = Instant::now();
    let outcome = trainer.run(total, |ev| {
        let rec = match *ev {
            TrainEvent::Step { step, loss } => Record::new("step").kv("step", step).kv("loss", format!("{loss:.6e}")),
            TrainEvent::Epoch {
                epoch,
                step,
                mean_loss,
                pck,
            } => {
                let r = Record::new("epoch")
                    .kv("epoch", epoch)
                    .kv("step", step)
                    .kv("mean_loss", format!("{mean_loss:.6e}"))
                    .kv("pck", format!("{pck:.4}"))
                    .kv("elapsed_s", format!("{:.1}", t0.elapsed().as_secs_f64()));
                r.emit();
                r
            }
        };
        if let Err(e) = writeln!(log, "{}", rec.as_str()) {
            log_error.get_or_insert(e);
        }
    });
    log.flush()?;
    if let Some(e) = log_error {
        return Err(e.into());
    }
    let summary = outcome?;
    let elapsed = t0.elapsed().as_secs_f64();
    let checkpoint = g.out_dir.join("toy.gupz");
    trainer.save(&checkpoint)?;

    let initial = summary.losses.first().copied().unwrap_or(f64::NAN);
    let ratio = summary.loss_ratio(LOSS_WINDOW).unwrap_or(f64::NAN);
    let rec = Record::new("summary")
        .kv("steps", summary.steps)
        .kv("initial_loss", format!("{initial:.6e}"))
        .kv("final_loss", format!("{:.6e}", ratio * initial))
        .kv("loss_ratio", format!("{ratio:.4}"))
        .kv("pck", format!("{:.4}", summary.final_pck))
        .kv("elapsed_s", format!("{elapsed:.1}"))
        .kv("checkpoint", checkpoint.display());
    println!("{}", rec.as_str());
    manifest.result = json!({
        "start_step": start_step,
        "steps": summary.steps,
        "initial_loss": initial,
        "final_loss": ratio * initial,
        "loss_ratio": ratio,
        "loss_window": LOSS_WINDOW,
        "pck": summary.final_pck,
        "pck_threshold": trainer.config().train.pck_threshold,
        "elapsed_s": elapsed,
        "checkpoint": checkpoint.display().to_string(),
        "log": log_path.display().to_string(),
    });
    Ok(())
}
