use gatedunipose::nn::format_millions;
use gatedunipose::{count_parameters, GatedUniPoseModel, Module, ModelConfig, Scalar};
use serde_json::json;

use super::resolve_model_config;
use crate::args::{GlobalArgs, ParamsArgs};
use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;

/// Total reported for the full-size network, in millions.
pub const REFERENCE_MILLIONS: f64 = 52.4;

pub fn run<S: Scalar>(args: &ParamsArgs, g: &GlobalArgs, manifest: &mut RunManifest) -> CliResult<()> {
    if args.preset.is_some() && g.config.is_some() {
        return Err(CliError::Usage("give either --preset or --config, not both".into()));
    }
    let preset = args.preset.as_deref().unwrap_or("toy");
    let cfg = resolve_model_config(g.config.as_deref(), preset, g.seed)?;
    manifest.seed = cfg.seed;
    manifest.set_config(cfg.to_toml());
    let model = GatedUniPoseModel::<S>::build(&cfg)?;
    let breakdown = model.parameter_breakdown();
    let total = count_parameters(model.parameters());

    let width = breakdown.iter().map(|(k, _)| k.len()).max().unwrap_or(6).max(6);
    println!("{:<width$} {:>12} {:>10}", "module", "params", "Parms (M)");
    for (name, n) in &breakdown {
        println!("{name:<width$} {n:>12} {:>10}", format!("{:.3}", *n as f64 / 1e6));
    }
    println!("{:<width$} {total:>12} {:>10}", "total", format_millions(total));

    let full_size = is_full_size(&cfg);
    if full_size {
        let diff = total as f64 / 1e6 - REFERENCE_MILLIONS;
        println!("reference={REFERENCE_MILLIONS}M counted={}M difference={diff:+.1}M", format_millions(total));
    }
    manifest.result = json!({
        "total": total,
        "millions": format_millions(total),
        "modules": breakdown.iter().map(|(k, n)| json!({"module": k, "params": n})).collect::<Vec<_>>(),
        "reference_millions": full_size.then_some(REFERENCE_MILLIONS),
    });
    Ok(())
}

fn is_full_size(cfg: &ModelConfig) -> bool {
    let mut full = ModelConfig::full();
    full.seed = cfg.seed;
    *cfg == full
}
