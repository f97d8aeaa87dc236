use gatedunipose::model::checkpoint;
use gatedunipose::rng::indexed_rng;
use gatedunipose::verify::deploy_tolerance;
use gatedunipose::{GatedUniPoseModel, Mode, Scalar, Tensor, Var};
use serde_json::json;

use crate::args::{DeployArgs, GlobalArgs};
use crate::error::{CliError, CliResult};
use crate::log::Record;
use crate::manifest::RunManifest;

pub fn run<S: Scalar>(args: &DeployArgs, g: &GlobalArgs, manifest: &mut RunManifest) -> CliResult<()> {
    if args.inputs == 0 {
        return Err(CliError::Usage("--inputs must be positive".into()));
    }
    let (mut model, _) = checkpoint::load::<S>(&args.input)?;
    let seed = g.seed.unwrap_or(0);
    manifest.seed = seed;
    manifest.set_config(model.config().to_toml());
    model.set_mode(Mode::Eval);
    let mut merged = model.clone();
    merged.switch_to_deploy()?;

    let [h, w] = model.config().input_size;
    let mut worst: f64 = 0.0;
    for i in 0..args.inputs {
        let mut rng = indexed_rng(seed, i as u64);
        let x = Var::constant(Tensor::<S>::uniform(&[1, 3, h, w], 0.0, 1.0, &mut rng)?);
        worst = worst.max(output(&model, &x)?.max_abs_diff(&output(&merged, &x)?)?);
    }
    let tol = deploy_tolerance::<S>();
    let passed = worst <= tol;
    let rec = Record::new("deploy")
        .kv("inputs", args.inputs)
        .kv("max_abs_diff", format!("{worst:.3e}"))
        .kv("tolerance", format!("{tol:.1e}"))
        .kv("status", if passed { "PASS" } else { "FAIL" });
    println!("{}", rec.as_str());
    manifest.result = json!({
        "input": args.input.display().to_string(),
        "output": args.output.display().to_string(),
        "inputs": args.inputs,
        "max_abs_diff": worst,
        "tolerance": tol,
        "passed": passed,
    });
    if !passed {
        return Err(CliError::Failed(format!(
            "deployed model differs by {worst:.3e} (tolerance {tol:.1e}); nothing written"
        )));
    }
    checkpoint::save(&merged, &[], &args.output)?;
    Ok(())
}

fn output<S: Scalar>(model: &GatedUniPoseModel<S>, x: &Var<S>) -> CliResult<Tensor<S>> {
    Ok(model.forward(&mut model.tape(), x)?.value().clone())
}
