use gatedunipose::verify::{run_all, CheckResult, VerifyOptions};
use gatedunipose::Scalar;
use serde_json::json;

use super::resolve_model_config;
use crate::args::GlobalArgs;
use crate::error::{CliError, CliResult};
use crate::log::Record;
use crate::manifest::RunManifest;

pub fn run<S: Scalar>(g: &GlobalArgs, manifest: &mut RunManifest) -> CliResult<()> {
    let model = resolve_model_config(g.config.as_deref(), "toy", g.seed)?;
    let seed = g.seed.unwrap_or(model.seed);
    manifest.seed = seed;
    manifest.set_config(model.to_toml());
    let opts = VerifyOptions::new(model, seed);
    let results = run_all::<S>(&opts, |r| {
        Record::new("check")
            .kv("suite", r.suite)
            .kv("name", &r.name)
            .kv("value", format!("{:.3e}", r.value))
            .kv("tolerance", format!("{:.1e}", r.tolerance))
            .kv("cases", r.cases)
            .kv("status", status(r))
            .emit();
    })?;
    print!("{}", table(&results));
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    manifest.result = json!({
        "checks": results.iter().map(|r| json!({
            "suite": r.suite.to_string(),
            "name": r.name,
            "value": r.value,
            "tolerance": r.tolerance,
            "cases": r.cases,
            "passed": r.passed,
        })).collect::<Vec<_>>(),
        "passed": results.len() - failed.len(),
        "failed": failed,
    });
    println!("{} of {} checks passed", results.len() - failed.len(), results.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("failing properties: {}", failed.join(", "))))
    }
}

fn status(r: &CheckResult) -> &'static str {
    if r.passed {
        "PASS"
    } else {
        "FAIL"
    }
}

fn table(results: &[CheckResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
    let mut out = format!(
        "{:<9} {:<width$} {:>10} {:>9} {:>6}  {}\n",
        "suite", "check", "value", "tolerance", "cases", "status"
    );
    for r in results {
        out += &format!(
            "{:<9} {:<width$} {:>10.3e} {:>9.1e} {:>6}  {}\n",
            r.suite.to_string(),
            r.name,
            r.value,
            r.tolerance,
            r.cases,
            status(r)
        );
    }
    out
}
