mod args;
mod commands;
mod error;
mod log;
mod manifest;

use clap::Parser;

use args::{Cli, Command};
use error::CliResult;
use log::Record;
use manifest::RunManifest;

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} threads: {e}");
            std::process::exit(2);
        }
    }
    let g = &cli.global;
    let mut manifest = RunManifest::start(cli.command.name(), g.seed.unwrap_or(0), &g.precision.to_string());
    let result = dispatch(&cli, &mut manifest);
    let code = match &result {
        Ok(()) => 0,
        Err(e) => e.exit_code(),
    };
    if let Err(e) = &result {
        Record::new("error").kv("exit_code", code).kv("message", e).emit();
    }
    manifest.finish(code);
    match manifest.write(&g.out_dir) {
        Ok(path) => Record::new("manifest").kv("path", path.display()).emit(),
        Err(e) => Record::new("error").kv("message", format!("manifest not written: {e}")).emit(),
    }
    std::process::exit(code);
}

fn dispatch(cli: &Cli, manifest: &mut RunManifest) -> CliResult<()> {
    use gatedunipose::Precision::{F32, F64};
    let g = &cli.global;
    match (&cli.command, g.precision) {
        (Command::Verify, F32) => commands::verify::run::<f32>(g, manifest),
        (Command::Verify, F64) => commands::verify::run::<f64>(g, manifest),
        (Command::TrainToy(a), F32) => commands::train::run::<f32>(a, g, manifest),
        (Command::TrainToy(a), F64) => commands::train::run::<f64>(a, g, manifest),
        (Command::Eval(a), _) => commands::eval::run(a, g, manifest),
        (Command::Params(a), F32) => commands::params::run::<f32>(a, g, manifest),
        (Command::Params(a), F64) => commands::params::run::<f64>(a, g, manifest),
        (Command::Deploy(a), F32) => commands::deploy::run::<f32>(a, g, manifest),
        (Command::Deploy(a), F64) => commands::deploy::run::<f64>(a, g, manifest),
    }
}
