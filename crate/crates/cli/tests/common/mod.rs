#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
    pub manifest: Option<Value>,
}

/// Run the binary with `--out-dir out` appended and read back its manifest.
pub fn run(args: &[&str], out: &Path) -> Run {
    let output = Command::new(env!("CARGO_BIN_EXE_gatedunipose"))
        .args(args)
        .arg("--out-dir")
        .arg(out)
        .output()
        .expect("binary runs");
    let manifest = args
        .iter()
        .find(|a| !a.starts_with('-') && ["verify", "train-toy", "eval", "params", "deploy"].contains(a))
        .and_then(|cmd| std::fs::read_to_string(out.join(format!("manifest-{cmd}.json"))).ok())
        .map(|t| serde_json::from_str(&t).expect("manifest is JSON"));
    Run {
        code: output.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&output.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&output.stderr).into_owned(),
        manifest,
    }
}

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn fixture(name: &str) -> String {
    repo_root()
        .join("crates/core/tests/fixtures")
        .join(name)
        .display()
        .to_string()
}
