use std::path::Path;
use std::process::Command;

use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliResult;

/// Everything needed to rerun a command and compare its outcome.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: String,
    pub config_sha256: String,
    pub seed: u64,
    pub precision: String,
    pub threads: usize,
    pub git_describe: String,
    pub version: String,
    pub started_at: String,
    pub finished_at: String,
    pub exit_code: i32,
    pub result: Value,
}

impl RunManifest {
    pub fn start(command: &str, seed: u64, precision: &str) -> Self {
        Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            config: String::new(),
            config_sha256: sha256_hex(b""),
            seed,
            precision: precision.to_string(),
            threads: rayon::current_num_threads(),
            git_describe: git_describe(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: now(),
            finished_at: String::new(),
            exit_code: 0,
            result: Value::Null,
        }
    }

    pub fn set_config(&mut self, snapshot: String) {
        self.config_sha256 = sha256_hex(snapshot.as_bytes());
        self.config = snapshot;
    }

    pub fn finish(&mut self, exit_code: i32) {
        self.finished_at = now();
        self.exit_code = exit_code;
    }

    pub fn write(&self, dir: &Path) -> CliResult<std::path::PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("manifest-{}.json", self.command));
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n")?;
        Ok(path)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .stderr(std::process::Stdio::null())
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_hash_tracks_snapshot() {
        let mut m = RunManifest::start("params", 0, "f32");
        m.set_config("a = 1\n".into());
        assert_eq!(m.config_sha256, sha256_hex(b"a = 1\n"));
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
