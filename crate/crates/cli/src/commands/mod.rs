pub mod deploy;
pub mod eval;
pub mod params;
pub mod train;
pub mod verify;

use std::path::Path;

use gatedunipose::{Error, ModelConfig};

use crate::error::CliResult;

/// Toy run shipped with the repository, used when no `--config` is given.
pub const DEFAULT_TOY_RUN: &str = include_str!("../../../../configs/toy_train.toml");

pub fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))).into()
    })
}

/// Accepts a bare model document or a run document with a `[model]` table.
pub fn parse_model_config(text: &str) -> CliResult<ModelConfig> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Parse {
        context: "config".into(),
        reason: e.message().to_string(),
    })?;
    match table.get("model") {
        Some(toml::Value::Table(model)) => Ok(ModelConfig::from_toml(&model.to_string())?),
        _ => Ok(ModelConfig::from_toml(text)?),
    }
}

/// `--config` if given, else the named preset.
pub fn resolve_model_config(config: Option<&Path>, preset: &str, seed: Option<u64>) -> CliResult<ModelConfig> {
    let mut cfg = match config {
        Some(path) => parse_model_config(&read_text(path)?)?,
        None => ModelConfig::preset(preset)?,
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_config_from_run_or_bare_document() {
        let bare = ModelConfig::toy().to_toml();
        assert_eq!(parse_model_config(&bare).unwrap(), ModelConfig::toy());
        let run = parse_model_config(DEFAULT_TOY_RUN).unwrap();
        assert_eq!(run.joints, 5);
    }

    #[test]
    fn even_kernel_is_a_config_error() {
        let text = ModelConfig::toy().to_toml().replacen("kernel_sizes = [7", "kernel_sizes = [8", 1);
        let err = parse_model_config(&text).unwrap_err();
        assert_eq!(err.exit_code(), 2, "{err}");
    }
}
