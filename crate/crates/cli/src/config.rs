//! TOML experiment configuration.
//!
//! Keys mirror `TrainConfig`, with network settings under `[net]`. Missing
//! keys take their defaults; unknown keys are rejected.

use std::path::Path;

use anyhow::{Context, Result};
use morphsnn_core::training::TrainConfig;

pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let cfg: TrainConfig = toml::from_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    parse_config(&text).with_context(|| format!("invalid config {}", path.display()))
}

pub fn render_config(cfg: &TrainConfig) -> Result<String> {
    Ok(toml::to_string(cfg)?)
}
