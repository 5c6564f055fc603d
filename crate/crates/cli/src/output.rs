use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::Result;

/// JSON artifact envelope carrying the config hash and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub data: T,
}

impl<T> Artifact<T> {
    pub fn new(cfg: &RunConfig, stage: &str, data: T) -> Self {
        Self { stage: stage.to_string(), config_hash: cfg.hash(), seed: cfg.seed, data }
    }
}

pub fn write_json_artifact<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    stainforge_core::io::write_atomic(path, text.as_bytes())?;
    Ok(())
}

pub fn csv_with_preamble(preamble: &[String], body: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for line in preamble {
        buf.extend_from_slice(format!("# {line}\n").as_bytes());
    }
    body(&mut buf)?;
    Ok(buf)
}
