use std::path::{Path, PathBuf};

use serde::Serialize;
use stainforge_core::model::{TranslatorConfig, ViTConfig};
use stainforge_core::synth::{self, SynthConfig, SynthDataset};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const CONFIG_FILE: &str = "run.toml";

#[derive(Debug, Clone, Serialize)]
pub struct SynthOutcome {
    pub dataset: SynthDataset,
    pub config: PathBuf,
}

/// A run configuration sized for synthetic tiles: a small translator, no
/// dropout and the planted labels as the evaluation reference.
pub fn synth_run_config(synth: &SynthConfig) -> RunConfig {
    let mut cfg = RunConfig { seed: synth.seed, ..RunConfig::default() };
    cfg.paths.manifest = "manifest.jsonl".into();
    cfg.paths.panel = "panel.json".into();
    cfg.paths.output_dir = "out".into();
    cfg.paths.labels = Some("planted_labels.csv".into());
    cfg.model = TranslatorConfig {
        vit: ViTConfig { patch_size: 8, depth: 2, width: 32, heads: 2, mlp_ratio: 2.0, dropout: 0.0, pos_grid: 4 },
        detail_channels: vec![8, 16, 32],
        decoder_channels: vec![32, 16, 16, 8],
        markers: synth::MARKERS.len(),
    };
    let t = &mut cfg.train.config;
    t.lr = 3e-3;
    t.warmup = 20;
    t.batch = 8;
    t.epochs = 100;
    t.dropout = Some(0.0);
    t.val_every = 50;
    cfg
}

/// Write a synthetic dataset and a matching `run.toml` into `out`.
pub fn run(out: &Path, synth: &SynthConfig) -> Result<SynthOutcome> {
    synth.validate().map_err(CliError::user)?;
    let dataset = synth::write_dataset(out, synth)?;
    let text = toml::to_string_pretty(&synth_run_config(synth)).map_err(|e| CliError::Internal(e.to_string()))?;
    let config = out.join(CONFIG_FILE);
    stainforge_core::io::write_atomic(&config, text.as_bytes())?;
    Ok(SynthOutcome { dataset, config })
}
