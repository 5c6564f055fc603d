#![allow(dead_code)]

use std::path::{Path, PathBuf};

use stainforge_cli::commands::synth::{self, synth_run_config};
use stainforge_cli::RunConfig;
use stainforge_core::synth::SynthConfig;

pub struct Workspace {
    pub dir: tempfile::TempDir,
    pub config_path: PathBuf,
    pub cfg: RunConfig,
}

impl Workspace {
    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    /// Rewrite the config file and reload it.
    pub fn update(&mut self, edit: impl FnOnce(&mut RunConfig)) {
        let mut raw = toml::from_str::<RunConfig>(&std::fs::read_to_string(&self.config_path).unwrap()).unwrap();
        edit(&mut raw);
        std::fs::write(&self.config_path, toml::to_string_pretty(&raw).unwrap()).unwrap();
        self.cfg = RunConfig::load(&self.config_path).unwrap();
    }
}

pub fn small_synth(tiles: usize) -> SynthConfig {
    SynthConfig { tiles, size: 32, nuclei_per_tile: 5, seed: 3, ..SynthConfig::default() }
}

/// Synthetic dataset plus a run config with a short training schedule.
pub fn workspace(synth_cfg: &SynthConfig, epochs: usize) -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let out = synth::run(dir.path(), synth_cfg).unwrap();
    let mut ws = Workspace { config_path: out.config, cfg: synth_run_config(synth_cfg), dir };
    ws.update(|c| {
        c.train.config.epochs = epochs;
        c.train.config.val_every = 0;
        c.evaluate.n_bootstrap = 200;
    });
    ws
}

pub fn read_dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
