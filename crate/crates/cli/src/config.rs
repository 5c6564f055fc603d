use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use stainforge_core::eval::{BootstrapConfig, ProbeConfig};
use stainforge_core::gating::GmmOptions;
use stainforge_core::imgproc::QcThresholds;
use stainforge_core::io::{sha256_hex, Split};
use stainforge_core::model::{LoraConfig, TrainConfig, TranslatorConfig};
use stainforge_core::rng;

use crate::error::{CliError, Result};

pub const ENV_PREFIX: &str = "STAINFORGE_";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every stage derives its own named substream from it.
    pub seed: u64,
    /// Worker threads; `None` lets rayon decide. Not part of the config hash,
    /// like `serve`, `train.resume` and `train.stop_after`.
    pub jobs: Option<usize>,
    pub paths: PathsConfig,
    pub preprocess: PreprocessConfig,
    pub model: TranslatorConfig,
    pub lora: Option<LoraConfig>,
    pub train: TrainSection,
    pub evaluate: EvaluateConfig,
    pub serve: ServeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub manifest: PathBuf,
    pub panel: PathBuf,
    pub output_dir: PathBuf,
    /// Optional per-cell reference labels (`tile_id,cell_id,...,label_<marker>`)
    /// replacing the GMM pseudo-labels during evaluation.
    pub labels: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            manifest: "manifest.jsonl".into(),
            panel: "panel.json".into(),
            output_dir: "out".into(),
            labels: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QcMode {
    /// H&E tissue fraction and the empty channel only.
    Tissue,
    /// Adds nuclei-density correlation and tissue IoU against the mIF section.
    Consecutive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatingSpace {
    Corrected,
    Normalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub qc: QcThresholds,
    pub qc_mode: QcMode,
    pub density_grid: usize,
    pub dilation_um: f64,
    pub gating_space: GatingSpace,
    pub posterior_cutoff: f64,
    pub gmm: GmmOptions,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            qc: QcThresholds::default(),
            qc_mode: QcMode::Consecutive,
            density_grid: 32,
            dilation_um: 2.0,
            gating_space: GatingSpace::Corrected,
            posterior_cutoff: 0.5,
            gmm: GmmOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    #[serde(flatten)]
    pub config: TrainConfig,
    /// Global loss scale `lambda` of the weighted MSE.
    pub loss_lambda: f64,
    /// Write a resumable trainer state every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    /// Continue from `train/model.state.json` when it exists.
    pub resume: bool,
    /// End this invocation once this many steps are done; continue later with `resume`.
    pub stop_after: Option<usize>,
    /// Start from these weights instead of a fresh initialization.
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { config: TrainConfig::default(), loss_lambda: 1.0, checkpoint_every: 0, resume: false, stop_after: None, init_checkpoint: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Probe fit on a seeded fraction of the evaluation cells, scored on the rest.
    External,
    /// Probe fit on validation-split cells, scored on evaluation cells.
    InDomain,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::External => "external",
            Protocol::InDomain => "in_domain",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointChoice {
    Final,
    Best,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub protocol: Protocol,
    pub split: Split,
    pub train_fraction: f64,
    pub probe: ProbeConfig,
    pub n_bootstrap: usize,
    pub percentiles: (f64, f64),
    pub checkpoint: CheckpointChoice,
    pub batch: usize,
    /// Score the stored targets as if they were predictions.
    pub identity: bool,
    pub plots: bool,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::External,
            split: Split::Test,
            train_fraction: 0.2,
            probe: ProbeConfig::default(),
            n_bootstrap: 1000,
            percentiles: (2.5, 97.5),
            checkpoint: CheckpointChoice::Final,
            batch: 8,
            identity: false,
            plots: true,
        }
    }
}

impl EvaluateConfig {
    pub fn bootstrap(&self, root_seed: u64) -> BootstrapConfig {
        BootstrapConfig {
            n_samples: self.n_bootstrap,
            percentiles: self.percentiles,
            seed: rng::derive_seed(root_seed, "eval/bootstrap"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub port: u16,
    /// Built UI bundle served at `/`.
    pub static_dir: Option<PathBuf>,
    /// Defaults to `<panel>.audit.jsonl`.
    pub audit_log: Option<PathBuf>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self { port: 8787, static_dir: None, audit_log: None }
    }
}

/// Parse TOML or JSON text (by extension, falling back to trying both).
fn parse_text(path: &Path, text: &str) -> Result<Value> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or_default().to_ascii_lowercase();
    let toml = |t: &str| toml::from_str::<toml::Value>(t).map_err(|e| e.to_string()).and_then(|v| {
        serde_json::to_value(v).map_err(|e| e.to_string())
    });
    let json = |t: &str| serde_json::from_str::<Value>(t).map_err(|e| e.to_string());
    let parsed = match ext.as_str() {
        "toml" => toml(text),
        "json" => json(text),
        _ => json(text).or_else(|_| toml(text)),
    };
    parsed.map_err(|e| CliError::user(format!("{}: {e}", path.display())))
}

/// `STAINFORGE_SECTION__KEY=value` sets `section.key`; values parse as JSON
/// when they can and are strings otherwise.
pub fn apply_env_overrides<I>(value: &mut Value, vars: I) -> Result<()>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..].split("__").map(|s| s.to_ascii_lowercase()).collect();
        if path.iter().any(String::is_empty) {
            return Err(CliError::user(format!("malformed override variable `{key}`")));
        }
        let parsed = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
        let mut node = &mut *value;
        for part in &path[..path.len() - 1] {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| CliError::user(format!("`{key}` does not address a config section")))?;
            node = obj.entry(part.clone()).or_insert_with(|| Value::Object(Default::default()));
        }
        node.as_object_mut()
            .ok_or_else(|| CliError::user(format!("`{key}` does not address a config section")))?
            .insert(path[path.len() - 1].clone(), parsed);
    }
    Ok(())
}

impl RunConfig {
    /// Load `path`, apply environment overrides and resolve relative paths
    /// against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with_env(path, std::env::vars())
    }

    pub fn load_with_env<I>(path: &Path, vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::user(format!("cannot read config {}: {e}", path.display())))?;
        let mut value = parse_text(path, &text)?;
        apply_env_overrides(&mut value, vars)?;
        let mut cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| CliError::user(format!("{}: {e}", path.display())))?;
        let base = std::path::absolute(path.parent().unwrap_or(Path::new("")))?;
        cfg.resolve_paths(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.manifest);
        fix(&mut self.paths.panel);
        fix(&mut self.paths.output_dir);
        if let Some(p) = self.paths.labels.as_mut() {
            fix(p);
        }
        if let Some(p) = self.train.init_checkpoint.as_mut() {
            fix(p);
        }
        if let Some(p) = self.serve.static_dir.as_mut() {
            fix(p);
        }
        if let Some(p) = self.serve.audit_log.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.preprocess;
        if !(p.dilation_um >= 0.0) || !(0.0..1.0).contains(&p.posterior_cutoff) || p.posterior_cutoff == 0.0 {
            return Err(CliError::user("dilation_um must be >= 0 and posterior_cutoff in (0, 1)"));
        }
        if p.density_grid == 0 {
            return Err(CliError::user("density_grid must be positive"));
        }
        self.train.config.validate()?;
        if !(self.train.loss_lambda > 0.0) {
            return Err(CliError::user("loss_lambda must be positive"));
        }
        let e = &self.evaluate;
        if !(e.train_fraction > 0.0 && e.train_fraction < 1.0) || e.n_bootstrap == 0 || e.batch == 0 {
            return Err(CliError::user("evaluate: train_fraction in (0, 1), n_bootstrap and batch positive"));
        }
        if self.jobs == Some(0) {
            return Err(CliError::user("jobs must be positive"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON of every setting that affects outputs.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.jobs = None;
        canonical.train.resume = false;
        canonical.train.stop_after = None;
        canonical.serve = ServeConfig::default();
        sha256_hex(serde_json::to_string(&canonical).expect("config serializes").as_bytes())
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        rng::derive_seed(self.seed, stage)
    }

    pub fn preprocess_dir(&self) -> PathBuf {
        self.paths.output_dir.join("preprocess")
    }

    pub fn train_dir(&self) -> PathBuf {
        self.paths.output_dir.join("train")
    }

    pub fn evaluate_dir(&self) -> PathBuf {
        self.paths.output_dir.join("evaluate")
    }

    /// Comment lines heading every CSV artifact.
    pub fn preamble(&self, artifact: &str) -> Vec<String> {
        vec![
            format!("stainforge {artifact}"),
            format!("config_hash={}", self.hash()),
            format!("seed={}", self.seed),
        ]
    }
}
