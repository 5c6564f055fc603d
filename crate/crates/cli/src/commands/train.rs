use std::path::Path;

use serde::{Deserialize, Serialize};
use stainforge_core::model::{
    load_checkpoint, load_trainer_state, save_checkpoint, save_trainer_state, write_loss_curve, CheckpointMeta,
    LossConfig, Tensor, TrainConfig, TrainEvent, Trainer, Translator, ValidationRecord,
};
use stainforge_core::{PanelConfig, Split};

use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{CliError, Result};
use crate::output::{csv_with_preamble, write_json_artifact, Artifact};
use crate::plots;

pub const FINAL_CHECKPOINT: &str = "model.sfw";
pub const BEST_CHECKPOINT: &str = "best.sfw";
pub const STATE_FILE: &str = "model.state.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub train_tiles: usize,
    pub val_tiles: usize,
    pub parameters: usize,
    pub trainable_parameters: usize,
    pub final_loss: Option<f64>,
    pub best: Option<(usize, f64)>,
    pub last_validation: Option<ValidationRecord>,
    pub resumed_from: Option<usize>,
}

fn meta(cfg: &RunConfig, trainer: &Trainer, panel_hash: &str) -> CheckpointMeta {
    CheckpointMeta {
        translator: trainer.model.config.clone(),
        lora: trainer.model.lora.clone(),
        train: trainer.config.clone(),
        loss: trainer.loss.clone(),
        panel_hash: panel_hash.to_string(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        step: trainer.step,
    }
}

fn fresh_trainer(cfg: &RunConfig, markers: usize, targets: &[&Tensor]) -> Result<Trainer> {
    let mut model = match &cfg.train.init_checkpoint {
        Some(path) => {
            let (model, _) = load_checkpoint(path)?;
            if model.config.markers != markers {
                return Err(CliError::user(format!(
                    "{} predicts {} markers but the dataset has {markers}",
                    path.display(),
                    model.config.markers
                )));
            }
            model
        }
        None => {
            let mut arch = cfg.model.clone();
            arch.markers = markers;
            Translator::new(arch, cfg.seed)?
        }
    };
    if let Some(lora) = &cfg.lora {
        model.apply_lora(lora.clone(), cfg.stage_seed("lora"))?;
    }
    let loss = LossConfig::from_targets(targets, cfg.train.loss_lambda)?;
    let train = TrainConfig { seed: cfg.stage_seed("train"), ..cfg.train.config.clone() };
    Ok(Trainer::new(model, train, loss)?)
}

fn validation_csv(cfg: &RunConfig, markers: &[String], records: &[ValidationRecord]) -> Result<Vec<u8>> {
    csv_with_preamble(&cfg.preamble("validation"), |buf| {
        let mut header = vec!["step".to_string()];
        header.extend(markers.iter().map(|m| format!("pearson_{m}")));
        header.push("mean_pearson".into());
        buf.extend_from_slice(header.join(",").as_bytes());
        buf.push(b'\n');
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in records {
            let mut row = vec![r.step.to_string()];
            row.extend(r.pearson.iter().map(|p| opt(*p)));
            row.push(opt(r.mean_pearson));
            buf.extend_from_slice(row.join(",").as_bytes());
            buf.push(b'\n');
        }
        Ok(())
    })
}

fn save_all(dir: &Path, trainer: &Trainer, meta: &CheckpointMeta) -> stainforge_core::Result<()> {
    save_checkpoint(&dir.join(FINAL_CHECKPOINT), &trainer.model, meta)?;
    save_trainer_state(&dir.join(STATE_FILE), trainer, meta)
}

/// Train the translator on the preprocessed train split, validating on the
/// val split.
pub fn run(cfg: &RunConfig) -> Result<TrainSummary> {
    let dataset = Dataset::load(&cfg.preprocess_dir())?;
    let markers = super::preprocess::load_summary(cfg)?.markers;
    let train_records = dataset.split(Split::Train);
    if train_records.is_empty() {
        return Err(CliError::user("training split is empty"));
    }
    let val_records = dataset.split(Split::Val);
    let train = dataset.samples(&train_records)?;
    let val = dataset.samples(&val_records)?;
    let panel_hash = PanelConfig::load(&cfg.paths.panel)?.hash();
    let dir = cfg.train_dir();
    std::fs::create_dir_all(&dir)?;

    let state = dir.join(STATE_FILE);
    let (mut trainer, resumed_from) = if cfg.train.resume && state.exists() {
        let (trainer, meta) = load_trainer_state(&state)?;
        if meta.config_hash != cfg.hash() {
            log::warn!("resuming from a state written under config {}", meta.config_hash);
        }
        let step = trainer.step;
        (trainer, Some(step))
    } else {
        let targets: Vec<&Tensor> = train.iter().map(|s| &s.target).collect();
        (fresh_trainer(cfg, markers.len(), &targets)?, None)
    };
    let total = trainer.total_steps(train.len());
    log::info!(
        "train: {} tiles, {} val tiles, {} steps, {} trainable parameters",
        train.len(),
        val.len(),
        total,
        trainer.model.num_trainable()
    );

    let every = cfg.train.checkpoint_every;
    trainer.run(&train, &val, cfg.train.stop_after, |t, event| {
        match event {
            TrainEvent::Step(r) => {
                if r.step % 25 == 0 || r.step == total {
                    log::info!("step {}/{total} loss {:.5} lr {:.2e}", r.step, r.loss, r.lr);
                }
                if every > 0 && t.step % every == 0 && t.step < total {
                    save_all(&dir, t, &meta(cfg, t, &panel_hash))?;
                }
            }
            TrainEvent::Validation { record, improved } => {
                log::info!("validation at step {}: mean pearson {:?}", record.step, record.mean_pearson);
                if improved {
                    save_checkpoint(&dir.join(BEST_CHECKPOINT), &t.model, &meta(cfg, t, &panel_hash))?;
                }
            }
        }
        Ok(())
    })?;

    let final_meta = meta(cfg, &trainer, &panel_hash);
    save_all(&dir, &trainer, &final_meta)?;
    let mut curve = Vec::new();
    write_loss_curve(&trainer.curve, &markers, &cfg.preamble("loss curve"), &mut curve)?;
    stainforge_core::io::write_atomic(&dir.join("loss_curve.csv"), &curve)?;
    stainforge_core::io::write_atomic(&dir.join("validation.csv"), &validation_csv(cfg, &markers, &trainer.validations)?)?;
    let xs: Vec<f64> = trainer.curve.iter().map(|r| r.step as f64).collect();
    let mut series = vec![("loss".to_string(), trainer.curve.iter().map(|r| r.loss).collect::<Vec<_>>())];
    for (m, name) in markers.iter().enumerate() {
        series.push((format!("mse {name}"), trainer.curve.iter().map(|r| r.marker_mse[m]).collect()));
    }
    stainforge_core::io::write_atomic(
        &dir.join("loss_curve.svg"),
        plots::line_chart("Training loss", "step", "loss", &xs, &series).as_bytes(),
    )?;

    let summary = TrainSummary {
        steps: trainer.step,
        train_tiles: train.len(),
        val_tiles: val.len(),
        parameters: trainer.model.params.num_scalars(),
        trainable_parameters: trainer.model.num_trainable(),
        final_loss: trainer.curve.last().map(|r| r.loss),
        best: trainer.best,
        last_validation: trainer.validations.last().cloned(),
        resumed_from,
    };
    write_json_artifact(&dir.join("summary.json"), &Artifact::new(cfg, "train", &summary))?;
    Ok(summary)
}
