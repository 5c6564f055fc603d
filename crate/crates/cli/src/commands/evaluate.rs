use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use stainforge_core::eval::{
    auprc, baseline_suite, bootstrap_ci, cellcount_correlation, f1_binary, morphometry_features, psnr,
    split_external, ssim, BootstrapInterval, CellMetrics, CountCorrelation, MacroAverages, MarkerReport,
    MetricReport, PearsonAccumulator, ProbeModel, PsnrDb,
};
use stainforge_core::gating::extract_cell_expression;
use stainforge_core::model::{load_checkpoint, predict_tiles, Tensor, Translator};
use stainforge_core::synth::read_planted_labels;
use stainforge_core::{CellRow, CellTable, ChannelImage, Error};

use super::preprocess::load_cells;
use super::train::{BEST_CHECKPOINT, FINAL_CHECKPOINT};
use crate::config::{CheckpointChoice, Protocol, RunConfig};
use crate::dataset::{Dataset, DatasetRecord};
use crate::error::{CliError, Result};
use crate::output::write_json_artifact;
use crate::plots;

pub const REPORT_FILE: &str = "report.json";

/// JSON Schema of `report.json`.
pub const REPORT_SCHEMA: &str = include_str!("../../schemas/report.schema.json");

/// Everything the probe protocol needs about one evaluated cell.
struct EvalCell {
    tile: usize,
    table_row: usize,
    predicted: Vec<f64>,
    morphometry: Vec<f64>,
}

fn load_model(cfg: &RunConfig) -> Result<Translator> {
    let dir = cfg.train_dir();
    let final_path = dir.join(FINAL_CHECKPOINT);
    let path = match cfg.evaluate.checkpoint {
        CheckpointChoice::Best if dir.join(BEST_CHECKPOINT).exists() => dir.join(BEST_CHECKPOINT),
        CheckpointChoice::Best => {
            log::warn!("no best checkpoint (no validation split); using the final one");
            final_path
        }
        CheckpointChoice::Final => final_path,
    };
    if !path.exists() {
        return Err(CliError::user(format!("checkpoint {} not found; run `stainforge train` first", path.display())));
    }
    Ok(load_checkpoint(&path)?.0)
}

fn tensor_channels(t: &Tensor, mpp: f64) -> Result<Vec<ChannelImage>> {
    let (m, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    (0..m)
        .map(|j| Ok(ChannelImage::new(w, h, mpp, t.data()[j * h * w..(j + 1) * h * w].iter().map(|v| v.max(0.0)).collect())?))
        .collect()
}

/// Reference labels per table row: GMM pseudo-labels or an external table.
fn reference_labels(cfg: &RunConfig, table: &CellTable) -> Result<Vec<Vec<bool>>> {
    let Some(path) = &cfg.paths.labels else {
        return Ok((0..table.markers.len()).map(|m| table.labels(m)).collect());
    };
    let (names, by_cell) = read_planted_labels(path)?;
    let columns: Vec<usize> = table
        .markers
        .iter()
        .map(|m| {
            names
                .iter()
                .position(|n| n == m)
                .ok_or_else(|| CliError::user(format!("{} has no label_{m} column", path.display())))
        })
        .collect::<Result<_>>()?;
    let mut out = vec![Vec::with_capacity(table.rows.len()); columns.len()];
    for row in &table.rows {
        let labels = by_cell.get(&(row.tile_id.clone(), row.cell_id)).ok_or_else(|| {
            CliError::user(format!("{} has no label for cell {} of `{}`", path.display(), row.cell_id, row.tile_id))
        })?;
        for (m, &c) in columns.iter().enumerate() {
            out[m].push(labels[c]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub report: MetricReport,
    pub tiles: usize,
    pub cells: usize,
}

fn interval(r: stainforge_core::Result<BootstrapInterval>) -> (Option<[f64; 2]>, usize) {
    match r {
        Ok(ci) => (Some([ci.low, ci.high]), ci.skipped),
        Err(e) => {
            log::warn!("bootstrap interval undefined: {e}");
            (None, 0)
        }
    }
}

/// Predict the evaluation tiles and score them at pixel and cell level.
pub fn run(cfg: &RunConfig) -> Result<EvalOutcome> {
    let ev = &cfg.evaluate;
    let dataset = Dataset::load(&cfg.preprocess_dir())?;
    let table = load_cells(cfg)?;
    let markers = table.markers.clone();
    let eval_records = dataset.split(ev.split);
    if eval_records.is_empty() {
        return Err(CliError::user(format!("evaluation split `{:?}` is empty", ev.split).to_lowercase()));
    }
    let fit_records = match ev.protocol {
        Protocol::External => Vec::new(),
        Protocol::InDomain => {
            let v = dataset.split(stainforge_core::Split::Val);
            if v.is_empty() {
                return Err(CliError::user("in-domain protocol needs a non-empty val split for the probe"));
            }
            v
        }
    };
    let records: Vec<&DatasetRecord> = fit_records.iter().chain(&eval_records).copied().collect();
    let n_fit_tiles = fit_records.len();

    let targets: Vec<Tensor> = records.par_iter().map(|r| dataset.target(r)).collect::<Result<_>>()?;
    let preds: Vec<Tensor> = if ev.identity {
        targets.clone()
    } else {
        let model = load_model(cfg)?;
        if model.config.markers != markers.len() {
            return Err(CliError::user(format!(
                "checkpoint predicts {} markers, the cell table has {}",
                model.config.markers,
                markers.len()
            )));
        }
        let planes: Vec<Tensor> = records
            .par_iter()
            .map(|r| Ok(stainforge_core::model::rgb_to_planes(&dataset.he(r)?)))
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = planes.iter().collect();
        predict_tiles(&model, &refs, ev.batch)?
    };

    // pixel metrics over every pixel of every evaluation tile
    let m_count = markers.len();
    let mut pixel = Vec::with_capacity(m_count);
    for m in 0..m_count {
        let mut acc = PearsonAccumulator::new();
        let (mut p_all, mut t_all) = (Vec::new(), Vec::new());
        let mut ssims = Vec::new();
        for k in n_fit_tiles..records.len() {
            let (p, t) = (&preds[k], &targets[k]);
            let (h, w) = (t.shape()[1], t.shape()[2]);
            let (ps, ts) = (&p.data()[m * h * w..(m + 1) * h * w], &t.data()[m * h * w..(m + 1) * h * w]);
            acc.extend(ps, ts);
            p_all.extend_from_slice(ps);
            t_all.extend_from_slice(ts);
            if let Ok(s) = ssim(ps, ts, w, h, 255.0) {
                ssims.push(s);
            }
        }
        let mean_ssim = (!ssims.is_empty()).then(|| ssims.iter().sum::<f64>() / ssims.len() as f64);
        pixel.push((PsnrDb(psnr(&p_all, &t_all, 255.0)), mean_ssim, acc.finish().ok()));
    }

    // predicted single-cell expression, aligned with the cell table
    let index: HashMap<(&str, u32), usize> =
        table.rows.iter().enumerate().map(|(i, r)| ((r.tile_id.as_str(), r.cell_id), i)).collect();
    let per_tile: Vec<Vec<(CellRow, Vec<f64>)>> = records
        .par_iter()
        .zip(&preds)
        .map(|(r, p)| {
            let cells = dataset.cells(r)?;
            let rows = extract_cell_expression(&tensor_channels(p, r.mpp)?, &cells, &r.tile_id)?;
            let morph = morphometry_features(&dataset.he(r)?, &dataset.nuclei(r)?)?;
            rows.into_iter()
                .map(|row| {
                    let f = morph.get(&row.cell_id).map(|f| f.to_vec()).ok_or_else(|| {
                        CliError::Internal(format!("cell {} of `{}` has no nucleus", row.cell_id, r.tile_id))
                    })?;
                    Ok((row, f))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut cells = Vec::new();
    let mut predicted_table = CellTable::new(markers.clone());
    for (tile, rows) in per_tile.into_iter().enumerate() {
        for (row, morphometry) in rows {
            let table_row = *index.get(&(row.tile_id.as_str(), row.cell_id)).ok_or_else(|| {
                CliError::user(format!("cell {} of `{}` is missing from the cell table", row.cell_id, row.tile_id))
            })?;
            cells.push(EvalCell { tile, table_row, predicted: row.mean_expr.clone(), morphometry });
            predicted_table.rows.push(row);
        }
    }
    let labels_by_row = reference_labels(cfg, &table)?;
    let labels: Vec<Vec<bool>> =
        labels_by_row.iter().map(|col| cells.iter().map(|c| col[c.table_row]).collect()).collect();

    let eval_cells: Vec<usize> = (0..cells.len()).filter(|&i| cells[i].tile >= n_fit_tiles).collect();
    let (train, test) = match ev.protocol {
        Protocol::External => {
            let (a, b) = split_external(eval_cells.len(), ev.train_fraction, cfg.stage_seed("eval/split"));
            (a.into_iter().map(|i| eval_cells[i]).collect::<Vec<_>>(), b.into_iter().map(|i| eval_cells[i]).collect())
        }
        Protocol::InDomain => ((0..cells.len()).filter(|&i| cells[i].tile < n_fit_tiles).collect(), eval_cells.clone()),
    };
    if train.is_empty() || test.is_empty() {
        return Err(CliError::user(format!("probe split is empty ({} train, {} test cells)", train.len(), test.len())));
    }

    let features: Vec<Vec<f64>> = cells.iter().map(|c| c.predicted.clone()).collect();
    let bootstrap = ev.bootstrap(cfg.seed);
    // test positions grouped by tile for tile-level resampling
    let mut by_tile: Vec<Vec<usize>> = vec![Vec::new(); records.len()];
    for (pos, &i) in test.iter().enumerate() {
        by_tile[cells[i].tile].push(pos);
    }
    by_tile.retain(|v| !v.is_empty());

    let mut marker_reports = Vec::with_capacity(m_count);
    let mut counts = Vec::new();
    for (m, name) in markers.iter().enumerate() {
        let y = &labels[m];
        let mut cell = CellMetrics { n_train: train.len(), n_test: test.len(), ..Default::default() };
        match ProbeModel::fit_and_score(&features, y, &train, &test, &ev.probe) {
            Ok(scores) => {
                let truth: Vec<bool> = test.iter().map(|&i| y[i]).collect();
                let probs = &scores.probabilities;
                let threshold = ev.probe.threshold;
                let (auprc_ci, skipped_a) = interval(bootstrap_ci(
                    |idx: &[usize]| {
                        let s: Vec<f64> = idx.iter().map(|&k| probs[k]).collect();
                        let t: Vec<bool> = idx.iter().map(|&k| truth[k]).collect();
                        auprc(&s, &t)
                    },
                    &by_tile,
                    &bootstrap,
                ));
                let (f1_ci, skipped_f) = interval(bootstrap_ci(
                    |idx: &[usize]| {
                        let p: Vec<bool> = idx.iter().map(|&k| probs[k] > threshold).collect();
                        let t: Vec<bool> = idx.iter().map(|&k| truth[k]).collect();
                        Some(f1_binary(&p, &t))
                    },
                    &by_tile,
                    &bootstrap,
                ));
                cell.auprc = scores.auprc;
                cell.f1 = Some(scores.f1);
                cell.auprc_ci = auprc_ci;
                cell.f1_ci = f1_ci;
                cell.bootstrap_skipped = skipped_a.max(skipped_f);

                let mut predicted_counts = vec![0.0; records.len()];
                let mut reference_counts = vec![0.0; records.len()];
                for (i, c) in cells.iter().enumerate() {
                    if c.tile >= n_fit_tiles {
                        predicted_counts[c.tile] += f64::from(u8::from(scores.model.predict_proba(&c.predicted) > threshold));
                        reference_counts[c.tile] += f64::from(u8::from(y[i]));
                    }
                }
                match cellcount_correlation(&predicted_counts[n_fit_tiles..], &reference_counts[n_fit_tiles..]) {
                    Ok(cc) => counts.push((name.clone(), cc, predicted_counts[n_fit_tiles..].to_vec(), reference_counts[n_fit_tiles..].to_vec())),
                    Err(e) => log::warn!("count correlation for {name}: {e}"),
                }
            }
            Err(Error::Degenerate(reason)) => cell.skipped = Some(reason),
            Err(e) => return Err(e.into()),
        }
        let (psnr, ssim, pearson) = &pixel[m];
        marker_reports.push(MarkerReport { marker: name.clone(), psnr: Some(*psnr), ssim: *ssim, pearson: *pearson, cell });
    }

    let real: Vec<Vec<f64>> = cells.iter().map(|c| table.rows[c.table_row].mean_expr.clone()).collect();
    let morph: Vec<Vec<f64>> = cells.iter().map(|c| c.morphometry.clone()).collect();
    let baselines = baseline_suite(&markers, &real, &morph, &labels, &train, &test, &ev.probe, cfg.stage_seed("eval/baselines"))?;

    let report = MetricReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        protocol: ev.protocol.name().to_string(),
        probe: ev.probe.clone(),
        bootstrap: bootstrap.clone(),
        bootstrap_refits_probe: false,
        macro_avg: MacroAverages::from_markers(&marker_reports),
        markers: marker_reports,
        baselines,
        count_correlation: counts.iter().map(|(n, c, ..)| (n.clone(), c.clone())).collect::<Vec<(String, CountCorrelation)>>(),
    };

    let dir = cfg.evaluate_dir();
    std::fs::create_dir_all(&dir)?;
    let mut json = report.to_json()?;
    json.push('\n');
    stainforge_core::io::write_atomic(&dir.join(REPORT_FILE), json.as_bytes())?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv, &cfg.preamble("metric report"))?;
    stainforge_core::io::write_atomic(&dir.join("report.csv"), &csv)?;
    let mut cells_csv = Vec::new();
    predicted_table.write_csv(&mut cells_csv, &cfg.preamble("predicted cell expression"))?;
    stainforge_core::io::write_atomic(&dir.join("predicted_cells.csv"), &cells_csv)?;
    if ev.plots {
        write_plots(&dir, &report, &counts)?;
    }
    write_json_artifact(
        &dir.join("summary.json"),
        &crate::output::Artifact::new(cfg, "evaluate", serde_json::json!({"tiles": eval_records.len(), "cells": test.len() + train.len()})),
    )?;
    Ok(EvalOutcome { report, tiles: eval_records.len(), cells: eval_cells.len() })
}

fn write_plots(
    dir: &std::path::Path,
    report: &MetricReport,
    counts: &[(String, CountCorrelation, Vec<f64>, Vec<f64>)],
) -> Result<()> {
    let names: Vec<String> = report.markers.iter().map(|m| m.marker.clone()).collect();
    let au: Vec<Option<f64>> = report.markers.iter().map(|m| m.cell.auprc).collect();
    let au_ci: Vec<Option<[f64; 2]>> = report.markers.iter().map(|m| m.cell.auprc_ci).collect();
    let f1: Vec<Option<f64>> = report.markers.iter().map(|m| m.cell.f1).collect();
    let f1_ci: Vec<Option<[f64; 2]>> = report.markers.iter().map(|m| m.cell.f1_ci).collect();
    let write = |name: &str, svg: String| stainforge_core::io::write_atomic(&dir.join(name), svg.as_bytes());
    write("auprc.svg", plots::bar_chart("Cell-level AUPRC", "AUPRC", &names, &au, &au_ci))?;
    write("f1.svg", plots::bar_chart("Cell-level F1", "F1", &names, &f1, &f1_ci))?;
    for (name, cc, pred, reference) in counts {
        let fit = cc.slope.zip(cc.intercept);
        let title = format!("{name} positive cells per tile (r = {})", cc.pearson.map_or("n/a".into(), |r| format!("{r:.3}")));
        write(&format!("counts_{name}.svg"), plots::scatter(&title, "predicted", "reference", pred, reference, fit))?;
    }
    Ok(())
}
