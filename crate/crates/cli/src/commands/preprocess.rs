use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use stainforge_core::gating::{extract_cell_expression, fit_gmm_1d_with, gate_marker, GmmFit, GmmOptions, Hierarchy};
use stainforge_core::imgproc::{
    af_subtract, consecutive_alignment_qc, dilate_nuclei, empty_channel_qc, fluorescence_tissue_mask,
    normalize_channel, nuclei_density_map, tissue_mask, ChannelStatsAccumulator, NormalizeDirection,
};
use stainforge_core::io::{read_channels, read_manifest, read_mask, read_rgb, write_channels, write_mask, PixelFormat};
use stainforge_core::{ChannelImage, ChannelStats, CellTable, Error, InstanceMask, ManifestRecord, PanelConfig, Split, TileQcReport};

use crate::config::{GatingSpace, QcMode, RunConfig};
use crate::dataset::{Dataset, DatasetRecord};
use crate::error::{CliError, Result};
use crate::output::{write_json_artifact, Artifact};

pub const CELLS_FILE: &str = "cells.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedTile {
    pub tile_id: String,
    pub reasons: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerGating {
    pub marker: String,
    pub fit: GmmFit,
    pub positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub tiles_total: usize,
    pub tiles_kept: usize,
    pub dropped: Vec<DroppedTile>,
    pub cells: usize,
    pub markers: Vec<String>,
    pub channel_stats: ChannelStats,
    pub gating: Vec<MarkerGating>,
}

struct TileData {
    record: ManifestRecord,
    qc: TileQcReport,
    corrected: Vec<ChannelImage>,
    nuclei: InstanceMask,
}

fn require(path: &std::path::Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::user(format!("file not found: {}", path.display())))
    }
}

fn load_tile(cfg: &RunConfig, panel: &PanelConfig, r: &ManifestRecord) -> Result<TileData> {
    let he = read_rgb(&r.he_path)?;
    let channels = read_channels(&r.mif_path, r.mpp)?;
    if channels.len() != panel.channels.len() {
        return Err(CliError::user(format!(
            "tile `{}`: {} has {} channels but the panel lists {}",
            r.tile_id,
            r.mif_path.display(),
            channels.len(),
            panel.channels.len()
        )));
    }
    let nuclei_path = r.nuclei_path.as_ref().expect("checked before loading");
    let nuclei = read_mask(nuclei_path, r.mpp)?;
    let (w, h) = (he.width(), he.height());
    if channels.iter().any(|c| c.width() != w || c.height() != h) || nuclei.width() != w || nuclei.height() != h {
        return Err(CliError::user(format!("tile `{}`: H&E, mIF and nuclei mask differ in size", r.tile_id)));
    }

    let p = &cfg.preprocess;
    let he_tissue = tissue_mask(&he)?;
    let mut qc = match p.qc_mode {
        QcMode::Tissue => TileQcReport::tissue_only(he_tissue.fraction(), &p.qc),
        QcMode::Consecutive => {
            let mif_nuclei = match &r.mif_nuclei_path {
                Some(path) => read_mask(path, r.mpp)?,
                None => nuclei.clone(),
            };
            let reference = panel.af_channel.as_ref().or(panel.nuclear_channel.as_ref());
            let mif_channel = match reference {
                Some(name) => &channels[panel.channel_index(name)?],
                None => &channels[0],
            };
            consecutive_alignment_qc(
                &nuclei_density_map(&nuclei, p.density_grid),
                &nuclei_density_map(&mif_nuclei, p.density_grid),
                &he_tissue,
                &fluorescence_tissue_mask(mif_channel)?,
                &p.qc,
            )
        }
    };
    if let Some(empty) = &panel.empty_channel {
        let pass = empty_channel_qc(&channels[panel.channel_index(empty)?], p.qc.empty_intensity, p.qc.empty_fraction);
        qc = qc.with_empty_channel(pass);
    }

    let af = panel.af_channel.as_ref().map(|n| panel.channel_index(n)).transpose()?;
    let corrected = panel
        .markers
        .iter()
        .map(|m| {
            let ch = &channels[panel.channel_index(&m.name)?];
            match af {
                Some(a) => Ok(af_subtract(ch, &channels[a], m.af)?),
                None if m.af.lambda == 0.0 && m.af.b == 0.0 => Ok(ch.clone()),
                None => Err(CliError::user(format!("marker `{}` has AF parameters but the panel has no AF channel", m.name))),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TileData { record: r.clone(), qc, corrected, nuclei })
}

fn qc_csv(cfg: &RunConfig, tiles: &[TileData]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for line in cfg.preamble("qc") {
        buf.extend_from_slice(format!("# {line}\n").as_bytes());
    }
    let mut w = csv::Writer::from_writer(buf);
    let to_io = |e: csv::Error| CliError::Internal(e.to_string());
    w.write_record(["tile_id", "split", "accepted", "tissue_fraction", "density_pearson", "tissue_iou", "empty_channel_pass", "reasons"])
        .map_err(to_io)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for t in tiles {
        let q = &t.qc;
        w.write_record([
            t.record.tile_id.clone(),
            format!("{:?}", t.record.split).to_lowercase(),
            q.accepted.to_string(),
            q.tissue_fraction.to_string(),
            opt(q.density_pearson),
            opt(q.tissue_iou),
            q.empty_channel_pass.map(|b| b.to_string()).unwrap_or_default(),
            q.reasons.join("; "),
        ])
        .map_err(to_io)?;
    }
    w.into_inner().map_err(|e| CliError::Internal(e.to_string()))
}

/// QC, AF subtraction, normalization, cell expression and GMM gating of
/// every manifest tile.
pub fn run(cfg: &RunConfig) -> Result<PreprocessSummary> {
    let panel = PanelConfig::load(&cfg.paths.panel)?;
    let manifest = read_manifest(&cfg.paths.manifest).map_err(|e| match e {
        Error::MissingFile(p) => CliError::user(format!("manifest not found: {}", p.display())),
        e => e.into(),
    })?;
    for r in &manifest {
        require(&r.he_path)?;
        require(&r.mif_path)?;
        let nuclei = r
            .nuclei_path
            .as_ref()
            .ok_or_else(|| CliError::user(format!("tile `{}` has no nuclei_path", r.tile_id)))?;
        require(nuclei)?;
        if let Some(p) = &r.mif_nuclei_path {
            require(p)?;
        }
    }
    let out = cfg.preprocess_dir();
    for sub in ["targets", "cells"] {
        std::fs::create_dir_all(out.join(sub))?;
    }

    let tiles: Vec<TileData> = manifest.par_iter().map(|r| load_tile(cfg, &panel, r)).collect::<Result<_>>()?;
    let markers = panel.marker_names();

    let mut acc = ChannelStatsAccumulator::new(markers.clone());
    let mut fit_tiles = 0;
    for t in tiles.iter().filter(|t| t.qc.accepted && t.record.split == Split::Train) {
        fit_tiles += 1;
        for (m, c) in t.corrected.iter().enumerate() {
            acc.push(m, c);
        }
    }
    if fit_tiles == 0 {
        return Err(CliError::user("no accepted training tiles to fit normalization statistics on"));
    }
    let mut stats = acc.finish()?;
    for (m, marker) in panel.markers.iter().enumerate() {
        if let Some(q) = marker.q999 {
            stats.q999[m] = q;
        }
    }

    let p = &cfg.preprocess;
    let kept: Vec<&TileData> = tiles.iter().filter(|t| t.qc.accepted).collect();
    let per_tile: Vec<(DatasetRecord, Vec<stainforge_core::CellRow>)> = kept
        .par_iter()
        .map(|t| {
            let id = &t.record.tile_id;
            let normalized = t
                .corrected
                .iter()
                .zip(&stats.q999)
                .map(|(c, &q)| normalize_channel(c, q, NormalizeDirection::Forward, panel.log_base))
                .collect::<stainforge_core::Result<Vec<_>>>()?;
            let target_path = PathBuf::from(format!("targets/{id}.tiff"));
            write_channels(&out.join(&target_path), &normalized, PixelFormat::F32)?;
            let cells = dilate_nuclei(&t.nuclei, p.dilation_um);
            let cells_path = PathBuf::from(format!("cells/{id}.tiff"));
            write_mask(&out.join(&cells_path), &cells)?;
            let source = match p.gating_space {
                GatingSpace::Corrected => &t.corrected,
                GatingSpace::Normalized => &normalized,
            };
            let rows = extract_cell_expression(source, &cells, id)?;
            let record = DatasetRecord {
                tile_id: id.clone(),
                slide_id: t.record.slide_id.clone(),
                split: t.record.split,
                mpp: t.record.mpp,
                he_path: t.record.he_path.clone(),
                target_path,
                nuclei_path: t.record.nuclei_path.clone().expect("checked"),
                cells_path,
            };
            Ok((record, rows))
        })
        .collect::<Result<_>>()?;

    let mut table = CellTable::new(markers.clone());
    let mut records = Vec::with_capacity(per_tile.len());
    let mut fit_rows = Vec::new();
    for (record, rows) in per_tile {
        let fit_split = matches!(record.split, Split::Train | Split::Val);
        for row in rows {
            if fit_split {
                fit_rows.push(table.rows.len());
            }
            table.rows.push(row);
        }
        records.push(record);
    }

    let mut gating = Vec::with_capacity(markers.len());
    for (m, name) in markers.iter().enumerate() {
        let values: Vec<f64> = fit_rows.iter().map(|&i| table.rows[i].mean_expr[m]).collect();
        let options = GmmOptions { seed: cfg.stage_seed(&format!("gating/{name}")), ..p.gmm };
        let fit = fit_gmm_1d_with(&values, &options)
            .map_err(|e| CliError::user(format!("gating `{name}` on {} train/val cells: {e}", values.len())))?;
        gate_marker(&mut table, m, &fit, p.posterior_cutoff);
        gating.push(MarkerGating { marker: name.clone(), fit, positives: 0 });
    }
    Hierarchy::new(&panel.hierarchy, &markers)?.apply(&mut table);
    for (m, g) in gating.iter_mut().enumerate() {
        g.positives = table.labels(m).iter().filter(|&&l| l).count();
    }

    let mut csv = Vec::new();
    table.write_csv(&mut csv, &cfg.preamble("cell table"))?;
    stainforge_core::io::write_atomic(&out.join(CELLS_FILE), &csv)?;
    stainforge_core::io::write_atomic(&out.join("qc.csv"), &qc_csv(cfg, &tiles)?)?;
    Dataset::write(&out, &records)?;

    let summary = PreprocessSummary {
        tiles_total: tiles.len(),
        tiles_kept: records.len(),
        dropped: tiles
            .iter()
            .filter(|t| !t.qc.accepted)
            .map(|t| DroppedTile { tile_id: t.record.tile_id.clone(), reasons: t.qc.reasons.clone() })
            .collect(),
        cells: table.rows.len(),
        markers,
        channel_stats: stats,
        gating,
    };
    write_json_artifact(&out.join("summary.json"), &Artifact::new(cfg, "preprocess", &summary))?;
    log::info!(
        "preprocess: kept {}/{} tiles, {} cells",
        summary.tiles_kept,
        summary.tiles_total,
        summary.cells
    );
    Ok(summary)
}

/// Cell table written by [`run`].
pub fn load_cells(cfg: &RunConfig) -> Result<CellTable> {
    let path = cfg.preprocess_dir().join(CELLS_FILE);
    if !path.exists() {
        return Err(CliError::user(format!("cell table {} not found; run `stainforge preprocess` first", path.display())));
    }
    Ok(CellTable::load_csv(&path)?)
}

/// Normalization statistics recorded by [`run`].
pub fn load_summary(cfg: &RunConfig) -> Result<PreprocessSummary> {
    let path = cfg.preprocess_dir().join("summary.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|_| CliError::user(format!("{} not found; run `stainforge preprocess` first", path.display())))?;
    let artifact: Artifact<PreprocessSummary> = serde_json::from_str(&text)?;
    Ok(artifact.data)
}
