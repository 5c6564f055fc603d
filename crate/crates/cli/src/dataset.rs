//! Preprocessed dataset index shared by the train and evaluate stages.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stainforge_core::io::{read_channels, read_mask, read_rgb, Split};
use stainforge_core::model::{rgb_to_planes, Tensor, TrainSample};
use stainforge_core::{InstanceMask, RgbImage};

use crate::error::{CliError, Result};

pub const DATASET_FILE: &str = "dataset.jsonl";

/// One accepted tile. Relative paths are relative to the dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub tile_id: String,
    pub slide_id: String,
    pub split: Split,
    pub mpp: f64,
    pub he_path: PathBuf,
    /// Normalized marker channels, `[0, 255]`, f32 TIFF.
    pub target_path: PathBuf,
    pub nuclei_path: PathBuf,
    /// Dilated cell instances used for expression extraction.
    pub cells_path: PathBuf,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub records: Vec<DatasetRecord>,
}

impl Dataset {
    pub fn write(dir: &Path, records: &[DatasetRecord]) -> Result<()> {
        let mut buf = Vec::new();
        for r in records {
            serde_json::to_writer(&mut buf, r)?;
            buf.write_all(b"\n")?;
        }
        stainforge_core::io::write_atomic(&dir.join(DATASET_FILE), &buf)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(DATASET_FILE);
        let file = std::fs::File::open(&path).map_err(|_| {
            CliError::user(format!("preprocessed dataset {} not found; run `stainforge preprocess` first", path.display()))
        })?;
        let mut records = Vec::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: DatasetRecord = serde_json::from_str(&line)
                .map_err(|e| CliError::user(format!("{} line {}: {e}", path.display(), i + 1)))?;
            records.push(r);
        }
        Ok(Self { dir: dir.to_path_buf(), records })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        }
    }

    pub fn split(&self, split: Split) -> Vec<&DatasetRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn he(&self, r: &DatasetRecord) -> Result<RgbImage> {
        Ok(read_rgb(&self.resolve(&r.he_path))?)
    }

    pub fn target(&self, r: &DatasetRecord) -> Result<Tensor> {
        let chans = read_channels(&self.resolve(&r.target_path), r.mpp)?;
        let (h, w) = (chans[0].height(), chans[0].width());
        let mut data = Vec::with_capacity(chans.len() * h * w);
        for c in &chans {
            data.extend_from_slice(c.pixels());
        }
        Ok(Tensor::new(vec![chans.len(), h, w], data)?)
    }

    pub fn cells(&self, r: &DatasetRecord) -> Result<InstanceMask> {
        Ok(read_mask(&self.resolve(&r.cells_path), r.mpp)?)
    }

    pub fn nuclei(&self, r: &DatasetRecord) -> Result<InstanceMask> {
        Ok(read_mask(&self.resolve(&r.nuclei_path), r.mpp)?)
    }

    pub fn samples(&self, records: &[&DatasetRecord]) -> Result<Vec<TrainSample>> {
        use rayon::prelude::*;
        records
            .par_iter()
            .map(|r| Ok(TrainSample { he: rgb_to_planes(&self.he(r)?), target: self.target(r)? }))
            .collect()
    }
}
