//! Deterministic image-domain preprocessing.

mod intensity;
mod morphology;
mod otsu;
mod qc;

pub use intensity::{
    af_subtract, fit_channel_stats, normalize_channel, ChannelStats, ChannelStatsAccumulator,
    LogBase, NormalizeDirection, FOREGROUND_QUANTILE,
};
pub use morphology::{centroids, dilate_nuclei, nuclei_density_map, DensityGrid};
pub use otsu::{fluorescence_tissue_mask, grayscale, otsu_threshold, tissue_mask, TissueMask};
pub use qc::{consecutive_alignment_qc, empty_channel_qc, mask_iou, QcThresholds, TileQcReport};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Single-channel real-valued intensity image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelImage {
    width: usize,
    height: usize,
    mpp: f64,
    pixels: Vec<f64>,
}

impl ChannelImage {
    pub fn new(width: usize, height: usize, mpp: f64, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!("image must be at least 1x1, got {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        if !(mpp > 0.0) {
            return Err(Error::Invalid(format!("mpp must be positive, got {mpp}")));
        }
        if let Some(v) = pixels.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::Invalid(format!("intensity {v} is negative or NaN")));
        }
        Ok(Self { width, height, mpp, pixels })
    }

    pub fn filled(width: usize, height: usize, mpp: f64, value: f64) -> Result<Self> {
        Self::new(width, height, mpp, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn mpp(&self) -> f64 {
        self.mpp
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn same_shape(&self, other: &ChannelImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub(crate) fn from_parts_unchecked(width: usize, height: usize, mpp: f64, pixels: Vec<f64>) -> Self {
        debug_assert_eq!(pixels.len(), width * height);
        Self { width, height, mpp, pixels }
    }
}

/// 8-bit RGB tile, interleaved row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{} bytes for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Nucleus or cell instance labels: 0 is background, k >= 1 is instance k.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMask {
    width: usize,
    height: usize,
    mpp: f64,
    labels: Vec<u32>,
}

impl InstanceMask {
    pub fn new(width: usize, height: usize, mpp: f64, labels: Vec<u32>) -> Result<Self> {
        if width == 0 || height == 0 || labels.len() != width * height {
            return Err(Error::Shape(format!(
                "{} labels for a {width}x{height} mask",
                labels.len()
            )));
        }
        if !(mpp > 0.0) {
            return Err(Error::Invalid(format!("mpp must be positive, got {mpp}")));
        }
        Ok(Self { width, height, mpp, labels })
    }

    pub fn empty(width: usize, height: usize, mpp: f64) -> Result<Self> {
        Self::new(width, height, mpp, vec![0; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn mpp(&self) -> f64 {
        self.mpp
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, label: u32) {
        self.labels[y * self.width + x] = label;
    }

    /// Sorted distinct positive instance ids.
    pub fn instance_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.labels.iter().copied().filter(|&l| l > 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Pixel count per instance id, sorted by id.
    pub fn areas(&self) -> std::collections::BTreeMap<u32, usize> {
        let mut areas = std::collections::BTreeMap::new();
        for &l in self.labels.iter().filter(|&&l| l > 0) {
            *areas.entry(l).or_insert(0) += 1;
        }
        areas
    }
}

/// Autofluorescence subtraction parameters for one channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AfParams {
    pub lambda: f64,
    pub b: f64,
}

impl Default for AfParams {
    fn default() -> Self {
        Self { lambda: 0.0, b: 0.0 }
    }
}

impl AfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Invalid(format!("AF lambda must be >= 0, got {}", self.lambda)));
        }
        if !self.b.is_finite() {
            return Err(Error::Invalid(format!("AF offset must be finite, got {}", self.b)));
        }
        Ok(())
    }
}
