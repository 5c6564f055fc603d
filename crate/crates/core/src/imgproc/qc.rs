use serde::{Deserialize, Serialize};

use super::{ChannelImage, DensityGrid, TissueMask};
use crate::stats::pearson;

/// Acceptance thresholds; every comparison is strict (`value > threshold`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QcThresholds {
    pub density_pearson_min: f64,
    pub tissue_iou_min: f64,
    pub tissue_fraction_min: f64,
    /// Raw intensity above which an empty-channel pixel counts as hot.
    pub empty_intensity: f64,
    /// Maximum tolerated fraction of hot empty-channel pixels.
    pub empty_fraction: f64,
}

impl Default for QcThresholds {
    fn default() -> Self {
        Self {
            density_pearson_min: 0.25,
            tissue_iou_min: 0.5,
            tissue_fraction_min: 0.40,
            empty_intensity: 2000.0,
            empty_fraction: 0.05,
        }
    }
}

/// Outcome of the tile checks. Criteria that were not evaluated are `None`
/// and do not affect `accepted`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileQcReport {
    pub tissue_fraction: f64,
    pub density_pearson: Option<f64>,
    pub tissue_iou: Option<f64>,
    pub empty_channel_pass: Option<bool>,
    pub accepted: bool,
    pub reasons: Vec<String>,
}

impl TileQcReport {
    /// Report with only the tissue-fraction criterion.
    pub fn tissue_only(tissue_fraction: f64, thresholds: &QcThresholds) -> Self {
        let mut report = Self {
            tissue_fraction,
            density_pearson: None,
            tissue_iou: None,
            empty_channel_pass: None,
            accepted: true,
            reasons: Vec::new(),
        };
        report.check_fraction(thresholds);
        report
    }

    pub fn with_empty_channel(mut self, pass: bool) -> Self {
        self.empty_channel_pass = Some(pass);
        if !pass {
            self.reject("empty channel above noise threshold".to_string());
        }
        self
    }

    fn reject(&mut self, reason: String) {
        self.accepted = false;
        self.reasons.push(reason);
    }

    fn check_fraction(&mut self, t: &QcThresholds) {
        if !(self.tissue_fraction > t.tissue_fraction_min) {
            self.reject(format!(
                "tissue fraction {:.3} <= {}",
                self.tissue_fraction, t.tissue_fraction_min
            ));
        }
    }
}

/// Intersection over union of two binary masks; two empty masks give 0.
pub fn mask_iou(a: &TissueMask, b: &TissueMask) -> f64 {
    assert_eq!(a.mask.len(), b.mask.len(), "tissue masks differ in size");
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.mask.iter().zip(&b.mask) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Alignment check for consecutive-section pairs: nuclei density
/// correlation, tissue overlap and H&E tissue fraction.
pub fn consecutive_alignment_qc(
    he_density: &DensityGrid,
    mif_density: &DensityGrid,
    tissue_he: &TissueMask,
    tissue_mif: &TissueMask,
    thresholds: &QcThresholds,
) -> TileQcReport {
    let mut report = TileQcReport::tissue_only(tissue_he.fraction(), thresholds);

    report.density_pearson = pearson(&he_density.counts, &mif_density.counts);
    match report.density_pearson {
        Some(r) if r > thresholds.density_pearson_min => {}
        Some(r) => report.reject(format!("density pearson {r:.3} <= {}", thresholds.density_pearson_min)),
        None => report.reject("density pearson undefined (zero-variance grid)".to_string()),
    }

    let iou = mask_iou(tissue_he, tissue_mif);
    report.tissue_iou = Some(iou);
    if !(iou > thresholds.tissue_iou_min) {
        report.reject(format!("tissue IoU {iou:.3} <= {}", thresholds.tissue_iou_min));
    }
    report
}

/// Passes unless the fraction of pixels above `intensity_threshold` exceeds
/// `fraction_threshold` (strictly).
pub fn empty_channel_qc(channel: &ChannelImage, intensity_threshold: f64, fraction_threshold: f64) -> bool {
    let hot = channel.pixels().iter().filter(|&&v| v > intensity_threshold).count();
    let fraction = hot as f64 / channel.pixels().len() as f64;
    !(fraction > fraction_threshold)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[bool]) -> TissueMask {
        TissueMask { width: bits.len(), height: 1, threshold: 0, mask: bits.to_vec() }
    }

    fn grid(counts: &[f64]) -> DensityGrid {
        DensityGrid { size: 2, counts: counts.to_vec() }
    }

    #[test]
    fn identical_inputs_accepted() {
        let g = grid(&[1.0, 3.0, 0.0, 2.0]);
        let m = mask(&[true, true, true, false, false, true, true, true, false, true]);
        assert!((m.fraction() - 0.7).abs() < 1e-12);
        let r = consecutive_alignment_qc(&g, &g, &m, &m, &QcThresholds::default());
        assert!(r.accepted, "{:?}", r.reasons);
        assert!((r.density_pearson.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(r.tissue_iou, Some(1.0));
    }

    #[test]
    fn disjoint_masks_rejected() {
        let g = grid(&[1.0, 3.0, 0.0, 2.0]);
        let a = mask(&[true, true, true, false, false, false]);
        let b = mask(&[false, false, false, true, true, true]);
        let r = consecutive_alignment_qc(&g, &g, &a, &b, &QcThresholds::default());
        assert_eq!(r.tissue_iou, Some(0.0));
        assert!(!r.accepted);
    }

    #[test]
    fn linear_grids_correlate_perfectly_and_symmetrically() {
        let (x, y) = (grid(&[1.0, 2.0, 3.0, 4.0]), grid(&[2.0, 4.0, 6.0, 8.0]));
        let m = mask(&[true; 4]);
        let t = QcThresholds::default();
        let a = consecutive_alignment_qc(&x, &y, &m, &m, &t);
        let b = consecutive_alignment_qc(&y, &x, &m, &m, &t);
        assert!((a.density_pearson.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(a.density_pearson, b.density_pearson);
    }

    #[test]
    fn zero_variance_grid_flags_reason() {
        let flat = grid(&[1.0; 4]);
        let m = mask(&[true; 4]);
        let r = consecutive_alignment_qc(&flat, &flat, &m, &m, &QcThresholds::default());
        assert_eq!(r.density_pearson, None);
        assert!(!r.accepted);
        assert!(r.reasons.iter().any(|s| s.contains("undefined")));
    }

    #[test]
    fn empty_channel_cases() {
        let zeros = ChannelImage::filled(10, 10, 0.5, 0.0).unwrap();
        assert!(empty_channel_qc(&zeros, 100.0, 0.01));
        let hot = ChannelImage::filled(10, 10, 0.5, 101.0).unwrap();
        assert!(!empty_channel_qc(&hot, 100.0, 0.01));
        // exactly 1 of 100 pixels hot at a 1% budget passes (strict inequality)
        let mut px = vec![0.0; 100];
        px[17] = 500.0;
        let one = ChannelImage::new(10, 10, 0.5, px).unwrap();
        assert!(empty_channel_qc(&one, 100.0, 0.01));
    }
}
