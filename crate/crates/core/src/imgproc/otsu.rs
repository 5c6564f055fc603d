use super::{ChannelImage, RgbImage};
use crate::{Error, Result};

/// Otsu threshold over a 256-bin histogram.
///
/// Classes are `bins < t` and `bins >= t`; the returned `t` maximizes the
/// between-class variance, ties going to the smallest `t`. A histogram with a
/// single occupied bin returns that bin.
pub fn otsu_threshold(histogram: &[u64]) -> Result<u8> {
    if histogram.len() != 256 {
        return Err(Error::Shape(format!("histogram has {} bins, expected 256", histogram.len())));
    }
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return Err(Error::EmptyHistogram);
    }
    let occupied: Vec<usize> = (0..256).filter(|&i| histogram[i] > 0).collect();
    if occupied.len() == 1 {
        return Ok(occupied[0] as u8);
    }

    let total_sum: u128 = histogram.iter().enumerate().map(|(i, &c)| i as u128 * c as u128).sum();
    let (n, s) = (total as i128, total_sum as i128);
    let mut best_t = 0usize;
    let mut best = -1.0f64;
    let (mut n0, mut s0) = (0i128, 0i128);
    for t in 0..256usize {
        if t > 0 {
            n0 += histogram[t - 1] as i128;
            s0 += (t as i128 - 1) * histogram[t - 1] as i128;
        }
        let n1 = n - n0;
        // w0 w1 (mu0 - mu1)^2 = (N s0 - n0 S)^2 / (N^2 n0 n1)
        let score = if n0 == 0 || n1 == 0 {
            0.0
        } else {
            let d = (n * s0 - n0 * s) as f64;
            d * d / (n0 as f64 * n1 as f64)
        };
        if score > best {
            best = score;
            best_t = t;
        }
    }
    Ok(best_t as u8)
}

/// Luma grayscale `round(0.299 R + 0.587 G + 0.114 B)`.
pub fn grayscale(rgb: [u8; 3]) -> u8 {
    let g = 0.299 * rgb[0] as f64 + 0.587 * rgb[1] as f64 + 0.114 * rgb[2] as f64;
    g.round().clamp(0.0, 255.0) as u8
}

#[derive(Debug, Clone, PartialEq)]
pub struct TissueMask {
    pub width: usize,
    pub height: usize,
    pub threshold: u8,
    pub mask: Vec<bool>,
}

impl TissueMask {
    pub fn fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }
}

fn histogram(values: impl Iterator<Item = u8>) -> [u64; 256] {
    let mut hist = [0u64; 256];
    for v in values {
        hist[v as usize] += 1;
    }
    hist
}

/// Tissue is darker than the slide background in H&E: `gray < otsu`.
pub fn tissue_mask(he: &RgbImage) -> Result<TissueMask> {
    let gray: Vec<u8> = he.data().chunks_exact(3).map(|p| grayscale([p[0], p[1], p[2]])).collect();
    let threshold = otsu_threshold(&histogram(gray.iter().copied()))?;
    Ok(TissueMask {
        width: he.width(),
        height: he.height(),
        threshold,
        mask: gray.iter().map(|&g| g < threshold).collect(),
    })
}

/// Tissue mask of a fluorescence channel (tissue is brighter than background).
/// The channel is rescaled to 0..=255 by its maximum before thresholding.
pub fn fluorescence_tissue_mask(channel: &ChannelImage) -> Result<TissueMask> {
    let max = channel.pixels().iter().copied().fold(0.0f64, f64::max);
    let scaled: Vec<u8> = channel
        .pixels()
        .iter()
        .map(|&v| if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 })
        .collect();
    let threshold = otsu_threshold(&histogram(scaled.iter().copied()))?;
    // a single-level image has no bright class
    let split = scaled.iter().any(|&g| g < threshold);
    Ok(TissueMask {
        width: channel.width(),
        height: channel.height(),
        threshold,
        mask: scaled.iter().map(|&g| split && g >= threshold).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Brute force: evaluate w0 w1 (mu0 - mu1)^2 from scratch at every t.
    fn otsu_oracle(hist: &[u64]) -> u8 {
        let total: f64 = hist.iter().map(|&c| c as f64).sum();
        let mut best = (-1.0, 0usize);
        for t in 0..256 {
            let (mut c0, mut m0, mut c1, mut m1) = (0.0, 0.0, 0.0, 0.0);
            for (i, &c) in hist.iter().enumerate() {
                if i < t {
                    c0 += c as f64;
                    m0 += i as f64 * c as f64;
                } else {
                    c1 += c as f64;
                    m1 += i as f64 * c as f64;
                }
            }
            let v = if c0 == 0.0 || c1 == 0.0 {
                0.0
            } else {
                let (w0, w1) = (c0 / total, c1 / total);
                w0 * w1 * (m0 / c0 - m1 / c1).powi(2)
            };
            if v > best.0 {
                best = (v, t);
            }
        }
        best.1 as u8
    }

    #[test]
    fn two_spikes_split_between() {
        let mut h = [0u64; 256];
        h[10] = 100;
        h[200] = 100;
        let t = otsu_threshold(&h).unwrap();
        assert_eq!(t, otsu_oracle(&h));
        assert_eq!(t, 11);
    }

    #[test]
    fn single_spike_returns_level() {
        let mut h = [0u64; 256];
        h[50] = 1000;
        assert_eq!(otsu_threshold(&h).unwrap(), 50);
    }

    #[test]
    fn uniform_histogram() {
        let h = [10u64; 256];
        assert_eq!(otsu_oracle(&h), 128);
        assert_eq!(otsu_threshold(&h).unwrap(), 128);
    }

    #[test]
    fn empty_histogram_errors() {
        assert!(matches!(otsu_threshold(&[0u64; 256]), Err(Error::EmptyHistogram)));
    }

    #[test]
    fn tissue_mask_cases() {
        let white = RgbImage::filled(8, 8, [255, 255, 255]).unwrap();
        assert_eq!(tissue_mask(&white).unwrap().fraction(), 0.0);

        let mut half = RgbImage::filled(8, 8, [255, 255, 255]).unwrap();
        for y in 0..8 {
            for x in 0..4 {
                half.set_pixel(x, y, [50, 50, 50]);
            }
        }
        let m = tissue_mask(&half).unwrap();
        assert_eq!(m.fraction(), 0.5);
        assert!(m.mask[0] && !m.mask[7]);

        // single gray level: threshold is that level and `<` selects nothing
        let dark = RgbImage::filled(8, 8, [40, 40, 40]).unwrap();
        let m = tissue_mask(&dark).unwrap();
        assert_eq!(m.threshold, 40);
        assert_eq!(m.fraction(), 0.0);
    }

    #[test]
    fn luma_rounding() {
        assert_eq!(grayscale([255, 255, 255]), 255);
        assert_eq!(grayscale([0, 0, 0]), 0);
        assert_eq!(grayscale([100, 0, 0]), 30); // 29.9
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn matches_brute_force(hist in proptest::collection::vec(0u64..1000, 256)) {
            prop_assume!(hist.iter().any(|&c| c > 0));
            prop_assume!(hist.iter().filter(|&&c| c > 0).count() > 1);
            prop_assert_eq!(otsu_threshold(&hist).unwrap(), otsu_oracle(&hist));
        }

        #[test]
        fn sparse_histograms_match(bins in proptest::collection::vec((0usize..256, 1u64..5000), 2..12)) {
            let mut hist = vec![0u64; 256];
            for (b, c) in bins { hist[b] += c; }
            prop_assume!(hist.iter().filter(|&&c| c > 0).count() > 1);
            prop_assert_eq!(otsu_threshold(&hist).unwrap(), otsu_oracle(&hist));
        }
    }
}
