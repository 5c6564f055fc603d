use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::stats::quantile_sorted;
use crate::{rng, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub n_samples: usize,
    pub percentiles: (f64, f64),
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self { n_samples: 1000, percentiles: (2.5, 97.5), seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapInterval {
    pub low: f64,
    pub high: f64,
    pub valid: usize,
    pub skipped: usize,
}

/// Concatenates the cell indices of `tiles`; repeated tiles repeat their cells.
pub fn cells_of_tiles(cells_by_tile: &[Vec<usize>], tiles: &[usize]) -> Vec<usize> {
    tiles.iter().flat_map(|&t| cells_by_tile[t].iter().copied()).collect()
}

/// Percentile interval of `metric` over tile resamples drawn with replacement.
/// Resample `i` draws from its own stream of `config.seed`, so the result does
/// not depend on thread scheduling.
pub fn bootstrap_ci<F>(metric: F, cells_by_tile: &[Vec<usize>], config: &BootstrapConfig) -> Result<BootstrapInterval>
where
    F: Fn(&[usize]) -> Option<f64> + Sync,
{
    let n_tiles = cells_by_tile.len();
    if n_tiles < 2 {
        return Err(Error::Invalid(format!("bootstrap needs at least 2 tiles, got {n_tiles}")));
    }
    if config.n_samples == 0 {
        return Err(Error::Invalid("bootstrap n_samples must be at least 1".into()));
    }
    let (lo, hi) = config.percentiles;
    if !(0.0..=100.0).contains(&lo) || !(lo..=100.0).contains(&hi) {
        return Err(Error::Invalid(format!("bad percentiles ({lo}, {hi})")));
    }
    let draws: Vec<Option<f64>> = (0..config.n_samples)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::indexed(config.seed, "bootstrap", i as u64);
            let tiles: Vec<usize> = (0..n_tiles).map(|_| r.random_range(0..n_tiles)).collect();
            metric(&cells_of_tiles(cells_by_tile, &tiles)).filter(|v| v.is_finite())
        })
        .collect();
    let mut values: Vec<f64> = draws.iter().flatten().copied().collect();
    let skipped = draws.len() - values.len();
    if values.is_empty() {
        return Err(Error::Degenerate("metric undefined on every bootstrap resample".into()));
    }
    values.sort_by(f64::total_cmp);
    Ok(BootstrapInterval {
        low: quantile_sorted(&values, lo / 100.0).expect("non-empty"),
        high: quantile_sorted(&values, hi / 100.0).expect("non-empty"),
        valid: values.len(),
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_metric(values: &[f64]) -> impl Fn(&[usize]) -> Option<f64> + Sync + '_ {
        move |cells: &[usize]| {
            if cells.is_empty() {
                None
            } else {
                Some(cells.iter().map(|&c| values[c]).sum::<f64>() / cells.len() as f64)
            }
        }
    }

    #[test]
    fn constant_metric_degenerate_interval() {
        let tiles: Vec<Vec<usize>> = (0..5).map(|t| vec![t]).collect();
        let ci = bootstrap_ci(|_| Some(0.7), &tiles, &BootstrapConfig::default()).unwrap();
        assert_eq!((ci.low, ci.high, ci.skipped), (0.7, 0.7, 0));
    }

    #[test]
    fn reproducible_for_seed() {
        let values: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let tiles: Vec<Vec<usize>> = (0..10).map(|t| (t * 4..t * 4 + 4).collect()).collect();
        let cfg = BootstrapConfig { seed: 11, ..Default::default() };
        let a = bootstrap_ci(mean_metric(&values), &tiles, &cfg).unwrap();
        let b = bootstrap_ci(mean_metric(&values), &tiles, &cfg).unwrap();
        assert_eq!(a.low.to_bits(), b.low.to_bits());
        assert_eq!(a.high.to_bits(), b.high.to_bits());
        let c = bootstrap_ci(mean_metric(&values), &tiles, &BootstrapConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!((a.low, a.high), (c.low, c.high));
    }

    #[test]
    fn endpoints_within_exhaustive_support() {
        // 3 tiles: 27 ordered resamples enumerate every attainable metric value
        let values = [0.1, 0.5, 0.9, 0.2, 0.4];
        let tiles = vec![vec![0, 1], vec![2], vec![3, 4]];
        let metric = mean_metric(&values);
        let mut support = Vec::new();
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..3 {
                    support.push(metric(&cells_of_tiles(&tiles, &[a, b, c])).unwrap());
                }
            }
        }
        let (min, max) = support.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        let cfg = BootstrapConfig { n_samples: 8, percentiles: (0.0, 100.0), seed: 3 };
        let ci = bootstrap_ci(&metric, &tiles, &cfg).unwrap();
        assert!(support.iter().any(|&v| v == ci.low) && support.iter().any(|&v| v == ci.high));
        assert!(min <= ci.low && ci.high <= max);
    }

    #[test]
    fn undefined_resamples_counted() {
        let tiles = vec![vec![0], vec![1]];
        let ci = bootstrap_ci(|c: &[usize]| (c.iter().any(|&i| i == 0)).then_some(1.0), &tiles, &BootstrapConfig::default())
            .unwrap();
        assert!(ci.skipped > 150 && ci.skipped < 350);
        assert_eq!(ci.valid + ci.skipped, 1000);
        assert!(bootstrap_ci(|_| Some(1.0), &tiles[..1], &BootstrapConfig::default()).is_err());
    }
}
