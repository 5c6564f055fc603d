use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::classification::f1_binary;
use super::probe::{ProbeConfig, ProbeModel};
use crate::{rng, Error, Result};

/// Mean F1 of Bernoulli(`prevalence`) guesses against a label vector with
/// `round(prevalence * n_cells)` positives.
pub fn random_baseline_f1(prevalence: f64, n_cells: usize, runs: usize, seed: u64) -> f64 {
    let k = (prevalence.clamp(0.0, 1.0) * n_cells as f64).round() as usize;
    let mut truth: Vec<bool> = (0..n_cells).map(|i| i < k).collect();
    truth.shuffle(&mut rng::substream(seed, "eval/random_baseline/truth"));
    random_runs(&truth, prevalence.clamp(0.0, 1.0), runs, seed)
}

/// Random baseline against observed labels, guessing at their prevalence.
pub fn random_baseline_f1_for_labels(truth: &[bool], runs: usize, seed: u64) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let p = truth.iter().filter(|&&t| t).count() as f64 / truth.len() as f64;
    random_runs(truth, p, runs, seed)
}

fn random_runs(truth: &[bool], p: f64, runs: usize, seed: u64) -> f64 {
    if runs == 0 {
        return 0.0;
    }
    let total: f64 = (0..runs)
        .map(|run| {
            let mut r = rng::indexed(seed, "eval/random_baseline", run as u64);
            let pred: Vec<bool> = truth.iter().map(|_| r.random_bool(p)).collect();
            f1_binary(&pred, truth)
        })
        .sum();
    total / runs as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineEntry {
    pub auprc: Option<f64>,
    pub f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

impl BaselineEntry {
    fn from_probe(
        features: &[Vec<f64>],
        labels: &[bool],
        train: &[usize],
        test: &[usize],
        config: &ProbeConfig,
    ) -> Result<Self> {
        match ProbeModel::fit_and_score(features, labels, train, test, config) {
            Ok(s) => Ok(Self { auprc: s.auprc, f1: Some(s.f1), skipped: None }),
            Err(Error::Degenerate(reason)) => Ok(Self { auprc: None, f1: None, skipped: Some(reason) }),
            Err(e) => Err(e),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineScores {
    pub marker: String,
    pub upper_bound: BaselineEntry,
    pub morphometry: BaselineEntry,
    pub random_f1: f64,
}

/// Upper-bound (real expression), morphometry and random baselines for each
/// marker under the same train/test split as the main probe.
#[allow(clippy::too_many_arguments)]
pub fn baseline_suite(
    markers: &[String],
    real_expression: &[Vec<f64>],
    morphometry: &[Vec<f64>],
    labels: &[Vec<bool>],
    train: &[usize],
    test: &[usize],
    config: &ProbeConfig,
    seed: u64,
) -> Result<Vec<BaselineScores>> {
    if labels.len() != markers.len() {
        return Err(Error::Shape(format!("{} label columns for {} markers", labels.len(), markers.len())));
    }
    markers
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(m, (name, y))| {
            let truth: Vec<bool> = test.iter().map(|&i| y[i]).collect();
            Ok(BaselineScores {
                marker: name.clone(),
                upper_bound: BaselineEntry::from_probe(real_expression, y, train, test, config)?,
                morphometry: BaselineEntry::from_probe(morphometry, y, train, test, config)?,
                random_f1: random_baseline_f1_for_labels(&truth, 100, rng::derive_seed(seed, &format!("marker/{m}"))),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::split_external;
    use rand::SeedableRng;

    #[test]
    fn random_baseline_tracks_prevalence() {
        for p in [0.05, 0.3, 0.7] {
            let f = random_baseline_f1(p, 10_000, 100, 7);
            assert!((f - p).abs() < 0.02, "p={p} f1={f}");
        }
        assert_eq!(random_baseline_f1(0.0, 1000, 10, 1), 0.0);
        assert_eq!(random_baseline_f1(1.0, 1000, 10, 1), 1.0);
        assert_eq!(random_baseline_f1(0.3, 500, 10, 3), random_baseline_f1(0.3, 500, 10, 3));
    }

    #[test]
    fn planted_area_dependence() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let n = 2000;
        let area: Vec<f64> = (0..n).map(|_| r.random_range(10.0..60.0)).collect();
        let noise: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        let y: Vec<bool> = area.iter().map(|&a| a > 45.0).collect();
        let with_area: Vec<Vec<f64>> = area.iter().zip(&noise).map(|(&a, &z)| vec![a, z]).collect();
        let without: Vec<Vec<f64>> = noise.iter().map(|&z| vec![z]).collect();
        let (train, test) = split_external(n, 0.2, 1);
        let names = vec!["M".to_string()];
        let s = baseline_suite(&names, &with_area, &without, &[y.clone()], &train, &test, &ProbeConfig::default(), 1)
            .unwrap();
        let prev = test.iter().filter(|&&i| y[i]).count() as f64 / test.len() as f64;
        assert!(s[0].upper_bound.auprc.unwrap() > 0.99);
        assert!((s[0].morphometry.auprc.unwrap() - prev).abs() < 0.08);
        assert!((s[0].random_f1 - prev).abs() < 0.05);
    }

    #[test]
    fn single_class_marker_flagged() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let y = vec![false; 10];
        let s = baseline_suite(&["M".into()], &x, &x, &[y], &[0, 1, 2], &[3, 4], &ProbeConfig::default(), 0).unwrap();
        assert!(s[0].upper_bound.skipped.is_some());
        assert_eq!(s[0].random_f1, 0.0);
    }
}
