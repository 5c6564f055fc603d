use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::{Error, Result};

pub const SIGMA_FLOOR: f64 = 1e-3;
/// Normalized targets in `[0, 255]` map linearly onto `[-TARGET_RANGE, TARGET_RANGE]`.
pub const TARGET_RANGE: f64 = 0.9;

pub fn scale_target(v: f64) -> f64 {
    (v / 255.0 * 2.0 - 1.0) * TARGET_RANGE
}

/// Head output back to normalized intensity, `255 (t/0.9 + 1) / 2`, clamped to `[0, 255]`.
pub fn unscale_output(t: f64) -> f64 {
    (255.0 * (t / TARGET_RANGE + 1.0) / 2.0).clamp(0.0, 255.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Per-marker standard deviation of the scaled training targets.
    pub sigma: Vec<f64>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

fn default_lambda() -> f64 {
    1.0
}

impl LossConfig {
    pub fn uniform(markers: usize) -> Self {
        Self { sigma: vec![1.0; markers], lambda: 1.0 }
    }

    /// Per-marker stdev over every pixel of the scaled targets `[M, H, W]`.
    pub fn from_targets(targets: &[&Tensor], lambda: f64) -> Result<Self> {
        let m = targets.first().ok_or_else(|| Error::Invalid("no training targets".into()))?.shape()[0];
        let mut acc = vec![(0.0f64, 0.0f64, 0usize); m];
        for t in targets {
            if t.shape().len() != 3 || t.shape()[0] != m {
                return Err(Error::Shape(format!("target {:?} is not [{m}, H, W]", t.shape())));
            }
            let hw = t.shape()[1] * t.shape()[2];
            for (j, a) in acc.iter_mut().enumerate() {
                for &v in &t.data()[j * hw..(j + 1) * hw] {
                    let s = scale_target(v);
                    a.0 += s;
                    a.1 += s * s;
                    a.2 += 1;
                }
            }
        }
        let sigma = acc
            .iter()
            .map(|&(s, ss, n)| {
                let mean = s / n as f64;
                (ss / n as f64 - mean * mean).max(0.0).sqrt()
            })
            .collect();
        Ok(Self { sigma, lambda })
    }

    /// `lambda / (M sigma_j)` with `sigma_j` floored.
    pub fn channel_weights(&self) -> Vec<f64> {
        let m = self.sigma.len() as f64;
        self.sigma
            .iter()
            .enumerate()
            .map(|(j, &s)| {
                if s < SIGMA_FLOOR {
                    log::warn!("marker {j}: target sigma {s:.2e} floored to {SIGMA_FLOOR}");
                }
                self.lambda / (m * s.max(SIGMA_FLOOR))
            })
            .collect()
    }
}

/// `(lambda/M) sum_j MSE_j / sigma_j` over `[N, M, H, W]` tensors.
pub fn weighted_mse(pred: &Tensor, target: &Tensor, config: &LossConfig) -> Result<f64> {
    if pred.shape() != target.shape() || pred.shape().len() != 4 || pred.shape()[1] != config.sigma.len() {
        return Err(Error::Shape(format!("loss pred {:?} target {:?}", pred.shape(), target.shape())));
    }
    let per = per_marker_mse(pred, target);
    Ok(per.iter().zip(config.channel_weights()).map(|(a, w)| a * w).sum())
}

pub fn per_marker_mse(pred: &Tensor, target: &Tensor) -> Vec<f64> {
    let (n, m, h, w) = pred.dims4();
    let hw = h * w;
    let mut per = vec![0.0; m];
    for s in 0..n {
        for (j, acc) in per.iter_mut().enumerate() {
            let base = (s * m + j) * hw;
            *acc += pred.data()[base..base + hw]
                .iter()
                .zip(&target.data()[base..base + hw])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
    }
    per.iter().map(|v| v / (n * hw) as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaling_endpoints() {
        assert!((unscale_output(0.9) - 255.0).abs() < 1e-12);
        assert!(unscale_output(-0.9).abs() < 1e-12);
        assert!((unscale_output(0.0) - 127.5).abs() < 1e-12);
        assert_eq!(unscale_output(0.99), 255.0);
        for v in [0.0, 17.0, 255.0] {
            assert!((unscale_output(scale_target(v)) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn worked_example() {
        let pred = Tensor::new(vec![1, 2, 1, 1], vec![0.1f64.sqrt(), 0.1f64.sqrt()]).unwrap();
        let cfg = LossConfig { sigma: vec![1.0, 0.5], lambda: 1.0 };
        assert!((weighted_mse(&pred, &Tensor::zeros(&[1, 2, 1, 1]), &cfg).unwrap() - 0.15).abs() < 1e-12);
        assert_eq!(weighted_mse(&pred, &pred, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn matches_elementwise_sum_and_reduction() {
        let (n, m, hw) = (2, 3, 4);
        let p: Vec<f64> = (0..n * m * hw).map(|i| (i as f64 * 0.37).sin()).collect();
        let t: Vec<f64> = (0..n * m * hw).map(|i| (i as f64 * 0.11).cos()).collect();
        let pred = Tensor::new(vec![n, m, 2, 2], p.clone()).unwrap();
        let target = Tensor::new(vec![n, m, 2, 2], t.clone()).unwrap();
        let cfg = LossConfig { sigma: vec![0.5, 1.0, 2.0], lambda: 1.5 };
        let mut brute = 0.0;
        for i in 0..p.len() {
            let j = (i / hw) % m;
            brute += 1.5 / (3.0 * cfg.sigma[j]) * (p[i] - t[i]).powi(2) / (n * hw) as f64;
        }
        assert!((weighted_mse(&pred, &target, &cfg).unwrap() - brute).abs() < 1e-9);
        // sigma = 1, lambda = M is the plain sum of per-marker MSEs
        let plain = LossConfig { sigma: vec![1.0; 3], lambda: 3.0 };
        let sum: f64 = per_marker_mse(&pred, &target).iter().sum();
        assert!((weighted_mse(&pred, &target, &plain).unwrap() - sum).abs() < 1e-12);
    }

    #[test]
    fn sigma_from_targets_and_floor() {
        let a = Tensor::new(vec![2, 1, 2], vec![0.0, 255.0, 7.0, 7.0]).unwrap();
        let cfg = LossConfig::from_targets(&[&a], 1.0).unwrap();
        assert!((cfg.sigma[0] - 0.9).abs() < 1e-12);
        assert_eq!(cfg.sigma[1], 0.0);
        let w = cfg.channel_weights();
        assert!((w[1] - 1.0 / (2.0 * SIGMA_FLOOR)).abs() < 1e-9);
    }
}
