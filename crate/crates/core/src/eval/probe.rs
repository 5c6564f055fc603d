use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::classification::{auprc, f1_binary};
use crate::{rng, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    /// `lambda` in `(1/n) sum NLL + (lambda/2) |w|^2`; the bias is not penalized.
    pub reg_strength: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub threshold: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { reg_strength: 1e-3, tolerance: 1e-8, max_iterations: 100, threshold: 0.5 }
    }
}

/// Binary logistic probe over standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// In-place Cholesky solve of `A x = b`; `None` if `A` is not positive definite.
fn cholesky_solve(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s = a[i * n + j] - (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum::<f64>();
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - (0..i).map(|k| l[i * n + k] * y[k]).sum::<f64>()) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (y[i] - (i + 1..n).map(|k| l[k * n + i] * x[k]).sum::<f64>()) / l[i * n + i];
    }
    Some(x)
}

struct Problem<'a> {
    x: &'a [Vec<f64>],
    y: &'a [bool],
    lambda: f64,
    d: usize,
}

impl Problem<'_> {
    fn margin(&self, theta: &[f64], row: &[f64]) -> f64 {
        theta[self.d] + row.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>()
    }

    fn objective(&self, theta: &[f64]) -> f64 {
        let n = self.x.len() as f64;
        let nll: f64 = self
            .x
            .iter()
            .zip(self.y)
            .map(|(row, &y)| {
                let z = self.margin(theta, row);
                softplus(z) - if y { z } else { 0.0 }
            })
            .sum();
        nll / n + 0.5 * self.lambda * theta[..self.d].iter().map(|w| w * w).sum::<f64>()
    }

    fn grad_hessian(&self, theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (d, m) = (self.d, self.d + 1);
        let n = self.x.len() as f64;
        let mut g = vec![0.0; m];
        let mut h = vec![0.0; m * m];
        let mut aug = vec![1.0; m];
        for (row, &y) in self.x.iter().zip(self.y) {
            aug[..d].copy_from_slice(row);
            let p = sigmoid(self.margin(theta, row));
            let r = p - y as u8 as f64;
            let s = p * (1.0 - p);
            for i in 0..m {
                g[i] += r * aug[i];
                for j in 0..=i {
                    h[i * m + j] += s * aug[i] * aug[j];
                }
            }
        }
        for i in 0..m {
            g[i] /= n;
            for j in 0..=i {
                h[i * m + j] /= n;
                h[j * m + i] = h[i * m + j];
            }
        }
        for i in 0..d {
            g[i] += self.lambda * theta[i];
            h[i * m + i] += self.lambda;
        }
        (g, h)
    }
}

/// Fits one binary probe by damped Newton iterations until the gradient
/// max-norm drops below `config.tolerance`.
pub fn train_probe(features: &[Vec<f64>], labels: &[bool], config: &ProbeConfig) -> Result<ProbeModel> {
    if features.len() != labels.len() {
        return Err(Error::Shape(format!("{} feature rows for {} labels", features.len(), labels.len())));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::Degenerate("probe training split has a single class".into()));
    }
    if !(config.reg_strength >= 0.0) {
        return Err(Error::Invalid("reg_strength must be non-negative".into()));
    }
    let d = features[0].len();
    if features.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("ragged feature matrix".into()));
    }
    let n = features.len() as f64;
    let mut mean = vec![0.0; d];
    for row in features {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    let mut scale = vec![0.0; d];
    for row in features {
        for ((s, v), m) in scale.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    for s in &mut scale {
        *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
    }
    let x: Vec<Vec<f64>> = features
        .iter()
        .map(|row| row.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) / s).collect())
        .collect();
    let problem = Problem { x: &x, y: labels, lambda: config.reg_strength, d };

    let mut theta = vec![0.0; d + 1];
    let prior = pos as f64 / n;
    theta[d] = (prior / (1.0 - prior)).ln();
    let mut f = problem.objective(&theta);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iterations {
        let (g, mut h) = problem.grad_hessian(&theta);
        if g.iter().all(|v| v.abs() < config.tolerance) {
            converged = true;
            break;
        }
        iterations += 1;
        let m = d + 1;
        let mut jitter = 0.0;
        let step = loop {
            if let Some(s) = cholesky_solve(&h, &g, m) {
                break s;
            }
            let add = if jitter == 0.0 { 1e-10 } else { jitter * 9.0 };
            for i in 0..m {
                h[i * m + i] += add;
            }
            jitter += add;
        };
        let slope: f64 = g.iter().zip(&step).map(|(a, b)| a * b).sum();
        let mut t = 1.0;
        let mut next;
        loop {
            next = theta.iter().zip(&step).map(|(a, s)| a - t * s).collect::<Vec<_>>();
            let fn_ = problem.objective(&next);
            if fn_ <= f - 1e-4 * t * slope || t < 1e-12 {
                f = fn_;
                break;
            }
            t *= 0.5;
        }
        theta = next;
    }
    let bias = theta[d];
    theta.truncate(d);
    Ok(ProbeModel { mean, scale, weights: theta, bias, iterations, converged })
}

impl ProbeModel {
    pub fn decision(&self, row: &[f64]) -> f64 {
        self.bias
            + row
                .iter()
                .zip(&self.mean)
                .zip(&self.scale)
                .zip(&self.weights)
                .map(|(((v, m), s), w)| (v - m) / s * w)
                .sum::<f64>()
    }

    pub fn predict_proba(&self, row: &[f64]) -> f64 {
        sigmoid(self.decision(row))
    }

    /// Fits on `train` rows and scores `test` rows: (probabilities, AUPRC, F1).
    pub fn fit_and_score(
        features: &[Vec<f64>],
        labels: &[bool],
        train: &[usize],
        test: &[usize],
        config: &ProbeConfig,
    ) -> Result<ProbeScores> {
        let fx: Vec<Vec<f64>> = train.iter().map(|&i| features[i].clone()).collect();
        let fy: Vec<bool> = train.iter().map(|&i| labels[i]).collect();
        let model = train_probe(&fx, &fy, config)?;
        let probs: Vec<f64> = test.iter().map(|&i| model.predict_proba(&features[i])).collect();
        let truth: Vec<bool> = test.iter().map(|&i| labels[i]).collect();
        let pred: Vec<bool> = probs.iter().map(|&p| p > config.threshold).collect();
        Ok(ProbeScores { auprc: auprc(&probs, &truth), f1: f1_binary(&pred, &truth), probabilities: probs, model })
    }
}

#[derive(Debug, Clone)]
pub struct ProbeScores {
    pub model: ProbeModel,
    pub probabilities: Vec<f64>,
    pub auprc: Option<f64>,
    pub f1: f64,
}

/// Seeded `fraction` / `1 - fraction` split of `0..n` into (train, test),
/// each sorted ascending.
pub fn split_external(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::substream(seed, "eval/probe_split"));
    let k = ((n as f64) * fraction).round() as usize;
    let mut train = idx[..k].to_vec();
    let mut test = idx[k..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn toy(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let a: f64 = rng.random_range(-2.0..2.0);
            let b: f64 = rng.random_range(-2.0..2.0);
            let p = sigmoid(1.5 * a - 0.7 * b + 0.3);
            x.push(vec![a * 10.0 + 5.0, b]);
            y.push(rng.random_bool(p));
        }
        (x, y)
    }

    #[test]
    fn separable_training_auprc_is_one() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        let y: Vec<bool> = (0..20).map(|i| i >= 10).collect();
        let m = train_probe(&x, &y, &ProbeConfig::default()).unwrap();
        let s: Vec<f64> = x.iter().map(|r| m.predict_proba(r)).collect();
        assert_eq!(auprc(&s, &y), Some(1.0));
        assert!(m.converged, "{m:?}");
    }

    #[test]
    fn gradient_vanishes_at_optimum() {
        let (x, y) = toy(300, 1);
        let cfg = ProbeConfig { reg_strength: 0.1, ..Default::default() };
        let m = train_probe(&x, &y, &cfg).unwrap();
        assert!(m.converged);
        // finite-difference check of the objective on the standardized scale
        let xs: Vec<Vec<f64>> =
            x.iter().map(|r| r.iter().zip(&m.mean).zip(&m.scale).map(|((v, a), s)| (v - a) / s).collect()).collect();
        let p = Problem { x: &xs, y: &y, lambda: 0.1, d: 2 };
        let mut theta = m.weights.clone();
        theta.push(m.bias);
        let f0 = p.objective(&theta);
        for i in 0..3 {
            for h in [1e-3, -1e-3] {
                let mut t = theta.clone();
                t[i] += h;
                assert!(p.objective(&t) >= f0 - 1e-12);
            }
        }
    }

    #[test]
    fn duplicated_rows_same_weights() {
        let (x, y) = toy(200, 2);
        let cfg = ProbeConfig::default();
        let a = train_probe(&x, &y, &cfg).unwrap();
        let x2: Vec<Vec<f64>> = x.iter().chain(&x).cloned().collect();
        let y2: Vec<bool> = y.iter().chain(&y).copied().collect();
        let b = train_probe(&x2, &y2, &cfg).unwrap();
        for (u, v) in a.weights.iter().zip(&b.weights) {
            assert!((u - v).abs() < 1e-7);
        }
        assert!((a.bias - b.bias).abs() < 1e-7);
    }

    #[test]
    fn null_labels_score_near_prevalence() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let x: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
        let y: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        let (train, test) = split_external(n, 0.2, 9);
        let s = ProbeModel::fit_and_score(&x, &y, &train, &test, &ProbeConfig::default()).unwrap();
        let prev = test.iter().filter(|&&i| y[i]).count() as f64 / test.len() as f64;
        assert!((s.auprc.unwrap() - prev).abs() < 0.05);
    }

    #[test]
    fn test_rows_do_not_influence_fit() {
        let (x, y) = toy(400, 4);
        let (train, test) = split_external(400, 0.2, 5);
        let a = ProbeModel::fit_and_score(&x, &y, &train, &test, &ProbeConfig::default()).unwrap();
        let mut x2 = x.clone();
        for &i in &test {
            x2[i] = vec![1e6, -1e6];
        }
        let b = ProbeModel::fit_and_score(&x2, &y, &train, &test, &ProbeConfig::default()).unwrap();
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn single_class_rejected_and_split_sizes() {
        let x = vec![vec![1.0], vec![2.0]];
        assert!(matches!(train_probe(&x, &[true, true], &ProbeConfig::default()), Err(Error::Degenerate(_))));
        let (tr, te) = split_external(100, 0.2, 1);
        assert_eq!((tr.len(), te.len()), (20, 80));
        assert_eq!(split_external(100, 0.2, 1), (tr, te));
    }
}
