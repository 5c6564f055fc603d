use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use super::CellTable;
use crate::rng;
use crate::stats::{quantile_sorted, variance};
use crate::{Error, Result};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Two-component 1-D Gaussian mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmFit {
    pub means: [f64; 2],
    pub variances: [f64; 2],
    pub weights: [f64; 2],
    /// Index of the higher-mean component.
    pub positive_component: usize,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Log-likelihood before each M-step.
    #[serde(skip)]
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GmmOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Variance floor as a fraction of the sample variance.
    pub variance_floor: f64,
    pub seed: u64,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 500,
            variance_floor: 1e-6,
            seed: 0,
        }
    }
}

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (x - mean) * (x - mean) / var - 0.5 * var.ln() - LN_SQRT_2PI
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

impl GmmFit {
    fn component_logs(&self, x: f64) -> [f64; 2] {
        [0, 1].map(|k| self.weights[k].ln() + log_normal(x, self.means[k], self.variances[k]))
    }

    /// `P(positive component | x)` by Bayes' rule.
    pub fn posterior(&self, x: f64) -> f64 {
        let l = self.component_logs(x);
        (l[self.positive_component] - log_sum_exp(l[0], l[1])).exp()
    }

    pub fn log_likelihood(&self, values: &[f64]) -> f64 {
        values.iter().map(|&x| {
            let l = self.component_logs(x);
            log_sum_exp(l[0], l[1])
        }).sum()
    }
}

pub fn fit_gmm_1d(values: &[f64], seed: u64) -> Result<GmmFit> {
    fit_gmm_1d_with(values, &GmmOptions { seed, ..GmmOptions::default() })
}

/// EM for a two-component mixture. Components start at the 25th and 75th
/// percentiles with equal weights and the pooled sample variance. The input
/// is sorted first, so the fit does not depend on sample order.
pub fn fit_gmm_1d_with(values: &[f64], options: &GmmOptions) -> Result<GmmFit> {
    let mut xs: Vec<f64> = values.to_vec();
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("GMM input contains non-finite values".into()));
    }
    xs.sort_by(f64::total_cmp);
    let distinct = xs.windows(2).filter(|w| w[0] != w[1]).count() + usize::from(!xs.is_empty());
    if xs.len() < 8 || distinct < 2 {
        return Err(Error::Degenerate(format!(
            "need >= 8 samples with >= 2 distinct values, got {} samples, {} distinct",
            xs.len(),
            distinct
        )));
    }

    let pooled = variance(&xs);
    let floor = options.variance_floor * pooled;
    let mut means = [quantile_sorted(&xs, 0.25).unwrap(), quantile_sorted(&xs, 0.75).unwrap()];
    if means[0] == means[1] {
        // heavy ties at the quartiles: start from two distinct seeded samples
        let mut r = rng::substream(options.seed, "gmm-init");
        let mut uniq = xs.clone();
        uniq.dedup();
        let picked: Vec<f64> = uniq.choose_multiple(&mut r, 2).copied().collect();
        means = [picked[0].min(picked[1]), picked[0].max(picked[1])];
    }
    let mut fit = GmmFit {
        means,
        variances: [pooled.max(floor); 2],
        weights: [0.5, 0.5],
        positive_component: 1,
        loglik: f64::NEG_INFINITY,
        iterations: 0,
        converged: false,
        trace: Vec::new(),
    };

    let n = xs.len();
    let mut resp = vec![0.0; n];
    for iteration in 0..options.max_iterations {
        // E-step: responsibility of component 1
        let mut ll = 0.0;
        for (r, &x) in resp.iter_mut().zip(&xs) {
            let l = fit.component_logs(x);
            let total = log_sum_exp(l[0], l[1]);
            ll += total;
            *r = (l[1] - total).exp();
        }
        if let Some(&prev) = fit.trace.last() {
            if ll - prev < options.tolerance {
                fit.trace.push(ll);
                fit.loglik = ll;
                fit.converged = true;
                break;
            }
        }
        fit.trace.push(ll);
        fit.loglik = ll;
        fit.iterations = iteration + 1;

        // M-step
        let n1: f64 = resp.iter().sum();
        let n0 = n as f64 - n1;
        if n0 <= 0.0 || n1 <= 0.0 {
            // a component lost all mass; keep the previous parameters
            fit.converged = true;
            break;
        }
        let m1 = resp.iter().zip(&xs).map(|(r, x)| r * x).sum::<f64>() / n1;
        let m0 = resp.iter().zip(&xs).map(|(r, x)| (1.0 - r) * x).sum::<f64>() / n0;
        let v1 = resp.iter().zip(&xs).map(|(r, x)| r * (x - m1) * (x - m1)).sum::<f64>() / n1;
        let v0 = resp.iter().zip(&xs).map(|(r, x)| (1.0 - r) * (x - m0) * (x - m0)).sum::<f64>() / n0;
        fit.means = [m0, m1];
        fit.variances = [v0.max(floor), v1.max(floor)];
        fit.weights = [n0 / n as f64, n1 / n as f64];
    }
    if !fit.converged {
        fit.loglik = fit.log_likelihood(&xs);
    }
    fit.positive_component = if fit.means[1] >= fit.means[0] { 1 } else { 0 };
    debug_assert!((fit.weights[0] + fit.weights[1] - 1.0).abs() < 1e-9);
    Ok(fit)
}

/// Fill posterior and label of `marker` for every row. Labels use a strict
/// `posterior > cutoff`.
pub fn gate_marker(table: &mut CellTable, marker: usize, fit: &GmmFit, cutoff: f64) {
    let m = table.markers.len();
    for row in &mut table.rows {
        let p = fit.posterior(row.mean_expr[marker]);
        row.posterior.get_or_insert_with(|| vec![f64::NAN; m])[marker] = p;
        row.label.get_or_insert_with(|| vec![false; m])[marker] = p > cutoff;
    }
}
