use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamStore};

/// `base * min(1, t / warmup)`, held until `total / 2`, then linear to zero at `total`.
pub fn learning_rate(base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    let t = step as f64;
    let warm = if warmup == 0 { 1.0 } else { (t / warmup as f64).min(1.0) };
    let half = total as f64 / 2.0;
    let decay = if total == 0 || t <= half { 1.0 } else { ((total as f64 - t) / (total as f64 - half)).max(0.0) };
    base * warm * decay
}

/// Rescales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self { beta1, beta2, eps: 1e-8, weight_decay, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) {
        if self.m.len() < params.len() {
            for id in params.ids().skip(self.m.len()) {
                let n = params.get(id).len();
                self.m.push(vec![0.0; n]);
                self.v.push(vec![0.0; n]);
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for id in params.ids().collect::<Vec<_>>() {
            if !params.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i] + self.weight_decay * p[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Tensor;

    #[test]
    fn schedule_examples() {
        let lr = |s| learning_rate(2e-4, s, 10_000, 400);
        assert!((lr(200) - 1e-4).abs() < 1e-15);
        assert!((lr(400) - 2e-4).abs() < 1e-15);
        assert!((lr(5000) - 2e-4).abs() < 1e-15);
        assert!((lr(7500) - 1e-4).abs() < 1e-15);
        assert_eq!(lr(10_000), 0.0);
        assert_eq!(learning_rate(1.0, 3, 10, 0), 1.0);
    }

    #[test]
    fn clipping() {
        let mut g = Gradients { grads: vec![Some(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap()), None] };
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
        assert_eq!(clip_grad_norm(&mut g, 2.0), g.global_norm());
    }

    #[test]
    fn adam_first_step_is_sign_times_lr() {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap(), true).unwrap();
        let frozen = s.add("f", Tensor::new(vec![1], vec![5.0]).unwrap(), false).unwrap();
        let g = Gradients {
            grads: vec![Some(Tensor::new(vec![2], vec![0.3, -2.0]).unwrap()), Some(Tensor::scalar(1.0))],
        };
        let mut adam = Adam::new(0.5, 0.999, 0.0);
        adam.step(&mut s, &g, 0.1);
        assert!((s.get(id).data()[0] - 0.9).abs() < 1e-6);
        assert!((s.get(id).data()[1] + 0.9).abs() < 1e-6);
        assert_eq!(s.get(frozen).data()[0], 5.0);
    }
}
