use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use super::translator::Translator;
use crate::{rng, Error, Result};

pub const FD_STEP: f64 = 1e-5;
/// Relative errors use `max(|analytic|, |numeric|, DENOM_FLOOR)` as denominator.
pub const DENOM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Draws rejected because a ReLU changed sign inside the difference stencil.
    pub resampled: usize,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub num_params: usize,
}

/// Central-difference check of `build`'s scalar output on `probes` trainable
/// scalars drawn uniformly with `seed`.
pub fn finite_difference_check<F>(store: &mut ParamStore, train: bool, probes: usize, seed: u64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let (grads, pattern) = {
        let mut g = Graph::new(store, train);
        let loss = build(&mut g)?;
        (g.backward(loss)?, g.relu_pattern().to_vec())
    };
    let trainable: Vec<(ParamId, usize)> =
        store.ids().filter(|&id| store.is_trainable(id)).map(|id| (id, store.get(id).len())).collect();
    let total: usize = trainable.iter().map(|t| t.1).sum();
    if total == 0 {
        return Err(Error::Model("no trainable parameters".into()));
    }
    let mut r = rng::substream(seed, "gradcheck");
    let mut report = GradCheckReport { checked: 0, resampled: 0, max_rel_error: 0.0, worst: None, num_params: store.num_scalars() };
    let max_draws = probes * 20;
    let mut draws = 0;
    while report.checked < probes.min(total) && draws < max_draws {
        draws += 1;
        let mut k = r.random_range(0..total);
        let (id, i) = trainable
            .iter()
            .find_map(|&(id, n)| if k < n { Some((id, k)) } else { k -= n; None })
            .expect("index within total");
        let orig = store.get(id).data()[i];
        let mut eval = |v: f64| -> Result<(f64, bool)> {
            store.get_mut(id).data_mut()[i] = v;
            let mut g = Graph::new(store, train);
            let l = build(&mut g)?;
            Ok((g.value(l).item(), g.relu_pattern() == pattern.as_slice()))
        };
        let (fp, same_p) = eval(orig + FD_STEP)?;
        let (fm, same_m) = eval(orig - FD_STEP)?;
        store.get_mut(id).data_mut()[i] = orig;
        if !(same_p && same_m) {
            report.resampled += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * FD_STEP);
        let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel >= report.max_rel_error {
                report.worst = Some((store.entry(id).name.clone(), i));
            }
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Gradient check of the full translator under the weighted MSE in training
/// mode with dropout off.
pub fn check_gradients(
    model: &mut Translator,
    input: &Tensor,
    target: &Tensor,
    weights: &[f64],
    probes: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let arch = model.clone_architecture();
    finite_difference_check(&mut model.params, true, probes, seed, |g| {
        let x = g.input(input.clone());
        let y = arch.forward(g, x, None)?;
        g.weighted_mse(y, target.clone(), weights.to_vec())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_head_is_exact() {
        let mut s = ParamStore::new();
        s.add_normal("w", &[6, 2], 0.0, 0.5, 1).unwrap();
        s.add_normal("b", &[2], 0.0, 0.5, 2).unwrap();
        let x = Tensor::new(vec![1, 6, 6], (0..36).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap();
        let target = Tensor::new(vec![1, 2, 6, 1], (0..12).map(|i| (i as f64).cos()).collect()).unwrap();
        let report = finite_difference_check(&mut s, true, 14, 3, |g| {
            let xi = g.input(x.clone());
            let (w, b) = (g.param_by_name("w")?, g.param_by_name("b")?);
            let y = g.linear(xi, w, Some(b))?;
            let y = g.tokens_to_map(y, 6, 1)?;
            g.weighted_mse(y, target.clone(), vec![1.0, 1.0])
        })
        .unwrap();
        assert_eq!(report.checked, 14);
        // the loss is quadratic in the weights, so central differences are exact
        // up to rounding
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn stationary_point_has_zero_gradient() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::new(vec![1, 1], vec![2.0]).unwrap(), true).unwrap();
        let x = Tensor::new(vec![1, 3, 1], vec![1.0, -1.0, 0.5]).unwrap();
        let target = Tensor::new(vec![1, 1, 3, 1], vec![2.0, -2.0, 1.0]).unwrap();
        let build = |g: &mut Graph| {
            let xi = g.input(x.clone());
            let w = g.param_by_name("w")?;
            let y = g.linear(xi, w, None)?;
            let y = g.tokens_to_map(y, 3, 1)?;
            g.weighted_mse(y, target.clone(), vec![1.0])
        };
        let mut g = Graph::new(&s, true);
        let l = build(&mut g).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        assert_eq!(g.backward(l).unwrap().get(id).unwrap().data(), &[0.0]);
        let report = finite_difference_check(&mut s, true, 1, 0, build).unwrap();
        assert!(report.max_rel_error < 1e-4);
    }
}
