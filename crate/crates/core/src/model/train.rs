use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::augment::{augment_pair, AugmentConfig};
use super::graph::Graph;
use super::loss::{per_marker_mse, scale_target, LossConfig};
use super::optim::{clip_grad_norm, learning_rate, Adam};
use super::predict::{global_pearson, predict_tiles};
use super::tensor::Tensor;
use super::translator::{normalize_input, ForwardRng, Translator};
use crate::{rng, Error, Result};

/// Paired training tile: H&E planes `[3, H, W]` in `[0, 1]` and normalized
/// targets `[M, H, W]` in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub he: Tensor,
    pub target: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    /// Overrides the encoder dropout rate during training.
    pub dropout: Option<f64>,
    /// Validate every this many steps; 0 validates only at the end.
    pub val_every: usize,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            warmup: 400,
            weight_decay: 1e-5,
            grad_clip_norm: 1.0,
            batch: 16,
            epochs: 1,
            seed: 0,
            beta1: 0.5,
            beta2: 0.999,
            dropout: Some(0.1),
            val_every: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch == 0 || !(self.grad_clip_norm >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Invalid("lr and batch must be positive; clip and weight decay non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Invalid("Adam betas must lie in [0, 1)".into()));
        }
        if self.dropout.is_some_and(|d| !(0.0..1.0).contains(&d)) {
            return Err(Error::Invalid("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub marker_mse: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: usize,
    pub pearson: Vec<Option<f64>>,
    pub mean_pearson: Option<f64>,
}

pub enum TrainEvent<'a> {
    Step(&'a StepRecord),
    Validation { record: &'a ValidationRecord, improved: bool },
}

pub struct Trainer {
    pub model: Translator,
    pub config: TrainConfig,
    pub loss: LossConfig,
    pub optimizer: Adam,
    /// Completed optimizer steps.
    pub step: usize,
    pub curve: Vec<StepRecord>,
    pub validations: Vec<ValidationRecord>,
    /// `(step, mean validation Pearson)` of the best model so far.
    pub best: Option<(usize, f64)>,
}

impl Trainer {
    pub fn new(model: Translator, config: TrainConfig, loss: LossConfig) -> Result<Self> {
        config.validate()?;
        if loss.sigma.len() != model.config.markers {
            return Err(Error::Invalid(format!(
                "loss has {} markers, model has {}",
                loss.sigma.len(),
                model.config.markers
            )));
        }
        let optimizer = Adam::new(config.beta1, config.beta2, config.weight_decay);
        Ok(Self { model, config, loss, optimizer, step: 0, curve: Vec::new(), validations: Vec::new(), best: None })
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.config.batch)
    }

    pub fn total_steps(&self, n: usize) -> usize {
        self.config.epochs * self.steps_per_epoch(n)
    }

    /// Sample indices of `step`: consecutive slices of a per-epoch permutation.
    pub fn batch_indices(&self, step: usize, n: usize) -> Vec<usize> {
        let spe = self.steps_per_epoch(n);
        let (epoch, b) = (step / spe, step % spe);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng::indexed(self.config.seed, "train/epoch", epoch as u64));
        perm[b * self.config.batch..((b + 1) * self.config.batch).min(n)].to_vec()
    }

    pub fn train_step(&mut self, data: &[TrainSample]) -> Result<StepRecord> {
        let total = self.total_steps(data.len());
        let step = self.step;
        let idx = self.batch_indices(step, data.len());
        let seed = self.config.seed;
        let aug = &self.config.augment;
        let pairs: Vec<(Tensor, Tensor)> = idx
            .par_iter()
            .enumerate()
            .map(|(pos, &i)| {
                let mut r = rng::indexed(seed, &format!("train/augment/{step}"), pos as u64);
                augment_pair(&data[i].he, &data[i].target, aug, &mut r)
            })
            .collect();
        let planes: Vec<&Tensor> = pairs.iter().map(|p| &p.0).collect();
        let input = normalize_input(&planes)?;
        let m = self.model.config.markers;
        let (h, w) = (input.shape()[2], input.shape()[3]);
        let mut target = Vec::with_capacity(pairs.len() * m * h * w);
        for (_, t) in &pairs {
            if t.shape() != [m, h, w] {
                return Err(Error::Shape(format!("target {:?} does not match [{m}, {h}, {w}]", t.shape())));
            }
            target.extend(t.data().iter().map(|&v| scale_target(v)));
        }
        let target = Tensor::new(vec![pairs.len(), m, h, w], target)?;
        let rate = self.config.dropout.unwrap_or(self.model.config.vit.dropout);
        let mut drop_rng = rng::indexed(seed, "train/dropout", step as u64);
        let (loss, marker_mse, mut grads, bn) = {
            let mut g = Graph::new(&self.model.params, true);
            let x = g.input(input);
            let mut fr = ForwardRng { dropout: &mut drop_rng, rate };
            let y = self.model.forward(&mut g, x, Some(&mut fr))?;
            let marker_mse = per_marker_mse(g.value(y), &target);
            let l = g.weighted_mse(y, target, self.loss.channel_weights())?;
            let loss = g.value(l).item();
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss {loss} at step {step}")));
            }
            (loss, marker_mse, g.backward(l)?, g.batch_norm_stats().to_vec())
        };
        let grad_norm = clip_grad_norm(&mut grads, self.config.grad_clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm {grad_norm} at step {step}")));
        }
        let lr = learning_rate(self.config.lr, step + 1, total, self.config.warmup);
        self.optimizer.step(&mut self.model.params, &grads, lr);
        self.model.update_running_stats(&bn);
        self.step += 1;
        let record = StepRecord { step: self.step, lr, loss, grad_norm, marker_mse };
        self.curve.push(record.clone());
        Ok(record)
    }

    pub fn validate(&mut self, val: &[TrainSample]) -> Result<(ValidationRecord, bool)> {
        let planes: Vec<&Tensor> = val.iter().map(|s| &s.he).collect();
        let preds = predict_tiles(&self.model, &planes, self.config.batch)?;
        let targets: Vec<&Tensor> = val.iter().map(|s| &s.target).collect();
        let pearson = global_pearson(&preds, &targets);
        let defined: Vec<f64> = pearson.iter().flatten().copied().collect();
        let mean_pearson = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        let improved = match (mean_pearson, self.best) {
            (Some(p), Some((_, b))) => p > b,
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            self.best = mean_pearson.map(|p| (self.step, p));
        }
        let record = ValidationRecord { step: self.step, pearson, mean_pearson };
        self.validations.push(record.clone());
        Ok((record, improved))
    }

    /// Trains until the configured epochs are done (or `stop_after` steps),
    /// validating on `val` when non-empty.
    pub fn run<F>(&mut self, train: &[TrainSample], val: &[TrainSample], stop_after: Option<usize>, mut on_event: F) -> Result<()>
    where
        F: FnMut(&Trainer, TrainEvent) -> Result<()>,
    {
        if train.is_empty() {
            return Err(Error::Invalid("training split is empty".into()));
        }
        let total = self.total_steps(train.len());
        let end = stop_after.map_or(total, |s| s.min(total));
        while self.step < end {
            let record = self.train_step(train)?;
            on_event(self, TrainEvent::Step(&record))?;
            let periodic = self.config.val_every > 0 && self.step.is_multiple_of(self.config.val_every);
            if !val.is_empty() && (periodic || self.step == total) {
                let (record, improved) = self.validate(val)?;
                on_event(self, TrainEvent::Validation { record: &record, improved })?;
            }
        }
        Ok(())
    }
}

/// Loss curve CSV: `step,lr,loss,grad_norm,mse_<marker>...`.
pub fn write_loss_curve<W: std::io::Write>(curve: &[StepRecord], markers: &[String], preamble: &[String], mut out: W) -> Result<()> {
    let io = |e| Error::io("<loss curve>", e);
    for line in preamble {
        writeln!(out, "# {line}").map_err(io)?;
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["step".to_string(), "lr".into(), "loss".into(), "grad_norm".into()];
    header.extend(markers.iter().map(|m| format!("mse_{m}")));
    w.write_record(&header)?;
    for r in curve {
        let mut row = vec![r.step.to_string(), r.lr.to_string(), r.loss.to_string(), r.grad_norm.to_string()];
        row.extend(r.marker_mse.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}
