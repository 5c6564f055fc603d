//! Reverse-mode autodiff tape over [`Tensor`] values.

use rand::Rng as _;
use rayon::prelude::*;

use super::params::{Gradients, ParamId, ParamStore};
use super::resize::{apply_separable, apply_separable_adjoint, interp_matrix, Interp};
use super::tensor::{matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, Tensor};
use crate::rng::Rng;
use crate::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const BATCH_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param(ParamId),
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Gelu(Var),
    Dropout(Var, Vec<f64>),
    Linear { x: Var, w: Var, b: Option<Var> },
    LayerNorm { x: Var, g: Var, b: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, cols: Vec<Vec<f64>> },
    BatchNorm { x: Var, g: Var, b: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Resize { x: Var, ry: Vec<f64>, rx: Vec<f64> },
    Concat(Vec<Var>),
    MapToTokens(Var),
    TokensToMap(Var),
    WeightedMse { pred: Var, target: Tensor, weights: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics observed by a training-mode batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub unbiased_var: Vec<f64>,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    train: bool,
    bn_stats: Vec<BatchNormStats>,
    relu_pattern: Vec<bool>,
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044_715 * x * x * x);
    let t = u.tanh();
    let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044_715 * x * x);
    (0.5 * x * (1.0 + t), d)
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (size + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Vec<f64> {
    let l = ho * wo;
    let mut cols = vec![0.0; c * k * k * l];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            cols[row * l + oy * wo + ox] = x[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Vec<f64> {
    let l = ho * wo;
    let mut x = vec![0.0; c * h * w];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[(ci * h + iy as usize) * w + ix as usize] += cols[row * l + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot => *slot = Some(g),
    }
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore, train: bool) -> Self {
        Self { store, nodes: Vec::new(), train, bn_stats: Vec::new(), relu_pattern: Vec::new() }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn batch_norm_stats(&self) -> &[BatchNormStats] {
        &self.bn_stats
    }

    /// Signs of every ReLU input seen so far, in evaluation order.
    pub fn relu_pattern(&self) -> &[bool] {
        &self.relu_pattern
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Input, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.store.get(id).clone();
        let requires_grad = self.store.is_trainable(id);
        self.nodes.push(Node { value, op: Op::Param(id), requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param_by_name(&mut self, name: &str) -> Result<Var> {
        let id = self.store.id(name).ok_or_else(|| Error::Model(format!("unknown parameter {name}")))?;
        Ok(self.param(id))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = &self.nodes[x.0].value;
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!("add {:?} + {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// `a + b` with `b` repeated over the leading elements of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if tb.is_empty() || ta.len() % tb.len() != 0 {
            return Err(Error::Shape(format!("broadcast {:?} + {:?}", ta.shape(), tb.shape())));
        }
        let n = tb.len();
        let data = ta.data().iter().enumerate().map(|(i, x)| x + tb.data()[i % n]).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddBroadcast(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let pattern: Vec<bool> = self.nodes[x.0].value.data().iter().map(|&v| v > 0.0).collect();
        self.relu_pattern.extend(pattern);
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, |v| gelu(v).0, Op::Gelu(x))
    }

    /// Inverted dropout; identity outside training or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng) -> Var {
        if !self.train || p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> =
            (0..self.nodes[x.0].value.len()).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        let t = &self.nodes[x.0].value;
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Dropout(x, mask), &[x])
    }

    /// `x[..., din] * w[din, dout] + b[dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (din, dout) = match tw.shape() {
            [i, o] => (*i, *o),
            s => return Err(Error::Shape(format!("linear weight must be rank 2, got {s:?}"))),
        };
        if tx.shape().last() != Some(&din) {
            return Err(Error::Shape(format!("linear input {:?} vs weight {:?}", tx.shape(), tw.shape())));
        }
        let rows = tx.len() / din;
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = b {
            let tb = &self.nodes[b.0].value;
            if tb.len() != dout {
                return Err(Error::Shape("linear bias length".into()));
            }
            for r in 0..rows {
                out[r * dout..(r + 1) * dout].copy_from_slice(tb.data());
            }
        }
        matmul_acc(tx.data(), tw.data(), &mut out, rows, din, dout);
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = dout;
        let value = Tensor::new(shape, out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let d = *tx.shape().last().ok_or_else(|| Error::Shape("layer norm on scalar".into()))?;
        let (tg, tb) = (&self.nodes[g.0].value, &self.nodes[b.0].value);
        if tg.len() != d || tb.len() != d {
            return Err(Error::Shape("layer norm affine size".into()));
        }
        let rows = tx.len() / d;
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * tg.data()[j] + tb.data()[j];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(value, Op::LayerNorm { x, g, b, xhat, inv_std }, &[x, g, b]))
    }

    /// Multi-head scaled dot-product self-attention over `[N, T, D]` inputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() || tq.shape().len() != 3 {
            return Err(Error::Shape("attention expects equal [N, T, D] inputs".into()));
        }
        let (n, t, d) = (tq.shape()[0], tq.shape()[1], tq.shape()[2]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!("width {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; n * heads * t * t];
        let mut out = vec![0.0; n * t * d];
        for b in 0..n {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
                for i in 0..t {
                    let qi = &tq.data()[(b * t + i) * d + h * dh..(b * t + i) * d + (h + 1) * dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..t {
                        let kj = &tk.data()[(b * t + j) * d + h * dh..(b * t + j) * d + (h + 1) * dh];
                        let s = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * scale;
                        p[i * t + j] = s;
                        max = max.max(s);
                    }
                    let mut z = 0.0;
                    for j in 0..t {
                        p[i * t + j] = (p[i * t + j] - max).exp();
                        z += p[i * t + j];
                    }
                    for j in 0..t {
                        p[i * t + j] /= z;
                        let pij = p[i * t + j];
                        let vj = &tv.data()[(b * t + j) * d + h * dh..(b * t + j) * d + (h + 1) * dh];
                        let o = &mut out[(b * t + i) * d + h * dh..(b * t + i) * d + (h + 1) * dh];
                        for (oo, vv) in o.iter_mut().zip(vj) {
                            *oo += pij * vv;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, t, d], out)?;
        Ok(self.push(value, Op::Attention { q, k, v, heads, probs }, &[q, k, v]))
    }

    /// 2-D convolution, `x[N, Ci, H, W]`, `w[Co, Ci, k, k]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        if tx.shape().len() != 4 || tw.shape().len() != 4 || tw.shape()[2] != tw.shape()[3] {
            return Err(Error::Shape(format!("conv2d input {:?} weight {:?}", tx.shape(), tw.shape())));
        }
        let (n, ci, h, wd) = tx.dims4();
        let (co, wci, k, _) = tw.dims4();
        if wci != ci {
            return Err(Error::Shape(format!("conv2d expects {wci} input channels, got {ci}")));
        }
        let (ho, wo) = match (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Shape("conv2d kernel larger than padded input".into())),
        };
        let bias = match b {
            Some(b) => {
                let tb = &self.nodes[b.0].value;
                if tb.len() != co {
                    return Err(Error::Shape("conv2d bias length".into()));
                }
                Some(tb.data().to_vec())
            }
            None => None,
        };
        let kk = ci * k * k;
        let l = ho * wo;
        let xs = tx.data();
        let ws = tw.data();
        let per_sample: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
            .into_par_iter()
            .map(|s| {
                let cols = im2col(&xs[s * ci * h * wd..(s + 1) * ci * h * wd], ci, h, wd, k, stride, pad, ho, wo);
                let mut out = vec![0.0; co * l];
                if let Some(bias) = &bias {
                    for (c, bv) in bias.iter().enumerate() {
                        out[c * l..(c + 1) * l].fill(*bv);
                    }
                }
                matmul_acc(ws, &cols, &mut out, co, kk, l);
                (out, cols)
            })
            .collect();
        let mut out = Vec::with_capacity(n * co * l);
        let mut cols = Vec::with_capacity(n);
        for (o, c) in per_sample {
            out.extend(o);
            cols.push(c);
        }
        let value = Tensor::new(vec![n, co, ho, wo], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(value, Op::Conv2d { x, w, b, stride, pad, cols }, &inputs))
    }

    /// Per-channel batch norm over `[N, C, H, W]`. Training mode normalizes with
    /// batch statistics and records them; inference reads the running buffers
    /// `{name}.running_mean` / `{name}.running_var`.
    pub fn batch_norm(&mut self, x: Var, g: Var, b: Var, name: &str) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if tx.shape().len() != 4 {
            return Err(Error::Shape("batch norm expects [N, C, H, W]".into()));
        }
        let (n, c, h, w) = tx.dims4();
        let hw = h * w;
        let m = (n * hw) as f64;
        let (mean, var) = if self.train {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for s_ in 0..n {
                    s += tx.data()[(s_ * c + ch) * hw..(s_ * c + ch + 1) * hw].iter().sum::<f64>();
                }
                mean[ch] = s / m;
                let mut v = 0.0;
                for s_ in 0..n {
                    v += tx.data()[(s_ * c + ch) * hw..(s_ * c + ch + 1) * hw]
                        .iter()
                        .map(|x| (x - mean[ch]) * (x - mean[ch]))
                        .sum::<f64>();
                }
                var[ch] = v / m;
            }
            let unbiased = var.iter().map(|v| if m > 1.0 { v * m / (m - 1.0) } else { *v }).collect();
            self.bn_stats.push(BatchNormStats { name: name.to_string(), mean: mean.clone(), unbiased_var: unbiased });
            (mean, var)
        } else {
            let rm = self.store.buffer(&format!("{name}.running_mean"));
            let rv = self.store.buffer(&format!("{name}.running_var"));
            match (rm, rv) {
                (Some(a), Some(b)) if a.len() == c && b.len() == c => (a.data().to_vec(), b.data().to_vec()),
                _ => return Err(Error::Model(format!("missing running statistics for {name}"))),
            }
        };
        let (tg, tb) = (&self.nodes[g.0].value, &self.nodes[b.0].value);
        if tg.len() != c || tb.len() != c {
            return Err(Error::Shape("batch norm affine size".into()));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; tx.len()];
        let mut out = vec![0.0; tx.len()];
        for s in 0..n {
            for ch in 0..c {
                for i in 0..hw {
                    let idx = (s * c + ch) * hw + i;
                    let xh = (tx.data()[idx] - mean[ch]) * inv_std[ch];
                    xhat[idx] = xh;
                    out[idx] = xh * tg.data()[ch] + tb.data()[ch];
                }
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let train = self.train;
        Ok(self.push(value, Op::BatchNorm { x, g, b, xhat, inv_std, train }, &[x, g, b]))
    }

    pub fn resize(&mut self, x: Var, oh: usize, ow: usize, mode: Interp) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if tx.shape().len() != 4 || oh == 0 || ow == 0 {
            return Err(Error::Shape("resize expects [N, C, H, W] and a non-empty target".into()));
        }
        let (n, c, h, w) = tx.dims4();
        let ry = interp_matrix(h, oh, mode);
        let rx = interp_matrix(w, ow, mode);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            out.extend(apply_separable(&tx.data()[p * h * w..(p + 1) * h * w], h, w, &ry, oh, &rx, ow));
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, Op::Resize { x, ry, rx }, &[x]))
    }

    /// Channel concatenation of `[N, C_i, H, W]` tensors.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.nodes[xs[0].0].value.dims4();
        let mut total_c = 0;
        for v in xs {
            let (n, c, h, w) = self.nodes[v.0].value.dims4();
            if (n, h, w) != (first.0, first.2, first.3) {
                return Err(Error::Shape("concat spatial mismatch".into()));
            }
            total_c += c;
        }
        let (n, _, h, w) = first;
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total_c * hw);
        for s in 0..n {
            for v in xs {
                let t = &self.nodes[v.0].value;
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[s * c * hw..(s + 1) * c * hw]);
            }
        }
        let value = Tensor::new(vec![n, total_c, h, w], out)?;
        Ok(self.push(value, Op::Concat(xs.to_vec()), xs))
    }

    /// `[N, D, h, w]` to `[N, h*w, D]`, row-major over the grid.
    pub fn map_to_tokens(&mut self, x: Var) -> Var {
        let (n, d, h, w) = self.nodes[x.0].value.dims4();
        let src = self.nodes[x.0].value.data();
        let t = h * w;
        let mut out = vec![0.0; n * t * d];
        for s in 0..n {
            for c in 0..d {
                for p in 0..t {
                    out[(s * t + p) * d + c] = src[(s * d + c) * t + p];
                }
            }
        }
        let value = Tensor::new(vec![n, t, d], out).expect("consistent shape");
        self.push(value, Op::MapToTokens(x), &[x])
    }

    pub fn tokens_to_map(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let shape = self.nodes[x.0].value.shape().to_vec();
        if shape.len() != 3 || shape[1] != h * w {
            return Err(Error::Shape(format!("{shape:?} is not a {h}x{w} token grid")));
        }
        let (n, t, d) = (shape[0], shape[1], shape[2]);
        let src = self.nodes[x.0].value.data();
        let mut out = vec![0.0; n * t * d];
        for s in 0..n {
            for p in 0..t {
                for c in 0..d {
                    out[(s * d + c) * t + p] = src[(s * t + p) * d + c];
                }
            }
        }
        let value = Tensor::new(vec![n, d, h, w], out)?;
        Ok(self.push(value, Op::TokensToMap(x), &[x]))
    }

    /// `sum_j weights[j] * mean((pred[:, j] - target[:, j])^2)` over `[N, M, H, W]`.
    pub fn weighted_mse(&mut self, pred: Var, target: Tensor, weights: Vec<f64>) -> Result<Var> {
        let tp = &self.nodes[pred.0].value;
        if tp.shape() != target.shape() || tp.shape().len() != 4 || tp.shape()[1] != weights.len() {
            return Err(Error::Shape(format!("loss pred {:?} target {:?}", tp.shape(), target.shape())));
        }
        let (n, m, h, w) = tp.dims4();
        let hw = h * w;
        let mut per = vec![0.0; m];
        for s in 0..n {
            for j in 0..m {
                let base = (s * m + j) * hw;
                per[j] += tp.data()[base..base + hw]
                    .iter()
                    .zip(&target.data()[base..base + hw])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
            }
        }
        let count = (n * hw) as f64;
        let loss: f64 = per.iter().zip(&weights).map(|(s, wj)| wj * s / count).sum();
        Ok(self.push(Tensor::scalar(loss), Op::WeightedMse { pred, target, weights }, &[pred]))
    }

    /// Gradients of the scalar `loss` for every trainable parameter reached.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Model("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut param_grads: Vec<Option<Tensor>> = vec![None; self.store.len()];
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let needs = |v: &Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    let t = Tensor::new(node.value.shape().to_vec(), g)?;
                    match &mut param_grads[id.0] {
                        Some(existing) => existing.add_assign(&t),
                        slot => *slot = Some(t),
                    }
                }
                Op::Add(a, b) => {
                    if needs(b) {
                        acc(&mut grads, *b, g.clone());
                    }
                    if needs(a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::AddBroadcast(a, b) => {
                    if needs(b) {
                        let n = self.nodes[b.0].value.len();
                        let mut gb = vec![0.0; n];
                        for (i, v) in g.iter().enumerate() {
                            gb[i % n] += v;
                        }
                        acc(&mut grads, *b, gb);
                    }
                    if needs(a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Scale(x, s) => acc(&mut grads, *x, g.iter().map(|v| v * s).collect()),
                Op::Relu(x) => {
                    let xv = self.nodes[x.0].value.data();
                    acc(&mut grads, *x, g.iter().zip(xv).map(|(gv, &v)| if v > 0.0 { *gv } else { 0.0 }).collect());
                }
                Op::Tanh(x) => {
                    let y = node.value.data();
                    acc(&mut grads, *x, g.iter().zip(y).map(|(gv, yv)| gv * (1.0 - yv * yv)).collect());
                }
                Op::Gelu(x) => {
                    let xv = self.nodes[x.0].value.data();
                    acc(&mut grads, *x, g.iter().zip(xv).map(|(gv, &v)| gv * gelu(v).1).collect());
                }
                Op::Dropout(x, mask) => acc(&mut grads, *x, g.iter().zip(mask).map(|(a, m)| a * m).collect()),
                Op::Linear { x, w, b } => {
                    let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                    let (din, dout) = (tw.shape()[0], tw.shape()[1]);
                    let rows = tx.len() / din;
                    if needs(x) {
                        let mut gx = vec![0.0; rows * din];
                        matmul_a_bt_acc(&g, tw.data(), &mut gx, rows, dout, din);
                        acc(&mut grads, *x, gx);
                    }
                    if needs(w) {
                        let mut gw = vec![0.0; din * dout];
                        matmul_at_b_acc(tx.data(), &g, &mut gw, rows, din, dout);
                        acc(&mut grads, *w, gw);
                    }
                    if let Some(b) = b.filter(|b| needs(b)) {
                        let mut gb = vec![0.0; dout];
                        for r in 0..rows {
                            for (o, v) in gb.iter_mut().zip(&g[r * dout..(r + 1) * dout]) {
                                *o += v;
                            }
                        }
                        acc(&mut grads, b, gb);
                    }
                }
                Op::LayerNorm { x, g: gamma, b, xhat, inv_std } => {
                    let d = self.nodes[gamma.0].value.len();
                    let gm = self.nodes[gamma.0].value.data();
                    let rows = xhat.len() / d;
                    if needs(x) {
                        let mut gx = vec![0.0; xhat.len()];
                        for r in 0..rows {
                            let (mut s1, mut s2) = (0.0, 0.0);
                            for j in 0..d {
                                let gh = g[r * d + j] * gm[j];
                                s1 += gh;
                                s2 += gh * xhat[r * d + j];
                            }
                            let (s1, s2) = (s1 / d as f64, s2 / d as f64);
                            for j in 0..d {
                                let gh = g[r * d + j] * gm[j];
                                gx[r * d + j] = inv_std[r] * (gh - s1 - xhat[r * d + j] * s2);
                            }
                        }
                        acc(&mut grads, *x, gx);
                    }
                    if needs(gamma) || needs(b) {
                        let (mut gg, mut gb) = (vec![0.0; d], vec![0.0; d]);
                        for r in 0..rows {
                            for j in 0..d {
                                gg[j] += g[r * d + j] * xhat[r * d + j];
                                gb[j] += g[r * d + j];
                            }
                        }
                        if needs(gamma) {
                            acc(&mut grads, *gamma, gg);
                        }
                        if needs(b) {
                            acc(&mut grads, *b, gb);
                        }
                    }
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (tq, tk, tv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
                    let (n, t, d) = (tq.shape()[0], tq.shape()[1], tq.shape()[2]);
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let (mut gq, mut gk, mut gv) = (vec![0.0; n * t * d], vec![0.0; n * t * d], vec![0.0; n * t * d]);
                    let at = |s: usize, i: usize, h: usize| (s * t + i) * d + h * dh;
                    for s in 0..n {
                        for h in 0..*heads {
                            let p = &probs[(s * heads + h) * t * t..(s * heads + h + 1) * t * t];
                            let mut gs = vec![0.0; t * t];
                            for i in 0..t {
                                let go = &g[at(s, i, h)..at(s, i, h) + dh];
                                let mut dot = 0.0;
                                for j in 0..t {
                                    let vj = &tv.data()[at(s, j, h)..at(s, j, h) + dh];
                                    let gp = go.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>();
                                    gs[i * t + j] = gp;
                                    dot += gp * p[i * t + j];
                                    let pij = p[i * t + j];
                                    for (o, gov) in gv[at(s, j, h)..at(s, j, h) + dh].iter_mut().zip(go) {
                                        *o += pij * gov;
                                    }
                                }
                                for j in 0..t {
                                    gs[i * t + j] = p[i * t + j] * (gs[i * t + j] - dot) * scale;
                                }
                            }
                            for i in 0..t {
                                for j in 0..t {
                                    let gsv = gs[i * t + j];
                                    if gsv == 0.0 {
                                        continue;
                                    }
                                    for c in 0..dh {
                                        gq[at(s, i, h) + c] += gsv * tk.data()[at(s, j, h) + c];
                                        gk[at(s, j, h) + c] += gsv * tq.data()[at(s, i, h) + c];
                                    }
                                }
                            }
                        }
                    }
                    for (var, gr) in [(q, gq), (k, gk), (v, gv)] {
                        if needs(var) {
                            acc(&mut grads, *var, gr);
                        }
                    }
                }
                Op::Conv2d { x, w, b, stride, pad, cols } => {
                    let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                    let (n, ci, h, wd) = tx.dims4();
                    let (co, _, k, _) = tw.dims4();
                    let (_, _, ho, wo) = node.value.dims4();
                    let (kk, l) = (ci * k * k, ho * wo);
                    let (need_x, need_w) = (needs(x), needs(w));
                    let ws = tw.data();
                    let per_sample: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..n)
                        .into_par_iter()
                        .map(|s| {
                            let gs = &g[s * co * l..(s + 1) * co * l];
                            let mut gw = Vec::new();
                            if need_w {
                                gw = vec![0.0; co * kk];
                                matmul_a_bt_acc(gs, &cols[s], &mut gw, co, l, kk);
                            }
                            let gb: Vec<f64> = (0..co).map(|c| gs[c * l..(c + 1) * l].iter().sum()).collect();
                            let mut gx = Vec::new();
                            if need_x {
                                let mut gcols = vec![0.0; kk * l];
                                matmul_at_b_acc(ws, gs, &mut gcols, co, kk, l);
                                gx = col2im(&gcols, ci, h, wd, k, *stride, *pad, ho, wo);
                            }
                            (gw, gb, gx)
                        })
                        .collect();
                    let mut gw_total = vec![0.0; co * kk];
                    let mut gb_total = vec![0.0; co];
                    let mut gx_total = Vec::with_capacity(if need_x { tx.len() } else { 0 });
                    for (gw, gb, gx) in per_sample {
                        for (a, b) in gw_total.iter_mut().zip(&gw) {
                            *a += b;
                        }
                        for (a, b) in gb_total.iter_mut().zip(&gb) {
                            *a += b;
                        }
                        gx_total.extend(gx);
                    }
                    if need_w {
                        acc(&mut grads, *w, gw_total);
                    }
                    if let Some(b) = b.filter(|b| needs(b)) {
                        acc(&mut grads, b, gb_total);
                    }
                    if need_x {
                        acc(&mut grads, *x, gx_total);
                    }
                }
                Op::BatchNorm { x, g: gamma, b, xhat, inv_std, train } => {
                    let (n, c, h, w) = node.value.dims4();
                    let hw = h * w;
                    let m = (n * hw) as f64;
                    let gm = self.nodes[gamma.0].value.data();
                    let (mut gg, mut gb) = (vec![0.0; c], vec![0.0; c]);
                    for s in 0..n {
                        for ch in 0..c {
                            for i in 0..hw {
                                let idx = (s * c + ch) * hw + i;
                                gg[ch] += g[idx] * xhat[idx];
                                gb[ch] += g[idx];
                            }
                        }
                    }
                    if needs(x) {
                        let mut gx = vec![0.0; g.len()];
                        for ch in 0..c {
                            let k = gm[ch] * inv_std[ch];
                            for s in 0..n {
                                for i in 0..hw {
                                    let idx = (s * c + ch) * hw + i;
                                    gx[idx] = if *train {
                                        k * (g[idx] - gb[ch] / m - xhat[idx] * gg[ch] / m)
                                    } else {
                                        k * g[idx]
                                    };
                                }
                            }
                        }
                        acc(&mut grads, *x, gx);
                    }
                    if needs(gamma) {
                        acc(&mut grads, *gamma, gg);
                    }
                    if needs(b) {
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Resize { x, ry, rx } => {
                    let (n, c, h, w) = self.nodes[x.0].value.dims4();
                    let (_, _, oh, ow) = node.value.dims4();
                    let mut gx = Vec::with_capacity(n * c * h * w);
                    for p in 0..n * c {
                        gx.extend(apply_separable_adjoint(&g[p * oh * ow..(p + 1) * oh * ow], oh, ow, ry, h, rx, w));
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Concat(xs) => {
                    let (n, total_c, h, w) = node.value.dims4();
                    let hw = h * w;
                    let mut offset = 0;
                    for v in xs {
                        let c = self.nodes[v.0].value.shape()[1];
                        if needs(v) {
                            let mut gv = Vec::with_capacity(n * c * hw);
                            for s in 0..n {
                                let base = (s * total_c + offset) * hw;
                                gv.extend_from_slice(&g[base..base + c * hw]);
                            }
                            acc(&mut grads, *v, gv);
                        }
                        offset += c;
                    }
                }
                Op::MapToTokens(x) => {
                    let (n, d, h, w) = self.nodes[x.0].value.dims4();
                    let t = h * w;
                    let mut gx = vec![0.0; g.len()];
                    for s in 0..n {
                        for c in 0..d {
                            for p in 0..t {
                                gx[(s * d + c) * t + p] = g[(s * t + p) * d + c];
                            }
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::TokensToMap(x) => {
                    let (n, d, h, w) = node.value.dims4();
                    let t = h * w;
                    let mut gx = vec![0.0; g.len()];
                    for s in 0..n {
                        for p in 0..t {
                            for c in 0..d {
                                gx[(s * t + p) * d + c] = g[(s * d + c) * t + p];
                            }
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::WeightedMse { pred, target, weights } => {
                    let tp = &self.nodes[pred.0].value;
                    let (n, m, h, w) = tp.dims4();
                    let hw = h * w;
                    let count = (n * hw) as f64;
                    let mut gp = vec![0.0; tp.len()];
                    for s in 0..n {
                        for j in 0..m {
                            let f = g[0] * weights[j] * 2.0 / count;
                            for i in 0..hw {
                                let idx = (s * m + j) * hw + i;
                                gp[idx] = f * (tp.data()[idx] - target.data()[idx]);
                            }
                        }
                    }
                    acc(&mut grads, *pred, gp);
                }
            }
        }
        Ok(Gradients { grads: param_grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Compares analytic gradients of every parameter against central
    /// differences of the scalar produced by `build`.
    fn check<F>(store: &mut ParamStore, train: bool, build: F)
    where
        F: Fn(&mut Graph) -> Var,
    {
        let grads = {
            let mut g = Graph::new(store, train);
            let loss = build(&mut g);
            g.backward(loss).unwrap()
        };
        let h = 1e-5;
        for id in store.ids().collect::<Vec<_>>() {
            let Some(analytic) = grads.get(id).cloned() else { continue };
            for i in 0..store.get(id).len() {
                let orig = store.get(id).data()[i];
                let eval = |v: f64, store: &mut ParamStore| {
                    store.get_mut(id).data_mut()[i] = v;
                    let mut g = Graph::new(store, train);
                    let l = build(&mut g);
                    g.value(l).item()
                };
                let fp = eval(orig + h, store);
                let fm = eval(orig - h, store);
                store.get_mut(id).data_mut()[i] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let a = analytic.data()[i];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(err < 1e-5, "{} [{i}]: analytic {a} vs fd {fd}", store.entry(id).name);
            }
        }
    }

    fn mse_to(g: &mut Graph, x: Var, seed: u64) -> Var {
        let shape = g.shape(x).to_vec();
        let x = if shape.len() == 3 { g.tokens_to_map(x, shape[1], 1).unwrap() } else { x };
        let shape = g.shape(x).to_vec();
        let w = vec![1.0; shape[1]];
        g.weighted_mse(x, random(&shape, seed), w).unwrap()
    }

    #[test]
    fn linear_layer_norm_gelu_grads() {
        let mut s = ParamStore::new();
        s.add("x", random(&[2, 3, 4], 1), true).unwrap();
        s.add("w", random(&[4, 5], 2), true).unwrap();
        s.add("b", random(&[5], 3), true).unwrap();
        s.add("g", random(&[5], 4), true).unwrap();
        s.add("beta", random(&[5], 5), true).unwrap();
        check(&mut s, true, |g| {
            let [x, w, b, ga, be] = ["x", "w", "b", "g", "beta"].map(|n| g.param_by_name(n).unwrap());
            let y = g.linear(x, w, Some(b)).unwrap();
            let y = g.layer_norm(y, ga, be).unwrap();
            let y = g.gelu(y);
            let y = g.scale(y, 1.7);
            let y = g.add_broadcast(y, b).unwrap();
            mse_to(g, y, 9)
        });
    }

    #[test]
    fn attention_grads() {
        let mut s = ParamStore::new();
        for (i, n) in ["q", "k", "v"].iter().enumerate() {
            s.add(n, random(&[2, 3, 4], 10 + i as u64), true).unwrap();
        }
        check(&mut s, true, |g| {
            let [q, k, v] = ["q", "k", "v"].map(|n| g.param_by_name(n).unwrap());
            let y = g.attention(q, k, v, 2).unwrap();
            let y = g.tanh(y);
            mse_to(g, y, 4)
        });
    }

    #[test]
    fn conv_batch_norm_grads() {
        let mut s = ParamStore::new();
        s.add("x", random(&[2, 2, 5, 6], 1), true).unwrap();
        s.add("w", random(&[3, 2, 3, 3], 2), true).unwrap();
        s.add("b", random(&[3], 3), true).unwrap();
        s.add("g", random(&[3], 4), true).unwrap();
        s.add("beta", random(&[3], 5), true).unwrap();
        for stride in [1, 2] {
            check(&mut s, true, |g| {
                let [x, w, b, ga, be] = ["x", "w", "b", "g", "beta"].map(|n| g.param_by_name(n).unwrap());
                let y = g.conv2d(x, w, Some(b), stride, 1).unwrap();
                let y = g.batch_norm(y, ga, be, "bn").unwrap();
                let y = g.tanh(y);
                mse_to(g, y, 6)
            });
        }
    }

    #[test]
    fn eval_batch_norm_grads() {
        let mut s = ParamStore::new();
        s.add("x", random(&[2, 3, 2, 2], 1), true).unwrap();
        s.add("g", random(&[3], 4), true).unwrap();
        s.add("beta", random(&[3], 5), true).unwrap();
        s.set_buffer("bn.running_mean", Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap());
        s.set_buffer("bn.running_var", Tensor::new(vec![3], vec![0.5, 1.0, 2.0]).unwrap());
        check(&mut s, false, |g| {
            let [x, ga, be] = ["x", "g", "beta"].map(|n| g.param_by_name(n).unwrap());
            let y = g.batch_norm(x, ga, be, "bn").unwrap();
            mse_to(g, y, 6)
        });
    }

    #[test]
    fn resize_concat_token_grads() {
        let mut s = ParamStore::new();
        s.add("a", random(&[2, 2, 3, 3], 1), true).unwrap();
        s.add("b", random(&[2, 1, 6, 6], 2), true).unwrap();
        check(&mut s, true, |g| {
            let [a, b] = ["a", "b"].map(|n| g.param_by_name(n).unwrap());
            let up = g.resize(a, 6, 6, Interp::Bilinear).unwrap();
            let cat = g.concat(&[up, b]).unwrap();
            let down = g.resize(cat, 4, 5, Interp::Bicubic).unwrap();
            let t = g.map_to_tokens(down);
            let m = g.tokens_to_map(t, 4, 5).unwrap();
            let r = g.relu(m);
            let y = g.add(r, m).unwrap();
            mse_to(g, y, 3)
        });
    }

    #[test]
    fn token_permutation_round_trip() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s, false);
        let x = g.input(random(&[2, 3, 2, 4], 1));
        let t = g.map_to_tokens(x);
        assert_eq!(g.shape(t), &[2, 8, 3]);
        // token p of sample 1, channel c is the map pixel p
        assert_eq!(g.value(t).data()[(8 + 5) * 3 + 2], g.value(x).data()[(3 + 2) * 8 + 5]);
        let back = g.tokens_to_map(t, 2, 4).unwrap();
        assert_eq!(g.value(back), g.value(x));
    }

    #[test]
    fn dropout_scales_and_masks() {
        let s = ParamStore::new();
        let mut r = crate::rng::substream(1, "d");
        let mut g = Graph::new(&s, true);
        let x = g.input(Tensor::filled(&[1000], 1.0));
        let y = g.dropout(x, 0.25, &mut r);
        let v = g.value(y).data();
        assert!(v.iter().all(|&e| e == 0.0 || (e - 4.0 / 3.0).abs() < 1e-12));
        let zeros = v.iter().filter(|&&e| e == 0.0).count();
        assert!((200..300).contains(&zeros));
        let mut ge = Graph::new(&s, false);
        let xe = ge.input(Tensor::filled(&[4], 1.0));
        assert_eq!(ge.dropout(xe, 0.5, &mut r), xe);
    }

    #[test]
    fn conv_matches_direct_loops() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s, false);
        let (x, w) = (random(&[1, 2, 5, 5], 1), random(&[2, 2, 3, 3], 2));
        let xv = g.input(x.clone());
        let wv = g.input(w.clone());
        let y = g.conv2d(xv, wv, None, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 3, 3]);
        for co in 0..2 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut s = 0.0;
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (iy, ix) = ((oy * 2 + ky) as i64 - 1, (ox * 2 + kx) as i64 - 1);
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    s += x.data()[(ci * 5 + iy as usize) * 5 + ix as usize]
                                        * w.data()[((co * 2 + ci) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                    }
                    assert!((g.value(y).data()[(co * 3 + oy) * 3 + ox] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn weighted_mse_examples() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s, false);
        // per-marker MSE 0.1 each, weights 1/(M sigma) with sigma (1, 0.5)
        let pred = Tensor::new(vec![1, 2, 1, 1], vec![0.1f64.sqrt(), 0.1f64.sqrt()]).unwrap();
        let p = g.input(pred);
        let l = g.weighted_mse(p, Tensor::zeros(&[1, 2, 1, 1]), vec![0.5, 1.0]).unwrap();
        assert!((g.value(l).item() - 0.15).abs() < 1e-12);
    }
}
