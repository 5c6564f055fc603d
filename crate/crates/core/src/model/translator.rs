use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::resize::Interp;
use super::tensor::Tensor;
use crate::rng::{self, Rng};
use crate::{Error, Result};

pub const INIT_STD: f64 = 0.02;
/// Spatial stride of the decoder bottleneck.
pub const BOTTLENECK_STRIDE: usize = 16;
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViTConfig {
    pub patch_size: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub dropout: f64,
    /// Side of the stored position-embedding grid; other token grids get a
    /// bicubically resized copy.
    pub pos_grid: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self { patch_size: 8, depth: 4, width: 128, heads: 4, mlp_ratio: 4.0, dropout: 0.1, pos_grid: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 8, alpha: 1.0 }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TranslatorConfig {
    pub vit: ViTConfig,
    pub detail_channels: Vec<usize>,
    pub decoder_channels: Vec<usize>,
    pub markers: usize,
}

impl Default for TranslatorConfig {
    fn default() -> Self {
        Self { vit: ViTConfig::default(), detail_channels: vec![16, 32, 64], decoder_channels: vec![64, 32, 16, 16], markers: 1 }
    }
}

impl TranslatorConfig {
    pub fn validate(&self) -> Result<()> {
        let v = &self.vit;
        if v.patch_size == 0 || v.width == 0 || v.heads == 0 || !v.width.is_multiple_of(v.heads) {
            return Err(Error::Invalid(format!("vit width {} must be a positive multiple of heads {}", v.width, v.heads)));
        }
        if !(v.mlp_ratio > 0.0) || !(0.0..1.0).contains(&v.dropout) || v.pos_grid == 0 {
            return Err(Error::Invalid("vit mlp_ratio must be positive, dropout in [0,1), pos_grid >= 1".into()));
        }
        if self.detail_channels.len() != 3 || self.decoder_channels.len() != 4 {
            return Err(Error::Invalid("expected 3 detail stages and 4 decoder stages".into()));
        }
        if self.detail_channels.iter().chain(&self.decoder_channels).any(|&c| c == 0) || self.markers == 0 {
            return Err(Error::Invalid("channel counts and markers must be positive".into()));
        }
        Ok(())
    }

    fn mlp_hidden(&self) -> usize {
        ((self.vit.width as f64) * self.vit.mlp_ratio).round().max(1.0) as usize
    }
}

/// Translator weights and architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct Translator {
    pub config: TranslatorConfig,
    pub lora: Option<LoraConfig>,
    pub params: ParamStore,
}

fn conv_weight(store: &mut ParamStore, name: &str, shape: &[usize], seed: u64) -> Result<()> {
    store.add_normal(&format!("{name}.w"), shape, 0.0, INIT_STD, seed)?;
    Ok(())
}

fn linear(store: &mut ParamStore, name: &str, din: usize, dout: usize, seed: u64) -> Result<()> {
    store.add_normal(&format!("{name}.w"), &[din, dout], 0.0, INIT_STD, seed)?;
    store.add_const(&format!("{name}.b"), &[dout], 0.0)?;
    Ok(())
}

fn norm(store: &mut ParamStore, name: &str, d: usize) -> Result<()> {
    store.add_const(&format!("{name}.g"), &[d], 1.0)?;
    store.add_const(&format!("{name}.b"), &[d], 0.0)?;
    Ok(())
}

fn batch_norm(store: &mut ParamStore, name: &str, c: usize, seed: u64) -> Result<()> {
    store.add_normal(&format!("{name}.g"), &[c], 1.0, INIT_STD, seed)?;
    store.add_const(&format!("{name}.b"), &[c], 0.0)?;
    store.set_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[c]));
    store.set_buffer(&format!("{name}.running_var"), Tensor::filled(&[c], 1.0));
    Ok(())
}

/// Training-time randomness for one forward pass.
pub struct ForwardRng<'a> {
    pub dropout: &'a mut Rng,
    pub rate: f64,
}

impl Translator {
    pub fn new(config: TranslatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let seed = rng::derive_seed(seed, "model");
        let mut s = ParamStore::new();
        let v = &config.vit;
        let d = v.width;
        conv_weight(&mut s, "vit.patch", &[d, 3, v.patch_size, v.patch_size], seed)?;
        s.add_const("vit.patch.b", &[d], 0.0)?;
        s.add_normal("vit.pos", &[1, d, v.pos_grid, v.pos_grid], 0.0, INIT_STD, seed)?;
        let hidden = config.mlp_hidden();
        for i in 0..v.depth {
            let p = format!("vit.blocks.{i}");
            norm(&mut s, &format!("{p}.ln1"), d)?;
            for proj in ["q", "k", "v", "o"] {
                linear(&mut s, &format!("{p}.attn.{proj}"), d, d, seed)?;
            }
            norm(&mut s, &format!("{p}.ln2"), d)?;
            linear(&mut s, &format!("{p}.mlp.fc1"), d, hidden, seed)?;
            linear(&mut s, &format!("{p}.mlp.fc2"), hidden, d, seed)?;
        }
        norm(&mut s, "vit.norm", d)?;
        let mut cin = 3;
        for (i, &c) in config.detail_channels.iter().enumerate() {
            conv_weight(&mut s, &format!("detail.{i}.conv"), &[c, cin, 3, 3], seed)?;
            batch_norm(&mut s, &format!("detail.{i}.bn"), c, seed)?;
            cin = c;
        }
        let mut cin = d;
        for (i, &c) in config.decoder_channels.iter().enumerate() {
            let skip = config.detail_channels.len().checked_sub(i + 1).map_or(0, |j| config.detail_channels[j]);
            conv_weight(&mut s, &format!("decoder.{i}.conv"), &[c, cin + skip, 3, 3], seed)?;
            batch_norm(&mut s, &format!("decoder.{i}.bn"), c, seed)?;
            cin = c;
        }
        conv_weight(&mut s, "head", &[config.markers, cin, 1, 1], seed)?;
        s.add_const("head.b", &[config.markers], 0.0)?;
        Ok(Self { config, lora: None, params: s })
    }

    /// Adds `W + (alpha/r) A B` adapters to every query and value projection
    /// (`A ~ N(0, 0.02^2)` of shape `[d, r]`, `B = 0` of shape `[r, d]`) and
    /// freezes the rest of the encoder.
    pub fn apply_lora(&mut self, config: LoraConfig, seed: u64) -> Result<()> {
        if self.lora.is_some() {
            return Err(Error::Model("LoRA adapters are already applied".into()));
        }
        if config.rank == 0 {
            return Err(Error::Invalid("LoRA rank must be at least 1".into()));
        }
        let seed = rng::derive_seed(seed, "lora");
        let ids: Vec<_> = self.params.ids().collect();
        for id in ids {
            if self.params.entry(id).name.starts_with("vit.") {
                self.params.set_trainable(id, false);
            }
        }
        let d = self.config.vit.width;
        for i in 0..self.config.vit.depth {
            for proj in ["q", "v"] {
                let p = format!("vit.blocks.{i}.attn.{proj}");
                self.params.add_normal(&format!("{p}.lora_a"), &[d, config.rank], 0.0, INIT_STD, seed)?;
                self.params.add_const(&format!("{p}.lora_b"), &[config.rank, d], 0.0)?;
            }
        }
        self.lora = Some(config);
        Ok(())
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<(usize, usize)> {
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Shape(format!("expected [N, 3, H, W] input, got {shape:?}")));
        }
        let (h, w) = (shape[2], shape[3]);
        let p = self.config.vit.patch_size;
        if h % p != 0 || w % p != 0 || h % BOTTLENECK_STRIDE != 0 || w % BOTTLENECK_STRIDE != 0 {
            return Err(Error::Shape(format!("input {h}x{w} must be divisible by patch {p} and by {BOTTLENECK_STRIDE}")));
        }
        Ok((h, w))
    }

    fn projection(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let w = g.param_by_name(&format!("{name}.w"))?;
        let b = g.param_by_name(&format!("{name}.b"))?;
        let base = g.linear(x, w, Some(b))?;
        match &self.lora {
            Some(cfg) if name.ends_with(".q") || name.ends_with(".v") => {
                let a = g.param_by_name(&format!("{name}.lora_a"))?;
                let bb = g.param_by_name(&format!("{name}.lora_b"))?;
                let low = g.linear(x, a, None)?;
                let up = g.linear(low, bb, None)?;
                let up = g.scale(up, cfg.scale());
                g.add(base, up)
            }
            _ => Ok(base),
        }
    }

    fn layer_norm(g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let gm = g.param_by_name(&format!("{name}.g"))?;
        let b = g.param_by_name(&format!("{name}.b"))?;
        g.layer_norm(x, gm, b)
    }

    /// Patch tokens before position embedding, `[N, T, D]`.
    pub fn patch_tokens(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        let p = self.config.vit.patch_size;
        let w = g.param_by_name("vit.patch.w")?;
        let b = g.param_by_name("vit.patch.b")?;
        let map = g.conv2d(x, w, Some(b), p, 0)?;
        Ok(g.map_to_tokens(map))
    }

    /// Encoder bottleneck `[N, D, H/16, W/16]`.
    pub fn encode(&self, g: &mut Graph, x: Var, mut rng: Option<&mut ForwardRng>) -> Result<Var> {
        let (h, w) = self.check_input(g, x)?;
        let v = &self.config.vit;
        let (gh, gw) = (h / v.patch_size, w / v.patch_size);
        let pw = g.param_by_name("vit.patch.w")?;
        let pb = g.param_by_name("vit.patch.b")?;
        let map = g.conv2d(x, pw, Some(pb), v.patch_size, 0)?;
        let mut pos = g.param_by_name("vit.pos")?;
        if (gh, gw) != (v.pos_grid, v.pos_grid) {
            pos = g.resize(pos, gh, gw, Interp::Bicubic)?;
        }
        let map = g.add_broadcast(map, pos)?;
        let mut t = g.map_to_tokens(map);
        for i in 0..v.depth {
            let p = format!("vit.blocks.{i}");
            let y = Self::layer_norm(g, t, &format!("{p}.ln1"))?;
            let q = self.projection(g, y, &format!("{p}.attn.q"))?;
            let k = self.projection(g, y, &format!("{p}.attn.k"))?;
            let vv = self.projection(g, y, &format!("{p}.attn.v"))?;
            let a = g.attention(q, k, vv, v.heads)?;
            let mut a = self.projection(g, a, &format!("{p}.attn.o"))?;
            if let Some(r) = rng.as_deref_mut() {
                a = g.dropout(a, r.rate, r.dropout);
            }
            t = g.add(t, a)?;
            let y = Self::layer_norm(g, t, &format!("{p}.ln2"))?;
            let y = self.projection(g, y, &format!("{p}.mlp.fc1"))?;
            let y = g.gelu(y);
            let mut y = self.projection(g, y, &format!("{p}.mlp.fc2"))?;
            if let Some(r) = rng.as_deref_mut() {
                y = g.dropout(y, r.rate, r.dropout);
            }
            t = g.add(t, y)?;
        }
        let t = Self::layer_norm(g, t, "vit.norm")?;
        let map = g.tokens_to_map(t, gh, gw)?;
        g.resize(map, h / BOTTLENECK_STRIDE, w / BOTTLENECK_STRIDE, Interp::Bicubic)
    }

    fn conv_bn_relu(g: &mut Graph, x: Var, name: &str, stride: usize) -> Result<Var> {
        let w = g.param_by_name(&format!("{name}.conv.w"))?;
        let y = g.conv2d(x, w, None, stride, 1)?;
        let gm = g.param_by_name(&format!("{name}.bn.g"))?;
        let b = g.param_by_name(&format!("{name}.bn.b"))?;
        let y = g.batch_norm(y, gm, b, &format!("{name}.bn"))?;
        Ok(g.relu(y))
    }

    /// Pyramid features at strides 2, 4 and 8.
    pub fn detail(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        self.check_input(g, x)?;
        let mut feats = Vec::with_capacity(self.config.detail_channels.len());
        let mut y = x;
        for i in 0..self.config.detail_channels.len() {
            y = Self::conv_bn_relu(g, y, &format!("detail.{i}"), 2)?;
            feats.push(y);
        }
        Ok(feats)
    }

    /// Decoder and Tanh heads: `[N, M, H, W]` in `(-1, 1)`.
    pub fn decode(&self, g: &mut Graph, bottleneck: Var, pyramid: &[Var]) -> Result<Var> {
        let mut y = bottleneck;
        for i in 0..self.config.decoder_channels.len() {
            let (_, _, h, w) = g.value(y).dims4();
            y = g.resize(y, 2 * h, 2 * w, Interp::Bilinear)?;
            if let Some(j) = pyramid.len().checked_sub(i + 1) {
                y = g.concat(&[y, pyramid[j]])?;
            }
            y = Self::conv_bn_relu(g, y, &format!("decoder.{i}"), 1)?;
        }
        let w = g.param_by_name("head.w")?;
        let b = g.param_by_name("head.b")?;
        let y = g.conv2d(y, w, Some(b), 1, 0)?;
        Ok(g.tanh(y))
    }

    pub fn forward(&self, g: &mut Graph, x: Var, rng: Option<&mut ForwardRng>) -> Result<Var> {
        let bottleneck = self.encode(g, x, rng)?;
        let pyramid = self.detail(g, x)?;
        self.decode(g, bottleneck, &pyramid)
    }

    /// Eval-mode prediction for a batch `[N, 3, H, W]` of normalized inputs.
    pub fn infer(&self, input: Tensor) -> Result<Tensor> {
        let mut g = Graph::new(&self.params, false);
        let x = g.input(input);
        let y = self.forward(&mut g, x, None)?;
        Ok(g.value(y).clone())
    }

    /// Folds batch statistics from a training forward pass into the running
    /// buffers (momentum 0.1).
    pub fn update_running_stats(&mut self, graph_stats: &[super::graph::BatchNormStats]) {
        const MOMENTUM: f64 = 0.1;
        for st in graph_stats {
            for (key, batch) in [("running_mean", &st.mean), ("running_var", &st.unbiased_var)] {
                let name = format!("{}.{key}", st.name);
                if let Some(buf) = self.params.buffer(&name) {
                    let data = buf.data().iter().zip(batch).map(|(r, b)| (1.0 - MOMENTUM) * r + MOMENTUM * b).collect();
                    self.params.set_buffer(&name, Tensor::new(buf.shape().to_vec(), data).expect("same shape"));
                }
            }
        }
    }

    /// Same architecture without weights; forward passes read parameters
    /// from the graph's store.
    pub(crate) fn clone_architecture(&self) -> Translator {
        Translator { config: self.config.clone(), lora: self.lora.clone(), params: ParamStore::new() }
    }

    /// Trainable scalar count.
    pub fn num_trainable(&self) -> usize {
        self.params.num_trainable_scalars()
    }
}

/// RGB planes in `[0, 1]` as `[3, H, W]`.
pub fn rgb_to_planes(img: &crate::imgproc::RgbImage) -> Tensor {
    let (w, h) = (img.width(), img.height());
    let mut data = vec![0.0; 3 * w * h];
    for (i, px) in img.data().chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data).expect("consistent shape")
}

/// Stacks `[3, H, W]` planes in `[0, 1]` into an ImageNet-normalized `[N, 3, H, W]` batch.
pub fn normalize_input(planes: &[&Tensor]) -> Result<Tensor> {
    let first = planes.first().ok_or_else(|| Error::Shape("empty batch".into()))?.shape().to_vec();
    if first.len() != 3 || first[0] != 3 {
        return Err(Error::Shape(format!("expected [3, H, W] planes, got {first:?}")));
    }
    let hw = first[1] * first[2];
    let mut data = Vec::with_capacity(planes.len() * 3 * hw);
    for p in planes {
        if p.shape() != first.as_slice() {
            return Err(Error::Shape("batch tiles differ in size".into()));
        }
        for c in 0..3 {
            data.extend(p.data()[c * hw..(c + 1) * hw].iter().map(|v| (v - IMAGENET_MEAN[c]) / IMAGENET_STD[c]));
        }
    }
    Tensor::new(vec![planes.len(), 3, first[1], first[2]], data)
}
