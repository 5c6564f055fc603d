//! Weight files: `SFWT` magic, u32 version, u32 entry count, then per entry
//! u16 name length, name, u8 kind (0 trainable, 1 frozen, 2 buffer),
//! u8 dtype (0 = f32), u32 rank, u32 dims, little-endian payload.
//! A JSON sidecar holds the configs; an optional JSON state file holds the
//! exact f64 parameters and optimizer state for resuming.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::loss::LossConfig;
use super::optim::Adam;
use super::tensor::Tensor;
use super::train::{StepRecord, TrainConfig, Trainer, ValidationRecord};
use super::translator::{LoraConfig, Translator, TranslatorConfig};
use crate::io::write_atomic;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"SFWT";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub translator: TranslatorConfig,
    pub lora: Option<LoraConfig>,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub panel_hash: String,
    pub config_hash: String,
    pub seed: u64,
    pub step: usize,
}

pub fn sidecar_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

pub fn state_path(weights: &Path) -> PathBuf {
    weights.with_extension("state.json")
}

fn encode_weights(model: &Translator) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let entries: Vec<(&str, u8, &Tensor)> = model
        .params
        .entries()
        .iter()
        .map(|e| (e.name.as_str(), if e.trainable { 0 } else { 1 }, &e.value))
        .chain(model.params.buffers().iter().map(|(n, t)| (n.as_str(), 2, t)))
        .collect();
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, kind, t) in entries {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(kind);
        buf.push(DTYPE_F32);
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    buf
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::format(self.path, "truncated weight file"));
        }
        self.pos += n;
        Ok(&self.data[self.pos - n..self.pos])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

type RawEntry = (String, u8, Tensor);

fn decode_weights(data: &[u8], path: &Path) -> Result<Vec<RawEntry>> {
    let mut c = Cursor { data, pos: 0, path };
    if c.take(4)? != MAGIC {
        return Err(Error::format(path, "not a stainforge weight file"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported weight file version {version}")));
    }
    let count = c.u32()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(c.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = String::from_utf8(c.take(len)?.to_vec()).map_err(|_| Error::format(path, "bad entry name"))?;
        let head = c.take(2)?;
        let (kind, dtype) = (head[0], head[1]);
        if dtype != DTYPE_F32 || kind > 2 {
            return Err(Error::format(path, format!("entry {name}: unknown kind/dtype {kind}/{dtype}")));
        }
        let rank = c.u32()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let values = c
            .take(4 * n)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        out.push((name, kind, Tensor::new(shape, values)?));
    }
    if c.pos != data.len() {
        return Err(Error::format(path, "trailing bytes after weight entries"));
    }
    Ok(out)
}

/// Rebuilds the architecture described by `meta` and fills it with `entries`.
fn assemble(meta: &CheckpointMeta, entries: Vec<RawEntry>, path: &Path) -> Result<Translator> {
    let mut model = Translator::new(meta.translator.clone(), meta.seed)?;
    if let Some(l) = &meta.lora {
        model.apply_lora(l.clone(), meta.seed)?;
    }
    let mut seen = 0;
    for (name, kind, t) in entries {
        if kind == 2 {
            match model.params.buffer(&name) {
                Some(b) if b.shape() == t.shape() => model.params.set_buffer(&name, t),
                _ => return Err(Error::format(path, format!("unexpected buffer {name}"))),
            }
            continue;
        }
        let id = model.params.id(&name).ok_or_else(|| Error::format(path, format!("unexpected parameter {name}")))?;
        if model.params.get(id).shape() != t.shape() {
            return Err(Error::format(path, format!("parameter {name} has shape {:?}", t.shape())));
        }
        *model.params.get_mut(id) = t;
        model.params.set_trainable(id, kind == 0);
        seen += 1;
    }
    if seen != model.params.len() {
        return Err(Error::format(path, format!("{} of {} parameters present", seen, model.params.len())));
    }
    Ok(model)
}

pub fn save_checkpoint(path: &Path, model: &Translator, meta: &CheckpointMeta) -> Result<()> {
    write_atomic(path, &encode_weights(model))?;
    write_atomic(&sidecar_path(path), serde_json::to_string_pretty(meta)?.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<(Translator, CheckpointMeta)> {
    let meta_path = sidecar_path(path);
    let meta: CheckpointMeta = serde_json::from_slice(&std::fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?)
        .map_err(|e| Error::format(&meta_path, e.to_string()))?;
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let model = assemble(&meta, decode_weights(&data, path)?, path)?;
    Ok((model, meta))
}

#[derive(Serialize, Deserialize)]
struct TrainerState {
    meta: CheckpointMeta,
    params: Vec<(String, bool, Tensor)>,
    buffers: Vec<(String, Tensor)>,
    optimizer: Adam,
    curve: Vec<StepRecord>,
    validations: Vec<ValidationRecord>,
    best: Option<(usize, f64)>,
}

/// Full-precision trainer snapshot for exact resumption.
pub fn save_trainer_state(path: &Path, trainer: &Trainer, meta: &CheckpointMeta) -> Result<()> {
    let state = TrainerState {
        meta: meta.clone(),
        params: trainer.model.params.entries().iter().map(|e| (e.name.clone(), e.trainable, e.value.clone())).collect(),
        buffers: trainer.model.params.buffers().iter().map(|(n, t)| (n.clone(), t.clone())).collect(),
        optimizer: trainer.optimizer.clone(),
        curve: trainer.curve.clone(),
        validations: trainer.validations.clone(),
        best: trainer.best,
    };
    let mut buf = Vec::new();
    serde_json::to_writer(&mut buf, &state)?;
    write_atomic(path, &buf)
}

pub fn load_trainer_state(path: &Path) -> Result<(Trainer, CheckpointMeta)> {
    let mut text = String::new();
    std::fs::File::open(path).map_err(|e| Error::io(path, e))?.read_to_string(&mut text).map_err(|e| Error::io(path, e))?;
    let state: TrainerState = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    let mut entries: Vec<RawEntry> = state.params.into_iter().map(|(n, t, v)| (n, if t { 0 } else { 1 }, v)).collect();
    entries.extend(state.buffers.into_iter().map(|(n, v)| (n, 2, v)));
    let model = assemble(&state.meta, entries, path)?;
    let mut trainer = Trainer::new(model, state.meta.train.clone(), state.meta.loss.clone())?;
    trainer.optimizer = state.optimizer;
    trainer.step = state.meta.step;
    trainer.curve = state.curve;
    trainer.validations = state.validations;
    trainer.best = state.best;
    Ok((trainer, state.meta))
}

/// Writes the raw weight bytes to `out` (used for hashing and tests).
pub fn write_weights<W: Write>(model: &Translator, mut out: W) -> Result<()> {
    out.write_all(&encode_weights(model)).map_err(|e| Error::io("<weights>", e))
}
