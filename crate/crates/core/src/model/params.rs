use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use crate::{rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Named parameters plus non-trainable buffers (batch-norm running stats).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, usize>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Model(format!("parameter {name} already exists")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry { name: name.to_string(), value, trainable });
        Ok(ParamId(self.entries.len() - 1))
    }

    /// `N(mean, std^2)` values drawn from a stream named after the parameter,
    /// so creation order does not affect initialization.
    pub fn add_normal(&mut self, name: &str, shape: &[usize], mean: f64, std: f64, seed: u64) -> Result<ParamId> {
        let mut r = rng::substream(seed, &format!("init/{name}"));
        let dist = Normal::new(mean, std).map_err(|e| Error::Invalid(e.to_string()))?;
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut r)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?, true)
    }

    pub fn add_const(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.add(name, Tensor::filled(shape, value), true)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn set_buffer(&mut self, name: &str, value: Tensor) {
        self.buffers.insert(name.to_string(), value);
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }
}

/// Parameter gradients indexed like the store; frozen parameters stay `None`.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub(crate) grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_independent_of_order() {
        let mut a = ParamStore::new();
        a.add_normal("x", &[4], 0.0, 0.02, 1).unwrap();
        a.add_normal("y", &[3], 1.0, 0.02, 1).unwrap();
        let mut b = ParamStore::new();
        b.add_normal("y", &[3], 1.0, 0.02, 1).unwrap();
        b.add_normal("x", &[4], 0.0, 0.02, 1).unwrap();
        assert_eq!(a.get(a.id("x").unwrap()), b.get(b.id("x").unwrap()));
        assert!(a.add_const("x", &[1], 0.0).is_err());
        assert_eq!(a.num_scalars(), 7);
    }
}
