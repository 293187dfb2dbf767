use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameters in insertion order. A tensor's `requires_grad` flag is
/// its membership in the trainable set.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(trainable));
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.tensors[id.0].requires_grad()
    }

    pub fn set_trainable(&mut self, id: ParamId, flag: bool) {
        self.tensors[id.0].set_requires_grad(flag);
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_trainable(id)).collect()
    }

    pub fn n_total(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn n_trainable(&self) -> usize {
        self.tensors.iter().filter(|t| t.requires_grad()).map(Tensor::numel).sum()
    }

    /// SHA-256 over name, shape and little-endian values of every frozen
    /// parameter, in insertion order.
    pub fn frozen_checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            if t.requires_grad() {
                continue;
            }
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Adds gradients into the buffers of trainable parameters. Gradients for
    /// frozen parameters are ignored.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.iter() {
            let t = &mut self.tensors[id.0];
            if t.requires_grad() {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Overwrites a parameter's values, keeping its trainable flag.
    pub fn assign(&mut self, id: ParamId, values: &[f64]) -> Result<()> {
        let t = &mut self.tensors[id.0];
        if t.numel() != values.len() {
            return Err(Error::ShapeMismatch {
                expected: t.shape().to_vec(),
                got: vec![values.len()],
            });
        }
        t.data_mut().copy_from_slice(values);
        Ok(())
    }
}

/// Per-parameter gradients produced by one backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub(crate) fn new(n: usize) -> Self {
        Gradients {
            slots: vec![None; n],
        }
    }

    pub(crate) fn add(&mut self, id: ParamId, g: &[f64]) {
        match &mut self.slots[id.0] {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.slots.get(id.0).and_then(|s| s.as_deref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_deref().map(|g| (ParamId(i), g)))
    }

    /// Euclidean norm over the listed parameters.
    pub fn norm_over(&self, ids: &[ParamId]) -> f64 {
        ids.iter()
            .filter_map(|&id| self.get(id))
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::filled(vec![2, 2], 1.0), false);
        s.add("a", Tensor::filled(vec![3], 0.5), true);
        s
    }

    #[test]
    fn counts_and_lookup() {
        let s = store();
        assert_eq!(s.n_total(), 7);
        assert_eq!(s.n_trainable(), 3);
        assert_eq!(s.id("a"), Some(ParamId(1)));
        assert_eq!(s.trainable_ids(), vec![ParamId(1)]);
    }

    #[test]
    fn checksum_sees_only_frozen_values() {
        let mut s = store();
        let before = s.frozen_checksum();
        s.assign(ParamId(1), &[9.0, 9.0, 9.0]).unwrap();
        assert_eq!(before, s.frozen_checksum());
        s.assign(ParamId(0), &[1.0, 1.0, 1.0, 1.5]).unwrap();
        assert_ne!(before, s.frozen_checksum());
    }

    #[test]
    fn accumulate_skips_frozen() {
        let mut s = store();
        let mut g = Gradients::new(2);
        g.add(ParamId(0), &[1.0; 4]);
        g.add(ParamId(1), &[1.0; 3]);
        g.add(ParamId(1), &[1.0; 3]);
        s.accumulate(&g).unwrap();
        assert!(s.get(ParamId(0)).grad().is_none());
        assert_eq!(s.get(ParamId(1)).grad().unwrap(), &[2.0; 3]);
        assert!((g.norm_over(&[ParamId(1)]) - 12f64.sqrt()).abs() < 1e-15);
    }
}
