use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    tensor: Tensor,
    trainable: bool,
}

/// Named model tensors in registration order.
///
/// Non-trainable entries (buffers such as input normalization statistics)
/// are bound onto the tape as constants and skipped by the optimizer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> ParamId {
        self.insert(name, tensor, true)
    }

    pub fn add_buffer(&mut self, name: &str, tensor: Tensor) -> ParamId {
        self.insert(name, tensor, false)
    }

    fn insert(&mut self, name: &str, mut tensor: Tensor, trainable: bool) -> ParamId {
        assert!(
            self.position(name).is_none(),
            "duplicate parameter name {name}"
        );
        tensor.set_requires_grad(trainable);
        self.entries.push(Entry {
            name: name.to_string(),
            tensor,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    fn position(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.position(name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.entries[i].tensor)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor))
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.len())
            .sum()
    }

    /// Replaces the data of `name`, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let i = self
            .position(name)
            .ok_or_else(|| Error::Config(alloc::format!("unknown parameter {name}")))?;
        let e = &mut self.entries[i];
        if e.tensor.shape() != tensor.shape() {
            return Err(crate::dim_err!(
                "parameter {} has shape {:?}, got {:?}",
                name,
                e.tensor.shape(),
                tensor.shape()
            ));
        }
        e.tensor.data_mut().copy_from_slice(tensor.data());
        Ok(())
    }

    /// Copies every tensor of `other` (matched by name) into `self`.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for e in &self.entries {
            if other.position(&e.name).is_none() {
                return Err(Error::Config(alloc::format!(
                    "missing parameter {}",
                    e.name
                )));
            }
        }
        for (name, t) in other.iter() {
            self.set(name, t.clone())?;
        }
        Ok(())
    }

    /// Puts every entry on `tape`; the returned vector is indexed by
    /// [`ParamId::index`].
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.entries
            .iter()
            .map(|e| {
                if e.trainable {
                    tape.param(&e.tensor)
                } else {
                    tape.constant(e.tensor.clone())
                }
            })
            .collect()
    }

    /// Folds the tape's gradients into each tensor's `grad` field.
    pub fn collect_grads(&mut self, tape: &Tape, vars: &[Var]) -> Result<()> {
        for (e, &v) in self.entries.iter_mut().zip(vars) {
            if let (true, Some(g)) = (e.trainable, tape.grad(v)) {
                e.tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.zero_grad());
    }
}

/// Gradient buffers aligned with a [`ParamStore`]; unreachable or
/// non-trainable entries hold zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    bufs: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            bufs: store.entries.iter().map(|e| vec![0.0; e.tensor.len()]).collect(),
        }
    }

    pub fn from_tape(store: &ParamStore, tape: &Tape, vars: &[Var]) -> Self {
        let mut g = Self::zeros_like(store);
        g.add_tape(store, tape, vars);
        g
    }

    pub fn add_tape(&mut self, store: &ParamStore, tape: &Tape, vars: &[Var]) {
        for ((buf, e), &v) in self.bufs.iter_mut().zip(&store.entries).zip(vars) {
            if !e.trainable {
                continue;
            }
            if let Some(g) = tape.grad(v) {
                buf.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.bufs.iter_mut().zip(&other.bufs) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.bufs
            .iter_mut()
            .for_each(|b| b.iter_mut().for_each(|v| *v *= s));
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.bufs[id.0]
    }

    pub fn len(&self) -> usize {
        self.bufs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bufs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.bufs.iter().map(Vec::as_slice)
    }

    /// First non-finite entry as `(parameter index, element index)`.
    pub fn first_non_finite(&self) -> Option<(usize, usize)> {
        self.bufs.iter().enumerate().find_map(|(p, b)| {
            b.iter().position(|v| !v.is_finite()).map(|i| (p, i))
        })
    }
}
