//! Named parameter storage shared by every model component.

use std::collections::HashMap;
use std::ops::Index;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered map from parameter names to tensors. The trainable flag of a
/// parameter is its tensor's `requires_grad`.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        ParamVars(vars)
    }

    pub fn as_slice(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for ParamVars {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.tensors[id.0].requires_grad = trainable;
    }

    pub fn freeze_all(&mut self) {
        for t in &mut self.tensors {
            t.requires_grad = false;
        }
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.get(id).requires_grad).collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.tensors.iter().filter(|t| t.requires_grad).map(Tensor::numel).sum()
    }

    pub fn total_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> ParamVars {
        ParamVars(
            self.tensors
                .iter()
                .map(|t| {
                    let mut leaf = Tensor::new(t.shape(), t.data().to_vec()).expect("stored shape");
                    leaf.requires_grad = t.requires_grad;
                    tape.leaf(leaf)
                })
                .collect(),
        )
    }

    /// Copies tape gradients into the `grad` field of trainable tensors.
    pub fn collect_grads(&mut self, tape: &Tape<T>, vars: &ParamVars) {
        for (t, &v) in self.tensors.iter_mut().zip(&vars.0) {
            t.grad = if t.requires_grad {
                Some(tape.grad(v).map_or_else(|| vec![T::zero(); t.numel()], <[T]>::to_vec))
            } else {
                None
            };
        }
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// SHA-256 over names, shapes and values of the non-trainable tensors.
    pub fn frozen_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter().filter(|(_, t)| !t.requires_grad) {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex_digest(h)
    }
}

pub(crate) fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
