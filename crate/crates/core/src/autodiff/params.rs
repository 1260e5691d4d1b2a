use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_STORE: AtomicUsize = AtomicUsize::new(1);

/// Index of a parameter inside the [`ParamStore`] that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ParamRef {
    pub store: usize,
    pub index: usize,
}

/// Named trainable tensors of one model.
///
/// Every store carries a process-unique id so gradients recorded on a graph are
/// only ever applied to the store whose parameters produced them. Cloning a
/// store yields an independent snapshot with a fresh id.
#[derive(Debug)]
pub struct ParamStore {
    uid: usize,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            tensors: self.tensors.clone(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub(crate) fn uid(&self) -> usize {
        self.uid
    }

    pub(crate) fn reference(&self, id: ParamId) -> ParamRef {
        ParamRef {
            store: self.uid,
            index: id.0,
        }
    }

    /// Registers a parameter. Names must be unique within the store.
    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::ParamMismatch(format!(
                "duplicate parameter name {name}"
            )));
        }
        tensor.set_requires_grad(true);
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

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    /// Toggles gradient tracking for every parameter in the store.
    pub fn set_requires_grad(&mut self, flag: bool) {
        self.tensors
            .iter_mut()
            .for_each(|t| t.set_requires_grad(flag));
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Largest absolute parameter value.
    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.values().iter())
            .fold(0.0, |m: f64, v| m.max(v.abs()))
    }

    /// Clamps every parameter value into `[-bound, bound]`.
    pub fn clip(&mut self, bound: f64) {
        for t in &mut self.tensors {
            t.values_mut()
                .iter_mut()
                .for_each(|v| *v = v.clamp(-bound, bound));
        }
    }

    /// Named copies of all parameter values, in registration order.
    pub fn export(&self) -> Vec<(String, Tensor)> {
        self.iter()
            .map(|(n, t)| {
                let values = t.values().to_vec();
                (
                    n.to_string(),
                    Tensor::from_parts(t.shape().to_vec(), values),
                )
            })
            .collect()
    }

    /// Overwrites parameter values from named tensors, prefixed by `prefix`.
    ///
    /// Every parameter must be present with an identical shape; extra entries
    /// that do not start with `prefix` are ignored.
    pub fn import(&mut self, prefix: &str, named: &[(String, Tensor)]) -> Result<()> {
        let relevant: Vec<&(String, Tensor)> = named
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .collect();
        if relevant.len() != self.tensors.len() {
            return Err(Error::ParamMismatch(format!(
                "expected {} tensors under '{prefix}', found {}",
                self.tensors.len(),
                relevant.len()
            )));
        }
        let mut targets = Vec::with_capacity(relevant.len());
        for (name, t) in relevant {
            let local = &name[prefix.len()..];
            let id = self
                .find(local)
                .ok_or_else(|| Error::ParamMismatch(format!("unknown parameter {name}")))?;
            if self.tensors[id.0].shape() != t.shape() {
                return Err(Error::ParamMismatch(format!(
                    "{name}: expected shape {:?}, found {:?}",
                    self.tensors[id.0].shape(),
                    t.shape()
                )));
            }
            targets.push((id, t));
        }
        for (id, t) in targets {
            self.tensors[id.0].values_mut().copy_from_slice(t.values());
        }
        Ok(())
    }
}
