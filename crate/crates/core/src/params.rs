//! Named parameter storage and the per-forward-pass context that binds stored
//! tensors to tape leaves.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use indexmap::IndexMap;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ssm::ScanKernel;
use crate::tensor::kernels;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    /// Trainable parameter.
    Param,
    /// Non-trainable state (batch-norm running statistics).
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Entry<T> {
    pub value: Arc<Tensor<T>>,
    pub kind: EntryKind,
}

/// Insertion-ordered table of named tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: IndexMap<String, Entry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, kind: EntryKind) {
        let name = name.into();
        let prev = self.entries.insert(
            name.clone(),
            Entry {
                value: Arc::new(value),
                kind,
            },
        );
        assert!(prev.is_none(), "duplicate tensor name `{name}`");
    }

    pub fn get(&self, name: &str) -> Result<&Arc<Tensor<T>>> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn kind(&self, name: &str) -> Option<EntryKind> {
        self.entries.get(name).map(|e| e.kind)
    }

    /// Replaces the value of an existing entry; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if entry.value.shape() != value.shape() {
            return Err(Error::shape("set", entry.value.shape(), value.shape()));
        }
        entry.value = Arc::new(value);
        Ok(())
    }

    /// Mutable access for in-place updates (copy-on-write if shared).
    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|e| Arc::make_mut(&mut e.value))
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Arc<Tensor<T>>)> {
        self.iter()
            .filter(|(_, e)| e.kind == EntryKind::Param)
            .map(|(k, e)| (k, &e.value))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, kind: EntryKind) -> usize {
        self.iter()
            .filter(|(_, e)| e.kind == kind)
            .map(|(_, e)| e.value.numel())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        Entry {
                            value: Arc::new(e.value.cast()),
                            kind: e.kind,
                        },
                    )
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Binds a [`ParamStore`] to a tape for one forward pass.
pub struct Ctx<'t, 's, T> {
    pub tape: &'t Tape<T>,
    pub mode: Mode,
    pub scan_kernel: ScanKernel,
    store: &'s ParamStore<T>,
    track_grads: bool,
    leaves: RefCell<HashMap<String, Var<'t, T>>>,
    stat_updates: RefCell<Vec<(String, Tensor<T>)>>,
}

impl<'t, 's, T: Scalar> Ctx<'t, 's, T> {
    pub fn new(tape: &'t Tape<T>, store: &'s ParamStore<T>, mode: Mode, track_grads: bool) -> Self {
        Self {
            tape,
            mode,
            scan_kernel: ScanKernel::default(),
            store,
            track_grads,
            leaves: RefCell::new(HashMap::new()),
            stat_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    /// The tape leaf for parameter `name`, created on first use.
    pub fn param(&self, name: &str) -> Result<Var<'t, T>> {
        if let Some(&v) = self.leaves.borrow().get(name) {
            return Ok(v);
        }
        let value = self.store.get(name)?.clone();
        let var = self.tape.param(name, value, self.track_grads);
        self.leaves.borrow_mut().insert(name.to_string(), var);
        Ok(var)
    }

    /// Makes `name` resolve to `var` instead of a fresh leaf, so callers can
    /// supply their own inputs (as the finite-difference checker does).
    pub fn bind(&self, name: &str, var: Var<'t, T>) {
        self.leaves.borrow_mut().insert(name.to_string(), var);
    }

    /// Batch norm with parameters `{prefix}.weight`, `{prefix}.bias` and
    /// buffers `{prefix}.running_mean`, `{prefix}.running_var`.
    pub fn batch_norm(&self, x: Var<'t, T>, prefix: &str) -> Result<Var<'t, T>> {
        let gamma = self.param(&format!("{prefix}.weight"))?;
        let beta = self.param(&format!("{prefix}.bias"))?;
        let mean_name = format!("{prefix}.running_mean");
        let var_name = format!("{prefix}.running_var");
        let rm = self.store.get(&mean_name)?;
        let rv = self.store.get(&var_name)?;
        match self.mode {
            Mode::Eval => x.batch_norm_eval(gamma, beta, rm, rv),
            Mode::Train => {
                let shape = x.shape();
                let count = shape[0] * shape[2..].iter().product::<usize>();
                let (y, stats) = x.batch_norm_train(gamma, beta)?;
                let (m, v) = kernels::update_running_stats(rm, rv, &stats, count);
                let mut updates = self.stat_updates.borrow_mut();
                updates.push((mean_name, m));
                updates.push((var_name, v));
                Ok(y)
            }
        }
    }

    /// Running-statistic updates produced by train-mode batch norms.
    pub fn into_stat_updates(self) -> Vec<(String, Tensor<T>)> {
        self.stat_updates.into_inner()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_roundtrip_and_counts() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", Tensor::ones(&[2, 3]), EntryKind::Param);
        s.insert("b", Tensor::zeros(&[4]), EntryKind::Buffer);
        assert_eq!(s.count(EntryKind::Param), 6);
        assert_eq!(s.count(EntryKind::Buffer), 4);
        assert!(s.set("a", Tensor::zeros(&[3, 2])).is_err());
        s.get_mut("b").unwrap().data_mut()[0] = 5.0;
        assert_eq!(s.get("b").unwrap().data()[0], 5.0);
        assert!(matches!(s.get("zzz"), Err(Error::MissingTensor(_))));
    }

    #[test]
    fn param_leaf_is_shared_within_ctx() {
        let mut s = ParamStore::<f32>::new();
        s.insert("w", Tensor::ones(&[2]), EntryKind::Param);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &s, Mode::Eval, true);
        let a = ctx.param("w").unwrap();
        let b = ctx.param("w").unwrap();
        let loss = a.mul(b).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[2.0, 2.0]);
    }
}
