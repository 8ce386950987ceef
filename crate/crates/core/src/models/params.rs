//! Named parameter storage and the per-pass binding of parameters onto a tape.

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::ops::norm::BN_MOMENTUM;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// False for buffers such as batch-norm running statistics.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar = f32> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub(crate) fn push(&mut self, name: String, tensor: Tensor<T>, trainable: bool) -> ParamId {
        debug_assert!(self.entries.iter().all(|e| e.name != name), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, tensor, trainable });
        ParamId(self.entries.len() - 1)
    }

    /// Adds an entry; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(shape_err!("duplicate parameter `{name}`"));
        }
        Ok(self.push(name, tensor, trainable))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.tensor.numel()).sum()
    }

    /// `(id, offset)` of every trainable entry within [`flatten_trainable`](Self::flatten_trainable).
    pub fn trainable_layout(&self) -> Vec<(ParamId, usize)> {
        let mut offset = 0;
        let mut out = Vec::new();
        for (i, e) in self.entries.iter().enumerate() {
            if e.trainable {
                out.push((ParamId(i), offset));
                offset += e.tensor.numel();
            }
        }
        out
    }

    pub fn flatten_trainable(&self) -> Tensor<T> {
        let data: Vec<T> = self
            .entries
            .iter()
            .filter(|e| e.trainable)
            .flat_map(|e| e.tensor.data().iter().copied())
            .collect();
        let n = data.len();
        Tensor::new([n], data).expect("flat length")
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), tensor: e.tensor.cast(), trainable: e.trainable })
                .collect(),
        }
    }

    /// Replaces the value of the named entry, checking its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let id = self.find(name).ok_or_else(|| shape_err!("unknown parameter `{name}`"))?;
        let slot = &mut self.entries[id.0].tensor;
        if slot.shape() != tensor.shape() {
            return Err(shape_err!(
                "parameter `{name}` has shape {:?}, got {:?}",
                slot.shape(),
                tensor.shape()
            ));
        }
        *slot = tensor;
        Ok(())
    }

    pub(crate) fn apply_updates(&mut self, updates: Vec<(ParamId, Tensor<T>)>) {
        for (id, t) in updates {
            self.entries[id.0].tensor = t;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: the tape plus a lazily populated map from parameters to
/// tape leaves.
pub struct Ctx<'a, T: Scalar> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    vars: Vec<Option<Var>>,
    mode: Mode,
    requires_grad: bool,
    updates: Vec<(ParamId, Tensor<T>)>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore<T>, mode: Mode, requires_grad: bool) -> Self {
        Self { tape: Tape::new(), store, vars: vec![None; store.len()], mode, requires_grad, updates: Vec::new() }
    }

    /// Binds every trainable parameter as a slice of one flat leaf so that a
    /// gradient check can perturb them as a single vector.
    pub fn with_flat_params(store: &'a ParamStore<T>, mode: Mode, tape: Tape<T>, flat: Var) -> Result<Self> {
        let mut ctx = Self { tape, store, vars: vec![None; store.len()], mode, requires_grad: false, updates: Vec::new() };
        for (id, offset) in store.trainable_layout() {
            let shape = store.get(id).shape().to_vec();
            ctx.vars[id.0] = Some(ctx.tape.slice(flat, offset, &shape)?);
        }
        Ok(ctx)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone(), self.requires_grad);
        self.vars[id.0] = Some(v);
        v
    }

    pub fn buffer(&self, id: ParamId) -> &'a Tensor<T> {
        self.store.get(id)
    }

    /// Folds batch statistics into a running buffer (train mode only).
    pub(crate) fn update_running(&mut self, id: ParamId, batch: &[T]) {
        let m = T::from_f64_lossy(BN_MOMENTUM);
        let mut t = self.store.get(id).clone();
        for (r, &b) in t.data_mut().iter_mut().zip(batch) {
            *r = (T::one() - m) * *r + m * b;
        }
        self.updates.push((id, t));
    }

    pub fn take_updates(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.updates)
    }

    /// Gradients of every trainable entry bound during the pass, in store
    /// order; `None` for entries that were not reached.
    pub fn param_grads(&self) -> Vec<(ParamId, Option<Tensor<T>>)> {
        self.store
            .ids()
            .filter(|id| self.store.entry(*id).trainable)
            .map(|id| (id, self.vars[id.0].and_then(|v| self.tape.grad(v).cloned())))
            .collect()
    }
}
