use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "parameter `{name}` registered twice"
        );
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
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

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replace a tensor's contents, keeping its registered shape.
    pub fn set(&mut self, id: ParamId, tensor: Tensor) -> Result<()> {
        let slot = &mut self.tensors[id.0];
        if slot.shape() != tensor.shape() {
            return Err(Error::shape("ParamStore::set", slot.shape(), tensor.shape()));
        }
        *slot = tensor;
        Ok(())
    }
}

/// One gradient tensor per parameter of a store, zero where unreachable.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients {
            grads: store.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in &mut self.grads {
            g.scale_assign(c);
        }
    }

    pub fn is_all_zero(&self) -> bool {
        self.grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0))
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Which part of a parameter an optimizer may touch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Trainable {
    Frozen,
    Full,
    /// Only these rows of a 2-D parameter (e.g. special-token embeddings).
    Rows(Vec<usize>),
}

impl Trainable {
    pub fn is_frozen(&self) -> bool {
        matches!(self, Trainable::Frozen)
    }
}

/// Per-parameter trainability, indexed like the store.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainableSet {
    modes: Vec<Trainable>,
}

impl TrainableSet {
    pub fn all(store: &ParamStore) -> Self {
        TrainableSet {
            modes: vec![Trainable::Full; store.len()],
        }
    }

    pub fn none(store: &ParamStore) -> Self {
        TrainableSet {
            modes: vec![Trainable::Frozen; store.len()],
        }
    }

    pub fn set(&mut self, id: ParamId, mode: Trainable) {
        self.modes[id.0] = mode;
    }

    pub fn get(&self, id: ParamId) -> &Trainable {
        &self.modes[id.0]
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.modes[id.0].is_frozen()
    }
}

/// Read access to a store for building a tape; frozen parameters enter the
/// tape as constants so backward skips their gradients.
#[derive(Clone, Copy)]
pub struct ParamView<'p> {
    pub store: &'p ParamStore,
    pub trainable: Option<&'p TrainableSet>,
}

impl<'p> ParamView<'p> {
    pub fn all(store: &'p ParamStore) -> Self {
        ParamView { store, trainable: None }
    }

    pub fn with(store: &'p ParamStore, trainable: &'p TrainableSet) -> Self {
        ParamView {
            store,
            trainable: Some(trainable),
        }
    }

    pub fn var(&self, tape: &mut crate::numerics::Tape<'p>, id: ParamId) -> crate::numerics::Var {
        match self.trainable {
            Some(t) if t.is_frozen(id) => tape.constant_ref(self.store.get(id)),
            _ => tape.param(self.store, id),
        }
    }

    pub fn get(&self, id: ParamId) -> &'p Tensor {
        self.store.get(id)
    }
}
