use std::cell::RefCell;

use super::{Gradients, Tape, Tensor, Var};

/// Index of a named parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered, named collection of trainable tensors.
///
/// Insertion order is stable and defines the checkpoint manifest order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    frozen: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        self.frozen.push(false);
        ParamId(self.tensors.len() - 1)
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
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

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.frozen[id.0] = frozen;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    /// Total number of scalars across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn num_scalars_matching(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.iter().filter(|(_, n, _)| pred(n)).map(|(_, _, t)| t.len()).sum()
    }
}

/// Lazily records parameters onto a tape the first time a forward pass uses them.
pub struct Binder<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    vars: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'t, 's> Binder<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Self {
            tape,
            store,
            vars: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        if let Some(v) = self.vars.borrow()[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone());
        self.vars.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Per-parameter gradients; parameters the root never touched are `None`.
    pub fn collect(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.vars
            .borrow()
            .iter()
            .map(|v| v.and_then(|v| grads.get(v).cloned()))
            .collect()
    }
}
