//! Named parameter storage and per-forward-pass binding onto a tape.

use std::cell::RefCell;

use ndarray::ArrayD;

use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub value: ArrayD<T>,
    pub frozen: bool,
}

/// Owns all learnable tensors of a model. Registration order is the
/// checkpoint order, so construction must be deterministic.
pub struct ParamStore<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<T>) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name: {name}"
        );
        self.entries.push(ParamEntry {
            name,
            value,
            frozen: false,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    /// Freeze/unfreeze all parameters whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.frozen = frozen;
                n += 1;
            }
        }
        n
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// One forward pass: a tape plus lazy bindings of parameters onto it.
pub struct Session<'a, T: Scalar> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    bound: RefCell<Vec<Option<Var>>>,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Session {
            tape: Tape::new(),
            store,
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    /// Inference session: no backward closures are recorded.
    pub fn eval(store: &'a ParamStore<T>) -> Self {
        Session {
            tape: Tape::eval(),
            store,
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Bind a parameter as a tape leaf (once per session).
    pub fn param(&self, id: ParamId) -> Var {
        let mut bound = self.bound.borrow_mut();
        if let Some(v) = bound[id.0] {
            return v;
        }
        let var = self.tape.leaf(self.store.value(id).clone());
        bound[id.0] = Some(var);
        var
    }

    /// Gradients of every bound, non-frozen parameter.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<(ParamId, ArrayD<T>)> {
        let bound = self.bound.borrow();
        let mut out = Vec::new();
        for (i, slot) in bound.iter().enumerate() {
            let id = ParamId(i);
            if self.store.is_frozen(id) {
                continue;
            }
            if let Some(var) = slot {
                if let Some(g) = grads.take(*var) {
                    out.push((id, g));
                }
            }
        }
        out
    }
}
