//! The autodiff tape: node storage, value access and the backward driver.

use std::cell::RefCell;

use ndarray::{ArcArray, ArrayD, IxDyn};

use crate::scalar::Scalar;

/// Shared, cheaply clonable tensor value.
pub type Value<T> = ArcArray<T, IxDyn>;

/// Backward closure: maps the output gradient to `(parent, contribution)` pairs.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&ArrayD<T>) -> Vec<(usize, ArrayD<T>)>>;

pub(crate) struct Node<T: Scalar> {
    pub(crate) value: Value<T>,
    pub(crate) backward: Option<BackwardFn<T>>,
}

/// Handle to a node on a [`Tape`]. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Define-by-run computation graph. One tape per forward pass; dropped
/// afterwards, so inference memory does not grow with sequence length.
pub struct Tape<T: Scalar> {
    pub(crate) nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
}

impl<T: Scalar> Tape<T> {
    /// Tape that records backward closures (training / gradient checks).
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// Tape that skips backward closures entirely (inference).
    pub fn eval() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Insert a leaf value (input or parameter).
    pub fn leaf(&self, value: ArrayD<T>) -> Var {
        self.push(value.into_shared(), None)
    }

    pub(crate) fn push(&self, value: Value<T>, backward: Option<BackwardFn<T>>) -> Var {
        // node values are always standard layout (ndarray's GEMM may hand
        // back F-order results for degenerate shapes)
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned().into_shared()
        };
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            backward: if self.grad_enabled { backward } else { None },
        });
        Var(id)
    }

    /// Shared handle to a node's value.
    pub fn value(&self, v: Var) -> Value<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Owned copy of a node's value.
    pub fn array(&self, v: Var) -> ArrayD<T> {
        self.nodes.borrow()[v.0].value.to_owned()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Extract a 0-d / single-element value as a scalar.
    pub fn scalar(&self, v: Var) -> T {
        let nodes = self.nodes.borrow();
        let val = &nodes[v.0].value;
        assert_eq!(val.len(), 1, "scalar() on tensor of shape {:?}", val.shape());
        *val.iter().next().unwrap()
    }

    /// Reverse pass from a single-element root. Returns per-node gradients.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert!(
            self.grad_enabled,
            "backward() called on an eval-mode tape"
        );
        let nodes = self.nodes.borrow();
        let root_val = &nodes[root.0].value;
        assert_eq!(
            root_val.len(),
            1,
            "backward root must be a single-element tensor, got shape {:?}",
            root_val.shape()
        );
        let mut grads: Vec<Option<ArrayD<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::from_elem(root_val.raw_dim(), T::one()));

        for id in (0..=root.0).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            if let Some(bw) = &nodes[id].backward {
                for (pid, contrib) in bw(&grad) {
                    debug_assert!(pid < id, "backward edge must point to an earlier node");
                    // keep gradients in standard layout so closures can rely on it
                    let contrib = if contrib.is_standard_layout() {
                        contrib
                    } else {
                        contrib.as_standard_layout().into_owned()
                    };
                    match &mut grads[pid] {
                        Some(acc) => *acc += &contrib,
                        slot => *slot = Some(contrib),
                    }
                }
            }
            grads[id] = Some(grad);
        }
        Gradients { grads }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
