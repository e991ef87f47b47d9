//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in creation
//! order, which is already a topological order. [`Tape::backward`] walks the
//! record once in reverse and accumulates gradients for every node that
//! (transitively) depends on a leaf created with [`Tape::leaf`].
//!
//! A tape is single-threaded by construction (`RefCell`); independent runs use
//! independent tapes.

mod conv;
pub mod gemm;
pub mod gradcheck;
mod ops;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use gemm::Precision;
pub use gradcheck::grad_check;
pub(crate) use ops::Op;

pub(crate) struct Node {
    pub(crate) value: Rc<Tensor>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Option<Vec<Option<Tensor>>>>,
    precision: Precision,
    grad_bytes: RefCell<usize>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_precision(Precision::F64)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self { nodes: RefCell::new(Vec::new()), grads: RefCell::new(None), precision, grad_bytes: RefCell::new(0) }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input (masks, labels, frozen statistics).
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub(crate) fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bytes held by recorded values plus any extra buffers saved for backward.
    pub fn activation_bytes(&self) -> usize {
        self.nodes.borrow().iter().map(|n| (n.value.len() + n.op.saved_len()) * std::mem::size_of::<f64>()).sum()
    }

    /// Bytes of gradient buffers materialized by the last backward pass.
    pub fn gradient_bytes(&self) -> usize {
        *self.grad_bytes.borrow()
    }

    /// Populates gradients of `loss` with respect to every leaf.
    ///
    /// Fails if `loss` is not a single element, does not depend on any leaf,
    /// or if gradients from a previous call have not been cleared.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if self.grads.borrow().is_some() {
            return Err(Error::Backward("gradients already populated; call clear_grads first".into()));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Backward(format!("loss must be scalar, shape is {:?}", root.value.shape())));
        }
        if !root.requires_grad {
            return Err(Error::Backward("loss does not depend on any differentiable leaf".into()));
        }

        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));
        let mut bytes = 0usize;
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[id].take() else { continue };
            bytes += gout.len() * std::mem::size_of::<f64>();
            let needs = |p: usize| nodes[p].requires_grad;
            for (parent, g) in ops::backward(&node.op, &nodes, self.precision, &node.value, &gout, &needs) {
                debug_assert_eq!(g.shape(), nodes[parent].value.shape(), "grad shape for {}", node.op.tag());
                match &mut grads[parent] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        for (id, g) in grads.iter().enumerate() {
            if let (Some(g), Op::Leaf) = (g, &nodes[id].op) {
                bytes += g.len() * std::mem::size_of::<f64>();
            }
        }
        drop(nodes);
        *self.grad_bytes.borrow_mut() = bytes;
        *self.grads.borrow_mut() = Some(grads);
        Ok(())
    }

    pub fn clear_grads(&self) {
        *self.grads.borrow_mut() = None;
    }

    /// Gradient of the last backward root with respect to the leaf `var`.
    ///
    /// Returns `None` before backward, for constants, and for leaves that do
    /// not influence the loss.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let grads = self.grads.borrow();
        grads.as_ref()?.get(var.id)?.clone()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn op_tag(&self) -> &'static str {
        self.tape.nodes.borrow()[self.id].op.tag()
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}<{}>{:?}", self.id, self.op_tag(), self.shape())
    }
}
