//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles in
//! execution order, so the node list is already topologically sorted.
//! [`Var::backward`] walks the list once in reverse and returns the
//! gradients of every leaf that was created with [`Tape::leaf`].
//!
//! Tapes are built per forward pass and dropped afterwards; there is no
//! support for higher-order derivatives.

pub mod conv;
mod ops;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use ops::concat_channels;

/// Backward rule of a recorded operation.
///
/// Returns one entry per input, in the order the inputs were recorded.
/// `None` means the input receives no gradient from this operation.
pub trait Backward {
    fn backward(
        &self,
        grad: &Tensor,
        inputs: &[&Tensor],
        output: &Tensor,
    ) -> Result<Vec<Option<Tensor>>>;
}

struct Node {
    value: Rc<Tensor>,
    inputs: Vec<usize>,
    op: Option<Box<dyn Backward>>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Node {
            value: Rc::new(value),
            inputs: Vec::new(),
            op: None,
            requires_grad: false,
        })
    }

    /// A differentiable input, e.g. a parameter.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Node {
            value: Rc::new(value),
            inputs: Vec::new(),
            op: None,
            requires_grad: true,
        })
    }

    /// Record `value` as the output of `op` applied to `inputs`.
    ///
    /// If no input requires a gradient the backward rule is dropped and
    /// the result behaves like a constant.
    pub fn record<'t>(
        &'t self,
        value: Tensor,
        inputs: &[Var<'t>],
        op: impl Backward + 'static,
    ) -> Var<'t> {
        debug_assert!(inputs.iter().all(|v| std::ptr::eq(v.tape, self)));
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.id].requires_grad)
        };
        self.push(Node {
            value: Rc::new(value),
            inputs: inputs.iter().map(|v| v.id).collect(),
            op: if requires_grad {
                Some(Box::new(op))
            } else {
                None
            },
            requires_grad,
        })
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
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self) -> Result<Gradients> {
        let nodes = self.tape.nodes.borrow();
        let loss = &nodes[self.id];
        if loss.value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.id + 1];
        if loss.requires_grad {
            grads[self.id] = Some(Tensor::full(loss.value.shape(), 1.0));
        }
        for id in (0..=self.id).rev() {
            let node = &nodes[id];
            let Some(op) = node.op.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &*nodes[i].value).collect();
            let input_grads = op.backward(&grad, &inputs, &node.value)?;
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (&input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        // Interior gradients were consumed above; what is left belongs to leaves.
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Var::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of its shape if the loss does not reach it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&var.shape()),
        }
    }

    pub(crate) fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}
