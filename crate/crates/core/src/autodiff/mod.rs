//! Reverse-mode automatic differentiation over dense [`Tensor`]s.
//!
//! A [`Tape`] records every operation in creation order, so node inputs
//! always precede the node itself. [`Tape::backward`] walks the records once
//! in reverse and accumulates gradients in node-index order, which makes the
//! result bit-for-bit reproducible.
//!
//! ```
//! use gausstr_core::autodiff::Tape;
//! use gausstr_core::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::new([2], vec![1.0, 2.0]).unwrap());
//! let loss = x.mul(&x).unwrap().sum();
//! let grads = tape.backward(&loss).unwrap();
//! assert_eq!(grads.wrt(&x).data(), &[2.0, 4.0]);
//! ```

pub mod check;
mod ops;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use ops::{broadcast_shape, concat_cols, reduce_to_shape};
pub(crate) use ops::softmax_rows;

/// Backward rule: maps the gradient of the node output to one optional
/// gradient per input (in input order).
pub type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    op: &'static str,
    inputs: Vec<usize>,
    shape: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Clone, Default)]
pub struct Tape {
    nodes: Rc<RefCell<Vec<Node>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    id: usize,
    value: Rc<Tensor>,
    tape: Tape,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Operation names in recording order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.borrow().iter().map(|n| n.op).collect()
    }

    /// A trainable input. Gradients are reported for leaves.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.record("leaf", &[], value, true, None)
    }

    /// A non-trainable input. No gradient flows into constants.
    pub fn constant(&self, value: Tensor) -> Var {
        self.record("constant", &[], value, false, None)
    }

    fn record(
        &self,
        op: &'static str,
        inputs: &[usize],
        value: Tensor,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            shape: value.shape().to_vec(),
            requires_grad,
            backward,
        });
        Var {
            id,
            value: Rc::new(value),
            tape: self.clone(),
        }
    }

    /// Record an operation with a hand-written backward rule. The rule is
    /// only kept when at least one input requires a gradient.
    pub fn custom(
        &self,
        op: &'static str,
        inputs: &[&Var],
        value: Tensor,
        backward: BackwardFn,
    ) -> Result<Var> {
        for v in inputs {
            if !Rc::ptr_eq(&v.tape.nodes, &self.nodes) {
                return Err(Error::Contract(format!(
                    "input of `{op}` belongs to a different tape"
                )));
            }
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.id].requires_grad)
        };
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let backward = requires_grad.then_some(backward);
        Ok(self.record(op, &ids, value, requires_grad, backward))
    }

    /// Gradients of a scalar `loss` with respect to every node on the tape.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if !Rc::ptr_eq(&loss.tape.nodes, &self.nodes) {
            return Err(Error::Contract("loss belongs to a different tape".into()));
        }
        if !loss.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.value.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::ones(loss.value.shape()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].as_ref() else {
                continue;
            };
            let input_grads = backward(g);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (&input, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !nodes[input].requires_grad {
                    continue;
                }
                debug_assert_eq!(ig.shape(), &nodes[input].shape[..], "op {}", node.op);
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros when the loss does not depend on it.
    pub fn wrt(&self, var: &Var) -> Tensor {
        self.grads[var.id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[var.id].clone()))
    }
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// The same value recorded as a constant (gradient flow stops here).
    pub fn detach(&self) -> Var {
        self.tape.constant((*self.value).clone())
    }

    fn check_same_tape(&self, other: &Var, op: &str) -> Result<()> {
        if Rc::ptr_eq(&self.tape.nodes, &other.tape.nodes) {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "operands of `{op}` live on different tapes"
            )))
        }
    }
}
