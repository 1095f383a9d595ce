//! Reverse-mode automatic differentiation over a single-use tape.
//!
//! Every op applied to a [`Var`] computes its value eagerly and appends a node
//! holding the value and a closure mapping the output gradient to gradients of
//! its parents. [`Tape::backward`] walks the nodes in reverse creation order.
//! Nodes that do not depend on any gradient-requiring leaf store no closure.

pub mod gradcheck;
mod ops;

pub(crate) use ops::permute_last;

use std::cell::{Cell, RefCell};
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use ops::ScanArgs;

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T> {
    value: Arc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    name: Option<String>,
}

/// Ordered record of executed operations.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

impl<T> Default for Tape<T> {
    fn default() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }
}

impl<T> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("consumed", &self.consumed.get())
            .finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Var<'_, T> {}

impl<T> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a constant (never differentiated).
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(Arc::new(value), false, None)
    }

    /// Records a differentiable leaf.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(Arc::new(value), true, None)
    }

    /// Records a named parameter leaf sharing storage with the caller.
    pub fn param(&self, name: &str, value: Arc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        self.push_leaf(value, requires_grad, Some(name.to_string()))
    }

    fn push_leaf(
        &self,
        value: Arc<Tensor<T>>,
        requires_grad: bool,
        name: Option<String>,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
            name,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Appends an op result. `make_backward` is only invoked when some parent
    /// requires a gradient.
    pub(crate) fn push_op<F>(
        &self,
        value: Tensor<T>,
        parents: &[Var<'_, T>],
        make_backward: F,
    ) -> Var<'_, T>
    where
        F: FnOnce() -> BackwardFn<T>,
    {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.id].requires_grad);
        nodes.push(Node {
            value: Arc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            backward: requires_grad.then(make_backward),
            requires_grad,
            name: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Runs the reverse pass from a scalar `loss`. A tape supports exactly one
    /// backward pass.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if self.consumed.replace(true) {
            return Err(Error::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let loss_shape = nodes[loss.id].value.shape();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::ones(loss_shape));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let parent_grads = backward(&g)?;
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[pid].requires_grad {
                    continue;
                }
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot => *slot = Some(pg),
                }
            }
        }
        let named = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.name.clone().map(|name| (name, i)))
            .collect();
        Ok(Gradients { grads, named })
    }
}

/// Result of a backward pass: gradients of every reachable leaf.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    named: Vec<(String, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf, or `None` if it did not influence the loss.
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of a leaf, zero-filled when the leaf did not influence the loss.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape().as_slice()))
    }

    /// Gradients of named parameter leaves, in recording order.
    pub fn named(&self) -> impl Iterator<Item = (&str, Option<&Tensor<T>>)> {
        self.named
            .iter()
            .map(|(name, id)| (name.as_str(), self.grads[*id].as_ref()))
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_weighted_sum_is_input() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap());
        let w = tape.leaf(Tensor::from_f64(&[3], &[0.3, 0.1, 4.0]).unwrap());
        let loss = w.mul(x).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0, -2.0, 0.5]);
        assert!(g.get(x).is_none());
    }

    #[test]
    fn grad_of_half_square_is_identity() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[2, 2], &[1.0, -3.0, 2.5, 0.0]).unwrap());
        let loss = x.mul(x).unwrap().sum().scale(0.5);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), x.value().data());
    }

    #[test]
    fn second_backward_is_rejected() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones(&[2]));
        let loss = x.sum();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::TapeConsumed)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn reused_var_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[1], &[3.0]).unwrap());
        let y = x.add(x).unwrap().add(x).unwrap().sum();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0]);
    }

    #[test]
    fn named_params_are_reported() {
        let tape = Tape::<f32>::new();
        let w = tape.param("w", Arc::new(Tensor::ones(&[2])), true);
        let frozen = tape.param("frozen", Arc::new(Tensor::ones(&[2])), false);
        let loss = w.mul(frozen).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        let named: Vec<_> = g.named().map(|(n, g)| (n.to_string(), g.is_some())).collect();
        assert_eq!(named, vec![("w".into(), true), ("frozen".into(), false)]);
    }
}
