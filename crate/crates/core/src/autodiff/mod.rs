//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every op applied to its [`Var`]s. Values are immutable
//! once recorded; [`Tape::backward`] replays the records in reverse and
//! returns a [`Gradients`] table. A tape serves one forward/backward pass and
//! is not shared across threads.

mod conv;
mod elementwise;
mod loss;
mod matmul;
mod norm;
mod reduce;
mod shape;
mod softmax;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

pub use conv::ConvOptions;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Maps the upstream gradient to one optional gradient per parent. The flag
/// slice says which parents actually need a gradient.
type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

#[derive(Default)]
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a tape.
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Scalar> Copy for Var<'_, T> {}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    /// Records an input. Gradients are only produced for leaves created with
    /// `requires_grad` and for ops downstream of them.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), requires_grad, parents: Vec::new(), backward: None });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Records the result of an op. The backward rule is dropped when no
    /// parent needs a gradient.
    fn push<F>(&self, value: Tensor<T>, parents: &[Var<'_, T>], backward: F) -> Var<'_, T>
    where
        F: Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.id].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if requires_grad { Some(Box::new(backward)) } else { None },
        });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", root.value.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::ones(root.value.shape().to_vec()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let (Some(rule), Some(upstream)) = (node.backward.as_ref(), grads[id].as_ref()) else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = rule(upstream, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&pid, grad), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let Some(grad) = grad.filter(|_| need) else { continue };
                debug_assert_eq!(grad.shape(), nodes[pid].value.shape());
                match grads[pid].as_mut() {
                    Some(acc) => {
                        for (a, g) in acc.data_mut().iter_mut().zip(grad.data()) {
                            *a = *a + *g;
                        }
                    }
                    None => grads[pid] = Some(grad),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by one backward sweep, indexed by variable.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when `var` does not depend on any `requires_grad` leaf or is not
    /// upstream of the loss.
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but yields a zero tensor for unreached vars.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    fn same_tape(&self, other: &Var<'_, T>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let y = tape.leaf(Tensor::scalar(3.0), true);
        let f = x.mul(y).unwrap();
        let g = tape.backward(f).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0]);
        assert_eq!(g.get(y).unwrap().data(), &[2.0]);
    }

    #[test]
    fn reused_var_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(4.0), true);
        let f = x.mul(x).unwrap();
        let g = tape.backward(f).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[8.0]);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(vec![2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(1.5), true);
        let c = tape.constant(Tensor::scalar(2.0));
        let f = x.mul(c).unwrap();
        let g = tape.backward(f).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_leaves_forward_values_untouched() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(), true);
        let y = x.gelu().unwrap().mul(x).unwrap().mean_all().unwrap();
        let before: Vec<Vec<f64>> = (0..tape.len()).map(|id| tape.value(id).data().to_vec()).collect();
        tape.backward(y).unwrap();
        for (id, vals) in before.iter().enumerate() {
            assert_eq!(tape.value(id).data(), vals.as_slice());
        }
    }
}
