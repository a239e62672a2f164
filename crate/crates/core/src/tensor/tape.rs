use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::ops::Op;
use super::{Element, Result, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub(crate) fn index(self) -> usize {
        self.index
    }
}

pub(crate) struct Node<T> {
    pub value: Rc<Tensor<T>>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Wengert list for one forward pass.
///
/// Ops are appended in execution order, so every node's inputs have smaller
/// indices than the node itself and a reverse sweep is a valid topological
/// order.
pub struct Tape<T = f32> {
    id: u64,
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Records `tensor` as a leaf. Gradients are tracked when
    /// `tensor.requires_grad()` is set.
    pub fn leaf(&self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, requires_grad)
    }

    /// Leaf that always tracks gradients.
    pub fn param(&self, tensor: Tensor<T>) -> Var {
        self.push(tensor.with_requires_grad(true), Op::Leaf, true)
    }

    /// Leaf that never tracks gradients.
    pub fn constant(&self, tensor: Tensor<T>) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, var: Var) -> Rc<Tensor<T>> {
        self.check(var);
        Rc::clone(&self.nodes.borrow()[var.index].value)
    }

    pub fn shape(&self, var: Var) -> Vec<usize> {
        self.check(var);
        self.nodes.borrow()[var.index].value.shape().to_vec()
    }

    pub(crate) fn requires_grad(&self, var: Var) -> bool {
        self.nodes.borrow()[var.index].requires_grad
    }

    pub(crate) fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    /// Records a derived value whose gradient is needed iff any input needs one.
    pub(crate) fn record(&self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|&v| self.requires_grad(v));
        self.push(value, op, requires_grad)
    }

    fn check(&self, var: Var) {
        assert_eq!(var.tape, self.id, "variable belongs to a different tape");
    }

    /// Reverse sweep from a scalar `loss`. Gradients of every node that
    /// requires one are returned, intermediates included. Gradients from
    /// multiple uses of a value add up.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        self.check(loss);
        let nodes = self.nodes.into_inner();
        let loss_shape = nodes[loss.index].value.shape().to_vec();
        if nodes[loss.index].value.numel() != 1 {
            return Err(TensorError::NotScalar(loss_shape));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        if nodes[loss.index].requires_grad {
            grads[loss.index] = Some(vec![T::one()]);
        }
        for index in (0..=loss.index).rev() {
            let node = &nodes[index];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = grads[index].take() else {
                continue;
            };
            let contributions = node.op.backward(&nodes, &node.value, &upstream);
            grads[index] = Some(upstream);
            for (input, g) in contributions {
                if !nodes[input.index].requires_grad {
                    continue;
                }
                match &mut grads[input.index] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T = f32> {
    tape: u64,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient with respect to `var`, or `None` when no path reached it.
    pub fn wrt(&self, var: Var) -> Option<&[T]> {
        assert_eq!(var.tape, self.tape, "variable belongs to a different tape");
        self.grads.get(var.index).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `var` into `target.grad`. Missing gradients count
    /// as zero.
    pub fn accumulate_into(&self, var: Var, target: &mut Tensor<T>) {
        match self.wrt(var) {
            Some(g) => target.accumulate_grad(g),
            None => target.accumulate_grad(&vec![T::zero(); target.numel()]),
        }
    }
}
