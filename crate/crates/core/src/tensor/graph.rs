use std::cell::{Cell, RefCell};
use std::fmt;
use std::sync::Arc;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Backward rule of one recorded operation.
///
/// Receives the gradient of the loss with respect to the operation output
/// and a mask telling which inputs need a gradient; returns one entry per
/// input (`None` where no gradient is produced).
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    op: &'static str,
    value: Arc<Tensor<T>>,
    inputs: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Tape of eagerly evaluated operations, in creation (topological) order.
///
/// A graph holds no global state, so independent graphs can live on
/// different threads. It is meant to be rebuilt for every forward pass.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Tensor<T>>>>,
    differentiated: Cell<bool>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.borrow().len())
            .field("differentiated", &self.differentiated.get())
            .finish()
    }
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.graph.nodes.borrow();
        let node = &nodes[self.id];
        write!(f, "Var#{}({}, {:?})", self.id, node.op, node.value.shape())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            differentiated: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Input tensor. Gradients are kept for it when `requires_grad` is set.
    pub fn leaf(&self, value: impl Into<Arc<Tensor<T>>>, requires_grad: bool) -> Var<'_, T> {
        self.push(Node {
            op: "leaf",
            value: value.into(),
            inputs: Vec::new(),
            requires_grad,
            backward: None,
        })
    }

    pub fn constant(&self, value: impl Into<Arc<Tensor<T>>>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn variable(&self, value: impl Into<Arc<Tensor<T>>>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(value))
    }

    /// Records an operation whose value has already been computed.
    ///
    /// `backward` is dropped without being stored when no input requires
    /// a gradient, so frozen sub-networks cost nothing at backward time.
    pub fn apply<'g, F>(
        &'g self,
        op: &'static str,
        inputs: &[Var<'g, T>],
        value: impl Into<Arc<Tensor<T>>>,
        backward: F,
    ) -> Var<'g, T>
    where
        F: Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let value = value.into();
        debug_assert!(inputs.iter().all(|v| std::ptr::eq(v.graph, self)));
        let requires_grad = inputs.iter().any(|v| v.requires_grad());
        self.push(Node {
            op,
            value,
            inputs: inputs.iter().map(|v| v.id).collect(),
            requires_grad,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        })
    }

    /// Accumulates d`loss`/d`v` into every gradient-requiring node that
    /// `loss` depends on. May be called once per graph.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        if !std::ptr::eq(loss.graph, self) {
            return Err(Error::Usage("loss belongs to a different graph".into()));
        }
        if self.differentiated.get() {
            return Err(Error::Usage(
                "backward was already called on this graph; rebuild it for another pass".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        self.differentiated.set(true);

        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(root.value.shape().to_vec()));
        let mut needs = Vec::new();
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad_out) = grads[id].as_ref() else {
                continue;
            };
            needs.clear();
            needs.extend(node.inputs.iter().map(|&i| nodes[i].requires_grad));
            let input_grads = backward(grad_out, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "op {}", node.op);
            for (&input, grad) in node.inputs.iter().zip(input_grads) {
                let Some(grad) = grad else { continue };
                if !nodes[input].requires_grad {
                    continue;
                }
                debug_assert_eq!(
                    grad.shape(),
                    nodes[input].value.shape(),
                    "gradient shape from op {}",
                    node.op
                );
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&grad),
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.borrow().get(v.id).and_then(|g| g.clone())
    }

    /// Moves a gradient out of the graph without copying.
    pub fn take_grad(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.borrow_mut().get_mut(v.id).and_then(|g| g.take())
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    pub fn op(&self) -> &'static str {
        self.graph.nodes.borrow()[self.id].op
    }

    /// Value of a single-element variable.
    pub fn item(&self) -> T {
        self.graph.nodes.borrow()[self.id].value.item()
    }

    /// Same value, cut off from gradient flow.
    pub fn detach(&self) -> Var<'g, T> {
        self.graph.constant(self.value())
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.graph.grad(*self)
    }
}
