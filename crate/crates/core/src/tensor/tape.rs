use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded operation.
///
/// Implementors hold whatever the forward pass saved; input values are read
/// back from the tape through `values`.
pub trait Backward<T: Scalar>: Send {
    fn name(&self) -> &'static str;
    fn backward(&self, values: &Tape<T>, out_grad: &[T], sink: &mut GradSink<T>);
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Option<Box<dyn Backward<T>>>,
}

/// Append-only record of a forward pass.
///
/// Nodes only reference earlier nodes, so creation order is a topological
/// order and `backward` is a single reverse sweep.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Gradients are reported for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Records the result of an operation on `inputs`. The backward closure is
    /// dropped when no input needs a gradient.
    pub fn push(
        &mut self,
        value: Tensor<T>,
        inputs: &[Var],
        op: impl Backward<T> + 'static,
    ) -> Var {
        debug_assert!(inputs.iter().all(|v| v.0 < self.nodes.len()));
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op: requires_grad.then(|| Box::new(op) as Box<dyn Backward<T>>),
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut sink = GradSink {
            grads: (0..self.nodes.len()).map(|_| None).collect(),
            requires: self.nodes.iter().map(|n| n.requires_grad).collect(),
            numel: self.nodes.iter().map(|n| n.value.numel()).collect(),
        };
        if !sink.requires[loss.0] {
            return Ok(self.collect_leaf_grads(sink));
        }
        sink.grads[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            let Some(op) = &self.nodes[i].op else { continue };
            let Some(out_grad) = sink.grads[i].take() else { continue };
            op.backward(&self, &out_grad, &mut sink);
        }
        Ok(self.collect_leaf_grads(sink))
    }

    fn collect_leaf_grads(self, mut sink: GradSink<T>) -> Gradients<T> {
        let grads = self
            .nodes
            .into_iter()
            .enumerate()
            .map(|(i, node)| {
                if node.op.is_some() || !node.requires_grad {
                    return None;
                }
                let shape = node.value.shape().to_vec();
                let data = sink.grads[i]
                    .take()
                    .unwrap_or_else(|| vec![T::ZERO; node.value.numel()]);
                Some(Tensor::new(shape, data).expect("gradient shape"))
            })
            .collect();
        Gradients { grads }
    }
}

/// Gradient accumulator handed to [`Backward::backward`].
pub struct GradSink<T> {
    grads: Vec<Option<Vec<T>>>,
    requires: Vec<bool>,
    numel: Vec<usize>,
}

impl<T: Scalar> GradSink<T> {
    /// Mutable gradient buffer of `var`, or `None` if `var` needs no gradient.
    pub fn slot(&mut self, var: Var) -> Option<&mut [T]> {
        if !self.requires[var.0] {
            return None;
        }
        let n = self.numel[var.0];
        Some(self.grads[var.0].get_or_insert_with(|| vec![T::ZERO; n]))
    }

    pub fn wants(&self, var: Var) -> bool {
        self.requires[var.0]
    }

    /// Adds `grad` elementwise into `var`'s buffer.
    pub fn add(&mut self, var: Var, grad: &[T]) {
        if let Some(slot) = self.slot(var) {
            for (g, &d) in slot.iter_mut().zip(grad) {
                *g += d;
            }
        }
    }
}

/// Gradients of the loss with respect to every `requires_grad` leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}
