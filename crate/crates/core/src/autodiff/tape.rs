use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{fmt_shape, Error, Result};
use crate::tensor::{Element, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Read access to recorded values during the backward sweep.
pub struct BackwardContext<'a, T: Element> {
    nodes: &'a [Node<T>],
    inputs: &'a [usize],
}

impl<'a, T: Element> BackwardContext<'a, T> {
    /// Value of the `k`-th input of the op being differentiated.
    pub fn input(&self, k: usize) -> &'a Tensor<T> {
        &self.nodes[self.inputs[k]].value
    }

    /// Whether the `k`-th input needs a gradient at all.
    pub fn needs_grad(&self, k: usize) -> bool {
        self.nodes[self.inputs[k]].requires_grad
    }
}

/// The backward half of a recorded operation.
///
/// `backward` receives the gradient of the loss with respect to the op's
/// output and returns one entry per input, `None` for inputs that do not
/// need a gradient.
pub trait Backward<T: Element>: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, ctx: &BackwardContext<'_, T>, grad_out: &[T]) -> Vec<Option<Vec<T>>>;
}

struct Record<T: Element> {
    op: Box<dyn Backward<T>>,
    inputs: Vec<usize>,
}

pub(crate) struct Node<T: Element> {
    value: Tensor<T>,
    requires_grad: bool,
    tag: Option<usize>,
    record: Option<Record<T>>,
}

/// Define-by-run record of a forward computation.
///
/// Nodes are appended in execution order, so every node's inputs precede it
/// and a reverse sweep is a valid reverse topological order.
pub struct Tape<T: Element = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Its `requires_grad` flag decides whether
    /// gradients flow back to it.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push_node(tensor.detach(), requires_grad, None, None)
    }

    /// Records a constant input; gradients never flow to it.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push_node(tensor.detach(), false, None, None)
    }

    /// Records a leaf carrying a caller-chosen tag, so its gradient can be
    /// routed back to the owning parameter after [`backward`](Self::backward).
    pub fn tagged_leaf(&mut self, tensor: &Tensor<T>, requires_grad: bool, tag: usize) -> Var {
        self.push_node(tensor.detach(), requires_grad, Some(tag), None)
    }

    fn push_node(&mut self, value: Tensor<T>, requires_grad: bool, tag: Option<usize>, record: Option<Record<T>>) -> Var {
        self.nodes.push(Node { value, requires_grad, tag, record });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    /// Appends the result of an operation. The backward op is kept only when
    /// at least one input requires a gradient.
    pub fn record(&mut self, value: Tensor<T>, inputs: &[Var], op: Box<dyn Backward<T>>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.index].requires_grad);
        let record = requires_grad.then(|| Record { op, inputs: inputs.iter().map(|v| v.index).collect() });
        self.push_node(value.detach(), requires_grad, None, record)
    }

    pub fn check(&self, var: Var) -> Result<()> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(Error::Contract("variable is not recorded on this tape".into()));
        }
        Ok(())
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        assert_eq!(var.tape, self.id, "variable belongs to a different tape");
        &self.nodes[var.index].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.value(var).shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        assert_eq!(var.tape, self.id, "variable belongs to a different tape");
        self.nodes[var.index].requires_grad
    }

    /// Kind names of the recorded operations, in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().filter_map(|n| n.record.as_ref().map(|r| r.op.name())).collect()
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Returns the accumulated gradient of every `requires_grad` leaf
    /// reachable from `loss`. Contributions from multiple uses are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check(loss)?;
        let loss_value = &self.nodes[loss.index].value;
        if loss_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {}",
                fmt_shape(loss_value.shape())
            )));
        }
        if !loss_value.data()[0].is_finite() {
            return Err(Error::NonFinite(format!("loss value {} is not finite", loss_value.data()[0])));
        }

        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.index + 1);
        grads.resize_with(loss.index + 1, || None);
        grads[loss.index] = Some(vec![T::one()]);
        let mut leaves = Vec::new();

        for i in (0..=loss.index).rev() {
            let Some(grad) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.record {
                Some(record) => {
                    let ctx = BackwardContext { nodes: &self.nodes, inputs: &record.inputs };
                    let input_grads = record.op.backward(&ctx, &grad);
                    debug_assert_eq!(input_grads.len(), record.inputs.len(), "{}", record.op.name());
                    for (&input, g) in record.inputs.iter().zip(input_grads) {
                        let Some(g) = g else { continue };
                        if !self.nodes[input].requires_grad {
                            continue;
                        }
                        debug_assert_eq!(g.len(), self.nodes[input].value.len(), "{}", record.op.name());
                        match &mut grads[input] {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &d)| *a = *a + d),
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
                None if node.requires_grad => leaves.push(LeafGrad { index: i, tag: node.tag, grad }),
                None => {}
            }
        }
        leaves.reverse();
        Ok(Gradients { tape: self.id, shapes: leaves.iter().map(|l| self.nodes[l.index].value.shape().to_vec()).collect(), leaves })
    }
}

struct LeafGrad<T> {
    index: usize,
    tag: Option<usize>,
    grad: Vec<T>,
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T: Element> {
    tape: u64,
    leaves: Vec<LeafGrad<T>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient for a leaf, or `None` if it was unreachable or constant.
    pub fn get(&self, var: Var) -> Option<Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.leaves
            .iter()
            .zip(&self.shapes)
            .find(|(l, _)| l.index == var.index)
            .map(|(l, s)| Tensor::from_vec(l.grad.clone(), s).expect("gradient matches leaf shape"))
    }

    /// Writes every leaf gradient into the matching tensor's grad buffer.
    pub fn accumulate_into(&self, var: Var, tensor: &mut Tensor<T>) -> Result<()> {
        match self.get(var) {
            Some(g) => tensor.accumulate_grad(g.data()),
            None => Ok(()),
        }
    }

    /// Consumes the store, yielding `(tag, gradient)` for tagged leaves.
    pub fn into_tagged(self) -> impl Iterator<Item = (usize, Vec<T>)> {
        self.leaves.into_iter().filter_map(|l| l.tag.map(|t| (t, l.grad)))
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}
