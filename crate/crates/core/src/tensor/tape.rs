use super::{Float, Tensor};
use crate::error::{bail, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(super) usize);

/// Pooling window of one region: the feature-map image it reads from and
/// the half-open cell ranges of every output bin.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoiWindow {
    pub batch: usize,
    pub rows: Vec<(usize, usize)>,
    pub cols: Vec<(usize, usize)>,
}

#[derive(Debug)]
pub(super) enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize },
    Relu(Var),
    MaxPool { input: Var, argmax: Vec<usize> },
    Linear { input: Var, weight: Var, bias: Option<Var> },
    RoiPool { input: Var, argmax: Vec<usize> },
    ScaleRows { input: Var, weights: Vec<T> },
    Reshape(Var),
    DivAlong { input: Var, temps: Var, axis: usize },
    Softmax { input: Var, axis: usize },
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { input: Var, scale: T },
    SumAxis { input: Var, axis: usize },
    SumAll(Var),
    Clamp { input: Var, lo: T, hi: T },
    Ln(Var),
}

pub(super) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Dynamically recorded computation graph.
///
/// Ops are appended in execution order, so the node list is already a
/// topological order and backward is a single reverse sweep. A tape supports
/// one backward pass; call [`Tape::reset`] to reuse it.
pub struct Tape<T> {
    pub(super) nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), backward_done: false }
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(super) fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Record an input value. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v`'s value as a new gradient-free leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Reverse sweep from a scalar `loss`, populating gradients of every
    /// node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            bail!(State, "backward already ran on this tape; reset it first");
        }
        let value = self.value(loss);
        if value.numel() != 1 {
            bail!(Contract, "backward needs a scalar loss, got shape {:?}", value.shape());
        }
        value.ensure_finite("loss")?;
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.backprop(idx, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }
        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad)
                    .map(|g| Tensor::new(node.value.shape(), g).expect("grad matches value shape"))
            })
            .collect();
        Ok(())
    }

    /// Accumulate `delta` into the gradient slot of `v`, allocating on first use.
    pub(super) fn accumulate(
        &self,
        grads: &mut [Option<Vec<T>>],
        v: Var,
        f: impl FnOnce(&mut [T]),
    ) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
        f(slot);
    }
}
