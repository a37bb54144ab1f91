//! Tape-style computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node index order is a
//! topological order and the backward sweep is a single reverse scan that
//! touches each reachable node once.

use crate::error::{Result, TensorError};
use crate::ops::conv::ConvSpec;
use crate::{Float, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive that produced a node, with whatever the backward rule needs.
#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    MeanAxis { x: Var, axis: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Select { x: Var, axis: usize, index: usize },
    ExpandBatch(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    BatchMatMul { a: Var, b: Var, ta: bool, tb: bool },
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    CrossEntropy { logits: Var, soft_targets: Vec<T>, probs: Vec<T> },
}

impl<T> Op<T> {
    pub(crate) fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | AddBroadcast(a, b) | Mul(a, b) => vec![*a, *b],
            Scale(x, _) | Relu(x) | Gelu(x) | Sum(x) | Mean(x) | Reshape(x) | ExpandBatch(x)
            | Softmax(x) => vec![*x],
            MeanAxis { x, .. } | Permute { x, .. } | Select { x, .. } => vec![*x],
            Concat { xs, .. } => xs.clone(),
            Linear { x, w, b } => [Some(*x), Some(*w), *b].into_iter().flatten().collect(),
            BatchMatMul { a, b, .. } => vec![*a, *b],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Conv2d { x, w, b, .. } => [Some(*x), Some(*w), *b].into_iter().flatten().collect(),
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// A single-use computation graph. Build it by calling op methods, then call
/// [`Graph::backward`] on a scalar node.
#[derive(Debug, Default)]
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`. Gradients of intermediate nodes are
    /// released once propagated; only leaves keep theirs.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.backward_retain(loss, &[])
    }

    /// Like [`Graph::backward`], additionally keeping the gradients of `keep`.
    pub fn backward_retain(&self, loss: Var, keep: &[Var]) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);
        let need = |v: Var| self.nodes[v.0].requires_grad;
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (parent, contribution) in self.backward_node(i, &g, &need) {
                debug_assert!(parent.0 < i);
                match &mut grads[parent.0] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contribution) {
                            *a += *c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            }
            if keep.contains(&Var(i)) {
                grads[i] = Some(g);
            }
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| Tensor::new(self.nodes[i].value.shape(), data).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_node(&self, i: usize, g: &[T], need: &dyn Fn(Var) -> bool) -> Vec<(Var, Vec<T>)> {
        use crate::ops::{conv, elementwise as ew, loss, matmul, norm, shape};
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => ew::add_backward(*a, *b, g, need),
            Op::Sub(a, b) => ew::sub_backward(*a, *b, g, need),
            Op::AddBroadcast(a, b) => ew::add_broadcast_backward(self, *a, *b, g, need),
            Op::Mul(a, b) => ew::mul_backward(self, *a, *b, g, need),
            Op::Scale(x, c) => vec![(*x, g.iter().map(|&v| v * *c).collect())],
            Op::Relu(x) => ew::relu_backward(self, *x, g),
            Op::Gelu(x) => ew::gelu_backward(self, *x, g),
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).len()])],
            Op::Mean(x) => {
                let n = self.value(*x).len();
                vec![(*x, vec![g[0] / T::from_usize(n); n])]
            }
            Op::MeanAxis { x, axis } => shape::mean_axis_backward(self, *x, *axis, g),
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Permute { x, perm } => shape::permute_backward(self, *x, perm, g),
            Op::Concat { xs, axis } => shape::concat_backward(self, xs, *axis, g, need),
            Op::Select { x, axis, index } => shape::select_backward(self, *x, *axis, *index, g),
            Op::ExpandBatch(x) => shape::expand_batch_backward(self, *x, g),
            Op::Linear { x, w, b } => matmul::linear_backward(self, *x, *w, *b, g, need),
            Op::BatchMatMul { a, b, ta, tb } => matmul::bmm_backward(self, *a, *b, *ta, *tb, g, need),
            Op::Softmax(x) => norm::softmax_backward(*x, out, g),
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                norm::layer_norm_backward(self, *x, *gamma, *beta, xhat, rstd, g, need)
            }
            Op::Conv2d { x, w, b, spec } => conv::conv2d_backward(self, *x, *w, *b, spec, g, need),
            Op::CrossEntropy { logits, soft_targets, probs } => {
                loss::cross_entropy_backward(*logits, soft_targets, probs, self.shape(*logits), g)
            }
        }
    }
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`; `None` when `v` did not influence the
    /// loss, does not require a gradient, or was an intermediate node that was
    /// not retained.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when it received none.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}
