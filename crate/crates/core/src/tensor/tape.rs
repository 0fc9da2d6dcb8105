use std::sync::Arc;

use super::ops::{self, DeformGeometry};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation families, used for reporting and for the adjoint fault hook.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    AddRow,
    ScaleRows,
    Scale,
    Gelu,
    Sigmoid,
    Softmax,
    LayerNorm,
    Attention,
    DeformSample,
    SelectRows,
    ConcatRows,
    ConcatCols,
    Reshape,
    Sum,
    Mean,
    MeanRows,
    BceRows,
    DiceRows,
    CosineRows,
}

impl OpKind {
    pub const ALL: [OpKind; 23] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::AddRow,
        OpKind::ScaleRows,
        OpKind::Scale,
        OpKind::Gelu,
        OpKind::Sigmoid,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Attention,
        OpKind::DeformSample,
        OpKind::SelectRows,
        OpKind::ConcatRows,
        OpKind::ConcatCols,
        OpKind::Reshape,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::MeanRows,
        OpKind::BceRows,
        OpKind::DiceRows,
        OpKind::CosineRows,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddRow => "add_row",
            OpKind::ScaleRows => "scale_rows",
            OpKind::Scale => "scale",
            OpKind::Gelu => "gelu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Attention => "attention",
            OpKind::DeformSample => "deform_sample",
            OpKind::SelectRows => "select_rows",
            OpKind::ConcatRows => "concat_rows",
            OpKind::ConcatCols => "concat_cols",
            OpKind::Reshape => "reshape",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::MeanRows => "mean_rows",
            OpKind::BceRows => "bce_rows",
            OpKind::DiceRows => "dice_rows",
            OpKind::CosineRows => "cosine_rows",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.iter().copied().find(|k| k.name() == name)
    }
}

pub(crate) enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    ScaleRows { x: Var, s: Var },
    Scale { x: Var, c: T },
    Gelu(Var),
    Sigmoid(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, stats: Vec<T> },
    Attention { q: Var, k: Var, v: Var, heads: usize, blocks: usize, probs: Vec<T> },
    DeformSample { value: Var, offsets: Var, weights: Var, geom: Arc<DeformGeometry> },
    SelectRows { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    BceRows { logits: Var, targets: Vec<T> },
    DiceRows { logits: Var, targets: Vec<T> },
    CosineRows { a: Var, b: Var },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRow { .. } => OpKind::AddRow,
            Op::ScaleRows { .. } => OpKind::ScaleRows,
            Op::Scale { .. } => OpKind::Scale,
            Op::Gelu(_) => OpKind::Gelu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Attention { .. } => OpKind::Attention,
            Op::DeformSample { .. } => OpKind::DeformSample,
            Op::SelectRows { .. } => OpKind::SelectRows,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::MeanRows(_) => OpKind::MeanRows,
            Op::BceRows { .. } => OpKind::BceRows,
            Op::DiceRows { .. } => OpKind::DiceRows,
            Op::CosineRows { .. } => OpKind::CosineRows,
        }
    }
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<T>,
}

/// Ordered record of executed operations. Nodes are appended in execution
/// order, so reverse index order is a valid topological order for the
/// adjoint sweep. Values are immutable once recorded.
pub struct Tape<T: Scalar = f32> {
    pub(crate) nodes: Vec<Node<T>>,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node. Handles issued before the call become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Test hook: scales the adjoint propagated through every op of `kind`
    /// by 1.5, so gradient checks involving it must fail.
    #[doc(hidden)]
    pub fn corrupt_adjoint(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
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

    /// Scalar value of a one-element tensor.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Reverse sweep from a one-element `loss`. Returns gradients for every
    /// leaf created with [`Tape::param`] that the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let n = loss.0 + 1;
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: self.nodes[loss.0].value.shape().to_vec(),
                rhs: vec![1],
            });
        }
        let mut buf = GradBuf {
            grads: (0..n).map(|_| None).collect(),
            requires: self.nodes[..n].iter().map(|n| n.requires_grad).collect(),
        };
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads: buf.grads });
        }
        buf.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = buf.grads[i].take() else {
                continue;
            };
            if self.fault == Some(node.op.kind()) {
                let k = T::of(1.5);
                g.iter_mut().for_each(|x| *x *= k);
            }
            ops::backward(self, node, &g, &mut buf);
        }
        Ok(Gradients { grads: buf.grads })
    }
}

pub(crate) struct GradBuf<T> {
    grads: Vec<Option<Vec<T>>>,
    requires: Vec<bool>,
}

impl<T: Scalar> GradBuf<T> {
    /// Mutable gradient accumulator for `v`, or `None` if `v` does not need one.
    pub(crate) fn slot(&mut self, v: Var, numel: usize) -> Option<&mut [T]> {
        if !self.requires[v.0] {
            return None;
        }
        Some(
            self.grads[v.0]
                .get_or_insert_with(|| vec![T::zero(); numel])
                .as_mut_slice(),
        )
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, shaped like `v`. Leaves the
    /// loss does not depend on get zeros.
    pub fn wrt(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        let shape = tape.shape(v).to_vec();
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn raw(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}
