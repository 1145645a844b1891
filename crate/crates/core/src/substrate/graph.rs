//! Record-and-replay reverse-mode differentiation.
//!
//! Every operation applied through a [`Graph`] appends one node holding its
//! output value and whatever the adjoint rule needs. [`Graph::backward`]
//! walks the nodes in exact reverse order of recording.

use std::borrow::Cow;

use rand::Rng;

use super::ops::{self, ConvSpec, LstmCache};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Merge {
    Concat,
    Sum,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1d { x: NodeId, w: NodeId, b: NodeId, spec: ConvSpec },
    MaxPool { x: NodeId, indices: Vec<usize> },
    Repeat { x: NodeId, axis: usize, factor: usize },
    Dense { x: NodeId, w: NodeId, b: NodeId },
    Lstm { x: NodeId, w_ih: NodeId, w_hh: NodeId, b: NodeId, reverse: bool, cache: LstmCache },
    Dropout { x: NodeId, mask: Vec<f64> },
    Relu { x: NodeId },
    Tanh { x: NodeId },
    Softmax { x: NodeId },
    CrossEntropy { probs: NodeId, target: Tensor, weights: Option<Vec<f64>> },
    Concat { xs: Vec<NodeId>, axis: usize },
    Reshape { x: NodeId },
    Transpose { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Scale { x: NodeId, factor: f64 },
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
}

/// Ordered record of the operations of one forward pass.
///
/// Leaves may borrow their tensors (model parameters) for the lifetime `'a`.
#[derive(Debug, Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Adjoints of every node with respect to the scalar passed to
/// [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Adjoint of `node`; `None` when the node does not influence the output.
    pub fn get(&self, node: NodeId) -> Option<&Tensor> {
        self.adjoints[node.0].as_ref()
    }

    pub fn take(&mut self, node: NodeId) -> Option<Tensor> {
        self.adjoints[node.0].take()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Owned leaf (inputs, constants).
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Borrowed leaf (parameters).
    pub fn leaf(&mut self, value: &'a Tensor) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId, spec: ConvSpec) -> Result<NodeId> {
        let y = ops::conv1d(self.value(x), self.value(w), self.value(b), spec)?;
        Ok(self.push(y, Op::Conv1d { x, w, b, spec }))
    }

    pub fn maxpool1d(&mut self, x: NodeId, m: usize) -> Result<NodeId> {
        let (y, indices) = ops::maxpool1d_with_indices(self.value(x), m)?;
        Ok(self.push(y, Op::MaxPool { x, indices }))
    }

    pub fn repeat_axis(&mut self, x: NodeId, axis: usize, factor: usize) -> Result<NodeId> {
        let y = ops::repeat_axis(self.value(x), axis, factor)?;
        Ok(self.push(y, Op::Repeat { x, axis, factor }))
    }

    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let axis = self.value(x).rank() - 1;
        self.repeat_axis(x, axis, factor)
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = ops::dense(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Dense { x, w, b }))
    }

    pub fn lstm(&mut self, x: NodeId, w_ih: NodeId, w_hh: NodeId, b: NodeId, reverse: bool) -> Result<NodeId> {
        let (y, cache) = ops::lstm_forward(self.value(x), self.value(w_ih), self.value(w_hh), self.value(b), reverse)?;
        Ok(self.push(y, Op::Lstm { x, w_ih, w_hh, b, reverse, cache }))
    }

    /// Bidirectional LSTM from two independent parameter triples
    /// `(w_ih, w_hh, bias)` for the forward and backward directions.
    pub fn bilstm(
        &mut self,
        x: NodeId,
        forward: [NodeId; 3],
        backward: [NodeId; 3],
        merge: Merge,
    ) -> Result<NodeId> {
        let n = self.value(x).shape()[0];
        if n == 0 {
            return Err(Error::shape("bilstm over an empty sequence"));
        }
        let f = self.lstm(x, forward[0], forward[1], forward[2], false)?;
        let b = self.lstm(x, backward[0], backward[1], backward[2], true)?;
        match merge {
            Merge::Concat => self.concat(&[f, b], 1),
            Merge::Sum => self.add(f, b),
        }
    }

    pub fn dropout<R: Rng + ?Sized>(&mut self, x: NodeId, p: f64, rng: &mut R, training: bool) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::arg(format!("dropout probability must be in [0, 1), got {p}")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let mask = ops::dropout_mask(self.value(x).numel(), p, rng)?;
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let y = Tensor::new(xv.shape(), data)?;
        Ok(self.push(y, Op::Dropout { x, mask }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(|v| v.max(0.0));
        self.push(y, Op::Relu { x })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(f64::tanh);
        self.push(y, Op::Tanh { x })
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let y = ops::softmax(self.value(x))?;
        Ok(self.push(y, Op::Softmax { x }))
    }

    /// Scalar cross entropy; `weights` gives each row's weight (default `1/T`).
    pub fn cross_entropy(&mut self, probs: NodeId, target: Tensor, weights: Option<Vec<f64>>) -> Result<NodeId> {
        let loss = ops::cross_entropy_weighted(self.value(probs), &target, weights.as_deref())?;
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { probs, target, weights }))
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        let parts: Vec<&Tensor> = xs.iter().map(|&x| self.value(x)).collect();
        let y = ops::concat(&parts, axis)?;
        Ok(self.push(y, Op::Concat { xs: xs.to_vec(), axis }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let y = self.value(x).reshape(shape)?;
        Ok(self.push(y, Op::Reshape { x }))
    }

    pub fn transpose_last2(&mut self, x: NodeId) -> Result<NodeId> {
        let y = ops::transpose_last2(self.value(x))?;
        Ok(self.push(y, Op::Transpose { x }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(format!("add of {:?} and {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let y = Tensor::new(av.shape(), data)?;
        Ok(self.push(y, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let y = self.value(x).map(|v| v * factor);
        self.push(y, Op::Scale { x, factor })
    }

    /// Propagates adjoints from the scalar node `output` back to every node
    /// recorded before it. Only leaf adjoints are retained.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out = self.value(output);
        if out.numel() != 1 {
            return Err(Error::shape(format!("backward needs a scalar output, got {:?}", out.shape())));
        }
        out.check_finite("backward output")?;
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[output.0] = Some(Tensor::full(out.shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let Some(dy) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Op::Leaf = node.op {
                adj[idx] = Some(dy);
                continue;
            }
            let emit = |adj: &mut Vec<Option<Tensor>>, id: NodeId, g: Tensor| match &mut adj[id.0] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv1d { x, w, b, spec } => {
                    let (dx, dw, db) =
                        ops::conv1d_backward(self.value(*x), self.value(*w), self.value(*b), *spec, &dy)?;
                    emit(&mut adj, *x, dx);
                    emit(&mut adj, *w, dw);
                    emit(&mut adj, *b, db);
                }
                Op::MaxPool { x, indices } => {
                    let dx = ops::maxpool1d_backward(self.value(*x).shape(), indices, &dy);
                    emit(&mut adj, *x, dx);
                }
                Op::Repeat { x, axis, factor } => {
                    let dx = ops::repeat_axis_backward(self.value(*x).shape(), *axis, *factor, &dy);
                    emit(&mut adj, *x, dx);
                }
                Op::Dense { x, w, b } => {
                    let (dx, dw, db) = ops::dense_backward(self.value(*x), self.value(*w), self.value(*b), &dy)?;
                    emit(&mut adj, *x, dx);
                    emit(&mut adj, *w, dw);
                    emit(&mut adj, *b, db);
                }
                Op::Lstm { x, w_ih, w_hh, b, reverse, cache } => {
                    let (dx, dwi, dwh, db) = ops::lstm_backward(
                        self.value(*x),
                        self.value(*w_ih),
                        self.value(*w_hh),
                        self.value(*b),
                        *reverse,
                        cache,
                        &dy,
                    )?;
                    emit(&mut adj, *x, dx);
                    emit(&mut adj, *w_ih, dwi);
                    emit(&mut adj, *w_hh, dwh);
                    emit(&mut adj, *b, db);
                }
                Op::Dropout { x, mask } => {
                    let data = dy.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                    emit(&mut adj, *x, Tensor::new(dy.shape(), data)?);
                }
                Op::Relu { x } => {
                    let xv = self.value(*x);
                    let data = dy.data().iter().zip(xv.data()).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect();
                    emit(&mut adj, *x, Tensor::new(dy.shape(), data)?);
                }
                Op::Tanh { x: xi } => {
                    let data = dy.data().iter().zip(node.value.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                    emit(&mut adj, *xi, Tensor::new(dy.shape(), data)?);
                }
                Op::Softmax { x } => {
                    emit(&mut adj, *x, ops::softmax_backward(&node.value, &dy));
                }
                Op::CrossEntropy { probs, target, weights } => {
                    let dp = ops::cross_entropy_backward(self.value(*probs), target, weights.as_deref(), dy.item());
                    emit(&mut adj, *probs, dp);
                }
                Op::Concat { xs, axis } => {
                    let shapes: Vec<Vec<usize>> = xs.iter().map(|&x| self.value(x).shape().to_vec()).collect();
                    for (x, g) in xs.iter().zip(ops::concat_backward(&shapes, *axis, &dy)) {
                        emit(&mut adj, *x, g);
                    }
                }
                Op::Reshape { x } => {
                    emit(&mut adj, *x, dy.into_shape(self.value(*x).shape())?);
                }
                Op::Transpose { x } => {
                    emit(&mut adj, *x, ops::transpose_last2(&dy)?);
                }
                Op::Add { a, b } => {
                    emit(&mut adj, *a, dy.clone());
                    emit(&mut adj, *b, dy);
                }
                Op::Scale { x, factor } => {
                    emit(&mut adj, *x, dy.map(|g| g * factor));
                }
            }
        }
        Ok(Gradients { adjoints: adj })
    }
}
