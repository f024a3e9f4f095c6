//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive in execution order. Because inputs are
//! always created before the ops that consume them, the tape is topologically
//! sorted by construction and [`Graph::backward`] is a single reverse sweep.

mod gradcheck;
mod ops;

use std::cell::{Cell, Ref, RefCell};

pub use gradcheck::{
    compare_with_finite_differences, grad_check, grad_check_many, rel_err, GradCheckReport, Probe,
    REL_ERR_FLOOR,
};
pub use ops::{gelu_scalar, normal_cdf, LAYER_NORM_EPS};

use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

pub type NodeId = usize;

/// Geometry of a same-padded, stride-1 2-D convolution over `[B, C, H, W]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddRow(NodeId, NodeId),
    AddConst(NodeId),
    MulConst(NodeId, Tensor),
    Gelu { x: NodeId, exact: bool },
    Relu(NodeId),
    Tanh(NodeId),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding { table: NodeId, ids: Vec<usize> },
    SliceCols { x: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    SliceRows { x: NodeId, start: usize },
    ConcatRows(Vec<NodeId>),
    Sum(NodeId),
    SoftCrossEntropy {
        logits: NodeId,
        targets: Tensor,
        probs: Vec<f64>,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        geom: ConvGeom,
    },
    MaxPool2d { x: NodeId, argmax: Vec<usize> },
    ChannelsToRows {
        x: NodeId,
        dims: [usize; 4],
    },
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

/// The recorded computation. One graph per forward pass; drop it to free
/// every intermediate.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    precision: Precision,
    backward_done: Cell<bool>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    id: NodeId,
    graph: &'g Graph,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.graph.nodes.borrow()[self.id].value)
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new(Precision::Verification)
    }
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            precision,
            backward_done: Cell::new(false),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf node. Tracked leaves receive gradients in [`Graph::backward`].
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push_unchecked(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn var(&self, id: NodeId) -> Var<'_> {
        assert!(id < self.len(), "node {id} out of range");
        Var { id, graph: self }
    }

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node>> {
        self.nodes.borrow()
    }

    pub(crate) fn value_of(&self, id: NodeId) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn tracked(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn push_unchecked(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            id: nodes.len() - 1,
            graph: self,
        }
    }

    pub(crate) fn push(
        &self,
        name: &'static str,
        value: Tensor,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var<'_>> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    /// Clears the backward-done flag so that `backward` may run again.
    pub fn reset_backward(&self) {
        self.backward_done.set(false);
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.graph, self) {
            return Err(Error::Backward("loss belongs to a different graph"));
        }
        if self.backward_done.get() {
            return Err(Error::Backward("backward already ran on this graph; reset first"));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Backward("loss is not a scalar"));
        }
        if !root.requires_grad {
            return Err(Error::Backward("loss is detached from every tracked leaf"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            ops::backward_node(&nodes, node, &g, &mut grads);
        }
        self.backward_done.set(true);
        let shapes = nodes[..=loss.id]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        let leaves = nodes[..=loss.id]
            .iter()
            .map(|n| matches!(n.op, Op::Leaf) && n.requires_grad)
            .collect::<Vec<_>>();
        let grads = grads
            .into_iter()
            .zip(leaves)
            .map(|(g, is_leaf)| if is_leaf { g } else { None })
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Gradients of tracked leaves produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// dLoss/dLeaf. Tracked leaves the loss does not depend on get zeros;
    /// untracked nodes and interior nodes get `None`.
    pub fn get(&self, v: Var<'_>) -> Option<Tensor> {
        self.get_id(v.id, v.graph)
    }

    pub(crate) fn get_id(&self, id: NodeId, graph: &Graph) -> Option<Tensor> {
        match self.grads.get(id) {
            Some(Some(g)) => Some(Tensor::from_parts(self.shapes[id].clone(), g.clone())),
            _ if graph.tracked(id) && matches!(graph.nodes()[id].op, Op::Leaf) => {
                Some(Tensor::zeros(graph.nodes()[id].value.shape()))
            }
            _ => None,
        }
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Tensor {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.rows()
    }

    pub fn cols(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.cols()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.tracked(self.id)
    }
}
