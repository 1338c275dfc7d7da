//! Dense float64 tensors with reverse-mode automatic differentiation.
//!
//! Operations applied to graph-attached tensors are recorded on an
//! append-only tape. The backward pass emits its own tape nodes, so a
//! gradient computed with `create_graph = true` can be differentiated
//! again (double backprop), which the gradient-matching attack relies on.

mod adam;
mod autodiff;
mod finite_diff;
mod ops;

pub use adam::{adam_step, AdamState};
pub use autodiff::backward;
pub use finite_diff::finite_difference_grad;
pub use ops::{op_forward, OpKind};

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

pub type NodeId = usize;

/// Operation record on the tape. Public kinds mirror [`OpKind`]; the rest
/// are emitted internally by the backward pass.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    MatMul,
    Add,
    AddBias,
    Sub,
    MulElementwise,
    ScalarMul(f64),
    Relu,
    Sigmoid,
    Reshape,
    Sum,
    Mean,
    Log,
    Exp,
    MaxReduce,
    Softmax,
    LogSoftmax,
    Clamp { lo: f64, hi: f64 },
    // internal
    Transpose,
    Recip,
    Sqrt,
    SumLastKeep,
    BroadcastLast,
    SumAxis0,
    BroadcastRows,
    BroadcastScalar,
    /// Elementwise multiply by a constant mask (relu/clamp/max subgradients).
    MaskMul(Rc<Vec<f64>>),
}

pub(crate) struct Node {
    pub op: Op,
    pub parents: Vec<NodeId>,
    pub shape: Vec<usize>,
    pub value: Rc<Vec<f64>>,
}

#[derive(Default)]
pub(crate) struct GraphInner {
    pub nodes: Vec<Node>,
}

/// Shared handle to a computation tape. Cheap to clone.
#[derive(Clone, Default)]
pub struct Graph(pub(crate) Rc<RefCell<GraphInner>>);

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.0.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(&self, node: Node) -> NodeId {
        let mut inner = self.0.borrow_mut();
        inner.nodes.push(node);
        inner.nodes.len() - 1
    }

    pub(crate) fn same_graph(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Attach `data` as a differentiable leaf variable.
    pub fn var(&self, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data length mismatch"
        );
        let value = Rc::new(data);
        let id = self.push(Node {
            op: Op::Leaf,
            parents: vec![],
            shape: shape.clone(),
            value: Rc::clone(&value),
        });
        Tensor {
            shape,
            data: value,
            node: Some((self.clone(), id)),
        }
    }

    /// Attach a detached tensor as a leaf of this graph.
    pub fn attach(&self, t: &Tensor) -> Tensor {
        self.var(t.shape.clone(), t.data.as_ref().clone())
    }

    pub(crate) fn tensor_of(&self, id: NodeId) -> Tensor {
        let inner = self.0.borrow();
        let node = &inner.nodes[id];
        Tensor {
            shape: node.shape.clone(),
            data: Rc::clone(&node.value),
            node: Some((self.clone(), id)),
        }
    }
}

/// Dense row-major float64 tensor, optionally attached to a [`Graph`].
#[derive(Clone)]
pub struct Tensor {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Rc<Vec<f64>>,
    pub(crate) node: Option<(Graph, NodeId)>,
}

impl Tensor {
    /// New detached tensor.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data length mismatch"
        );
        Tensor {
            shape,
            data: Rc::new(data),
            node: None,
        }
    }

    pub fn scalar_value(v: f64) -> Self {
        Tensor::new(vec![1], vec![v])
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor::new(shape, vec![0.0; len])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_attached(&self) -> bool {
        self.node.is_some()
    }

    pub(crate) fn node_in(&self, graph: &Graph) -> Result<NodeId> {
        match &self.node {
            Some((g, id)) if g.same_graph(graph) => Ok(*id),
            Some(_) => Err(Error::UnreachableTensor),
            None => Err(Error::DetachedTensor),
        }
    }

    /// Copy of this tensor with no graph handle.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            node: None,
        }
    }

    /// Scalar contents of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::RankError {
                op: "item",
                expected: "scalar (one element)",
                actual: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    /// Mutable access to the underlying buffer; only valid for detached
    /// tensors (attached values are shared with the tape).
    pub fn data_mut(&mut self) -> &mut Vec<f64> {
        assert!(self.node.is_none(), "cannot mutate a graph-attached tensor");
        Rc::make_mut(&mut self.data)
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .field("attached", &self.node.is_some())
            .finish()
    }
}
