//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Values are stored row-major on a shared tape. Ops registered while the
//! tape is recording build a DAG that [`Tensor::backward`] replays in
//! reverse topological order (the append order of the tape). Gradients are
//! accumulated deterministically: the same tape always produces
//! bit-identical gradients.

pub mod gradcheck;
pub mod linalg;

mod gaussian;
mod ops;

#[cfg(test)]
mod tests;

pub use gaussian::{gaussian_kld, gaussian_kld_value};

/// Per-channel biased batch statistics (mean, variance) of a (B, C) or
/// (B, C, H, W) tensor.
pub fn batch_statistics_of(t: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    t.tape
        .with_node(t.id, |n| ops::batch_statistics(&n.values, &n.shape))
}

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

pub type NodeId = usize;

/// Default jitter added to covariance diagonals before factorization.
pub const COV_JITTER: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TapeMode {
    Recording,
    Frozen,
}

/// Reduction extent for `mean` / `sum`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    /// Everything to a scalar.
    All,
    /// Over axis 0 of a 2-D tensor: (R, C) -> (C,).
    Rows,
    /// Over the spatial axes of a 4-D tensor: (B, C, H, W) -> (B, C).
    Spatial,
}

#[derive(Clone, Debug)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Matmul { ta: bool, tb: bool },
    Conv2d { stride: usize, padding: usize },
    Relu,
    Softmax,
    Log,
    Exp,
    Mean(Reduce),
    Sum(Reduce),
    Reshape { shape: Vec<usize> },
    Slice { axis: usize, start: usize, len: usize },
    Clamp { lo: Option<f64>, hi: Option<f64> },
    BatchNormTrain { eps: f64 },
    BatchNormEval { eps: f64 },
    GaussianKld { jitter: f64 },
}

pub(crate) struct OpRecord {
    pub kind: OpKind,
    pub parents: Vec<NodeId>,
    pub saved: Vec<Vec<f64>>,
}

pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
    pub op: Option<OpRecord>,
}

struct TapeInner {
    nodes: Vec<Node>,
    mode: TapeMode,
    strict: bool,
}

/// Shared recording tape. Cloning is cheap (reference counted).
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                mode: TapeMode::Recording,
                strict: false,
            })),
        }
    }

    /// A tape that rejects non-finite op inputs with `Error::Numerics`.
    pub fn strict() -> Self {
        let t = Self::new();
        t.inner.borrow_mut().strict = true;
        t
    }

    pub fn set_mode(&self, mode: TapeMode) {
        self.inner.borrow_mut().mode = mode;
    }

    pub fn mode(&self) -> TapeMode {
        self.inner.borrow().mode
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Register a leaf node.
    pub fn leaf(&self, values: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if values.len() != numel {
            return Err(Error::Shape {
                op: "leaf",
                left: vec![values.len()],
                right: shape,
            });
        }
        let mut inner = self.inner.borrow_mut();
        let requires_grad = requires_grad && inner.mode == TapeMode::Recording;
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            shape,
            values,
            grad: None,
            requires_grad,
            op: None,
        });
        Ok(Tensor {
            tape: self.clone(),
            id,
        })
    }

    pub fn constant(&self, values: Vec<f64>, shape: Vec<usize>) -> Result<Tensor> {
        self.leaf(values, shape, false)
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.leaf(vec![v], vec![1], false).expect("scalar leaf")
    }

    /// Generic op dispatcher. Validates shapes, computes the forward value,
    /// and registers a tape edge when recording and some input needs grad.
    pub fn forward_op(&self, kind: OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
        for t in inputs {
            if !self.same_tape(&t.tape) {
                return Err(Error::Contract(
                    "op inputs must live on the same tape".into(),
                ));
            }
        }
        let mut inner = self.inner.borrow_mut();
        if inner.strict {
            for t in inputs {
                if inner.nodes[t.id].values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numerics(format!(
                        "non-finite input to {kind:?} (node {})",
                        t.id
                    )));
                }
            }
        }
        let out = {
            let views: Vec<(&[f64], &[usize])> = inputs
                .iter()
                .map(|t| {
                    let n = &inner.nodes[t.id];
                    (n.values.as_slice(), n.shape.as_slice())
                })
                .collect();
            ops::forward(&kind, &views)?
        };
        let recording = inner.mode == TapeMode::Recording;
        let requires_grad = recording && inputs.iter().any(|t| inner.nodes[t.id].requires_grad);
        let op = if requires_grad {
            Some(OpRecord {
                kind,
                parents: inputs.iter().map(|t| t.id).collect(),
                saved: out.saved,
            })
        } else {
            None
        };
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            shape: out.shape,
            values: out.values,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Tensor {
            tape: self.clone(),
            id,
        })
    }

    /// Reverse pass from a scalar root. Every `requires_grad` node at or
    /// below the root receives a gradient buffer; unreachable ones stay zero.
    pub fn backward(&self, root: &Tensor) -> Result<()> {
        if !self.same_tape(&root.tape) {
            return Err(Error::Contract("backward root is on a different tape".into()));
        }
        let mut inner = self.inner.borrow_mut();
        if inner.mode != TapeMode::Recording {
            return Err(Error::Contract("backward requires a recording tape".into()));
        }
        if inner.nodes[root.id].values.len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                inner.nodes[root.id].shape
            )));
        }
        for node in inner.nodes.iter_mut() {
            if node.requires_grad {
                node.grad = Some(vec![0.0; node.values.len()]);
            } else {
                node.grad = None;
            }
        }
        if let Some(g) = inner.nodes[root.id].grad.as_mut() {
            g[0] = 1.0;
        }
        for id in (0..=root.id).rev() {
            let contributions = {
                let node = &inner.nodes[id];
                if !node.requires_grad || node.op.is_none() {
                    continue;
                }
                let out_grad = node.grad.as_ref().expect("grad allocated");
                let op = node.op.as_ref().expect("op record");
                ops::backward(op, node, &inner.nodes, out_grad)?
            };
            for (pid, contrib) in contributions {
                if let Some(g) = inner.nodes[pid].grad.as_mut() {
                    for (gi, ci) in g.iter_mut().zip(contrib.iter()) {
                        *gi += ci;
                    }
                }
            }
        }
        Ok(())
    }

    pub(crate) fn with_node<R>(&self, id: NodeId, f: impl FnOnce(&Node) -> R) -> R {
        f(&self.inner.borrow().nodes[id])
    }
}

/// Handle to one node on a tape.
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    id: NodeId,
}

impl Tensor {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_node(self.id, |n| n.shape.clone())
    }

    pub fn values(&self) -> Vec<f64> {
        self.tape.with_node(self.id, |n| n.values.clone())
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.tape.with_node(self.id, |n| {
            debug_assert_eq!(n.values.len(), 1);
            n.values[0]
        })
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.with_node(self.id, |n| n.requires_grad)
    }

    /// Gradient after a backward pass. Zeros for unreachable grad leaves,
    /// `None` for nodes that never required grad.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.with_node(self.id, |n| n.grad.clone())
    }

    pub fn backward(&self) -> Result<()> {
        self.tape.backward(self)
    }

    fn op1(&self, kind: OpKind) -> Result<Tensor> {
        self.tape.forward_op(kind, &[self])
    }

    fn op2(&self, kind: OpKind, rhs: &Tensor) -> Result<Tensor> {
        self.tape.forward_op(kind, &[self, rhs])
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.op2(OpKind::Add, rhs)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.op2(OpKind::Sub, rhs)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.op2(OpKind::Mul, rhs)
    }

    pub fn matmul(&self, rhs: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
        self.op2(OpKind::Matmul { ta, tb }, rhs)
    }

    pub fn conv2d(&self, weight: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        self.tape
            .forward_op(OpKind::Conv2d { stride, padding }, &[self, weight, bias])
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.op1(OpKind::Relu)
    }

    pub fn softmax(&self) -> Result<Tensor> {
        self.op1(OpKind::Softmax)
    }

    pub fn log(&self) -> Result<Tensor> {
        self.op1(OpKind::Log)
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.op1(OpKind::Exp)
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        self.op1(OpKind::Mean(Reduce::All))
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        self.op1(OpKind::Sum(Reduce::All))
    }

    pub fn mean_rows(&self) -> Result<Tensor> {
        self.op1(OpKind::Mean(Reduce::Rows))
    }

    pub fn mean_spatial(&self) -> Result<Tensor> {
        self.op1(OpKind::Mean(Reduce::Spatial))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        self.op1(OpKind::Reshape {
            shape: shape.to_vec(),
        })
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        self.op1(OpKind::Slice { axis, start, len })
    }

    pub fn clamp(&self, lo: Option<f64>, hi: Option<f64>) -> Result<Tensor> {
        self.op1(OpKind::Clamp { lo, hi })
    }

    pub fn clamp_min(&self, lo: f64) -> Result<Tensor> {
        self.clamp(Some(lo), None)
    }

    pub fn batch_norm_train(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        self.tape
            .forward_op(OpKind::BatchNormTrain { eps }, &[self, gamma, beta])
    }

    pub fn batch_norm_eval(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        mean: &Tensor,
        var: &Tensor,
        eps: f64,
    ) -> Result<Tensor> {
        self.tape.forward_op(
            OpKind::BatchNormEval { eps },
            &[self, gamma, beta, mean, var],
        )
    }

    /// Multiply by a plain scalar constant.
    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let s = self.tape.scalar(c);
        self.mul(&s)
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        let s = self.tape.scalar(c);
        self.add(&s)
    }
}
