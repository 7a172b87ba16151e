//! Tape-based reverse-mode automatic differentiation.
//!
//! Every forward op appends a [`Node`] to the [`Graph`] holding its output
//! value and whatever it needs for the backward pass. Nodes are only ever
//! appended, so the tape is topologically ordered by construction and
//! [`Graph::backward`] is a single reverse sweep that visits each node once.

mod backward;
mod conv;
mod ops;
mod select;

pub use conv::conv2d_output_size;
pub use ops::{gelu, sigmoid};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type CustomBackward = Box<dyn Fn(&Tensor, &Tensor) -> Tensor>;

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Gelu(Var),
    Log(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MatMul(Var, Var),
    Bmm(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    TopKSum {
        x: Var,
        k: usize,
        selected: Vec<usize>,
    },
    TopKMask {
        x: Var,
        keep: Vec<bool>,
    },
    SteBinarize(Var),
    Custom {
        x: Var,
        backward: CustomBackward,
    },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sigmoid(..) => "sigmoid",
            Op::Gelu(..) => "gelu",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Clamp(..) => "clamp",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::MatMul(..) => "matmul",
            Op::Bmm(..) => "bmm",
            Op::Permute(..) => "permute",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::TopKSum { .. } => "topk_sum",
            Op::TopKMask { .. } => "topk_mask",
            Op::SteBinarize(..) => "ste_binarize",
            Op::Custom { .. } => "custom",
        }
    }
}

/// Names of the ops that have a backward rule.
pub const OP_NAMES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "sigmoid",
    "gelu",
    "log",
    "exp",
    "clamp",
    "sum",
    "mean",
    "sum_axis",
    "softmax",
    "layer_norm",
    "matmul",
    "bmm",
    "permute",
    "reshape",
    "concat",
    "narrow",
    "conv2d",
    "max_pool2d",
    "topk_sum",
    "topk_mask",
    "ste_binarize",
];

thread_local! {
    static FAULT: std::cell::RefCell<Option<String>> = const { std::cell::RefCell::new(None) };
}

/// Test fixture: corrupts the upstream gradient of every node named `op`
/// during [`Graph::backward`] on this thread. `None` clears it.
#[doc(hidden)]
pub fn inject_backward_fault(op: Option<&str>) {
    FAULT.with(|f| *f.borrow_mut() = op.map(str::to_string));
}

fn faulty(op: &Op) -> bool {
    FAULT.with(|f| f.borrow().as_deref() == Some(op.name()))
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// A recorded computation.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    params: Vec<(Var, ParamId)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    /// Leaf that receives gradient (inputs under a gradient check, say).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, true)
    }

    /// Leaf bound to a stored parameter. Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let v = self.push_leaf(p.value.clone(), !p.frozen);
        self.params.push((v, id));
        v
    }

    /// Copy of `x`'s value with no path back to `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, name: &str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {name}")));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[i].take() else { continue };
            if faulty(&node.op) {
                g = g.map(|v| v * 1.1 + 1e-3);
            }
            self.backward_node(i, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    pub(crate) fn param_leaves(&self) -> &[(Var, ParamId)] {
        &self.params
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to leaf `v`, if any flowed there.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds every parameter-leaf gradient into the store's accumulators.
    pub fn accumulate_into(&self, graph: &Graph, store: &mut ParamStore) {
        for &(v, id) in graph.param_leaves() {
            if let Some(g) = self.get(v) {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }
}

pub(crate) fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
