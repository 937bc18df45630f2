//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! The graph is a DAG of reference-counted nodes built eagerly by the op
//! constructors. Node ids are allocated monotonically, so creation order is a
//! valid topological order and `backward` just walks reachable nodes in
//! descending id. Everything is single-threaded and deterministic; distinct
//! graphs on distinct threads do not share state.

mod conv;
mod ops;

pub use conv::{col2im, conv_out_size, im2col};

use std::cell::{Cell, RefCell};
use std::rc::Rc;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static MAC_COUNTER: Cell<Option<u128>> = const { Cell::new(None) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Runs `f` with gradient tracking disabled; op outputs become plain leaves.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|c| c.replace(false));
    let out = f();
    GRAD_ENABLED.with(|c| c.set(prev));
    out
}

/// Multiply-accumulate instrumentation. While enabled, every matmul-like
/// forward op (matmul, bmm, conv, transposed conv) adds its exact MAC count.
pub mod macs {
    use super::MAC_COUNTER;

    pub fn start() {
        MAC_COUNTER.with(|c| c.set(Some(0)));
    }

    pub fn stop() -> u128 {
        MAC_COUNTER.with(|c| c.replace(None)).unwrap_or(0)
    }

    pub(crate) fn add(n: u128) {
        MAC_COUNTER.with(|c| {
            if let Some(v) = c.get() {
                c.set(Some(v + n));
            }
        });
    }
}

pub(crate) enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    AddScalar(Tensor),
    MulScalar(Tensor, f64),
    /// `[..., d] + [d]`, bias broadcast over leading dims.
    AddBiasLast(Tensor, Tensor),
    /// `[B, d, m] + [B, d]`, bias broadcast over the trailing axis.
    AddColBias(Tensor, Tensor),
    /// `[B, d, m] * [B, d]`, factor broadcast over the trailing axis.
    MulColBias(Tensor, Tensor),
    /// `[B, m, n] + [h, m, n]` with `B % h == 0`; batch b uses slice `b % h`.
    AddBatchBias(Tensor, Tensor),
    /// `a: [..., k] (folded to [m, k])`, `b: [k, n]`.
    Matmul(Tensor, Tensor),
    /// `a: [B, m, k]`, `b: [B, k, n]`.
    Bmm(Tensor, Tensor),
    /// `a: [B, m, k]`, `b: [B, n, k]` (b transposed).
    BmmNT(Tensor, Tensor),
    SoftmaxLast(Tensor),
    LayerNorm {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        /// per-row (mean, rstd) from the forward pass
        stats: Vec<(f64, f64)>,
    },
    Gelu(Tensor),
    Tanh(Tensor),
    Softplus(Tensor),
    Sigmoid(Tensor),
    /// `-log2(max(p, floor))`
    NegLog2 { p: Tensor, floor: f64 },
    /// Discretized Gaussian bin probability `Phi((r+0.5)/s) - Phi((r-0.5)/s)`.
    GaussianBin { resid: Tensor, sigma: Tensor },
    Concat { parts: Vec<Tensor>, axis: usize },
    /// `out[i] = src[idx[i]]`; adjoint is scatter-add.
    Gather { src: Tensor, idx: Rc<Vec<u32>> },
    Conv2d {
        x: Tensor,
        w: Tensor,
        b: Tensor,
        stride: usize,
        pad: usize,
    },
    ConvT2d {
        x: Tensor,
        w: Tensor,
        b: Tensor,
        stride: usize,
    },
    SumAll(Tensor),
    MeanAll(Tensor),
    Reshape(Tensor),
}

pub(crate) struct Node {
    pub id: u64,
    pub shape: Vec<usize>,
    pub data: RefCell<Vec<f64>>,
    pub grad: RefCell<Option<Vec<f64>>>,
    pub needs_grad: bool,
    pub op: Op,
}

/// Shared handle to a graph node. Cloning is cheap and aliases the node.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) n: Rc<Node>,
}

impl Tensor {
    fn new_node(shape: Vec<usize>, data: Vec<f64>, needs_grad: bool, op: Op) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            n: Rc::new(Node {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                needs_grad,
                op,
            }),
        }
    }

    /// Constant leaf; never receives gradient.
    pub fn leaf(shape: &[usize], data: Vec<f64>) -> Tensor {
        Self::new_node(shape.to_vec(), data, false, Op::Leaf)
    }

    /// Trainable leaf; `backward` accumulates into its grad buffer.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Tensor {
        Self::new_node(shape.to_vec(), data, true, Op::Leaf)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::leaf(shape, vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Self::leaf(shape, vec![v; shape.iter().product()])
    }

    pub fn scalar(v: f64) -> Tensor {
        Self::leaf(&[1], vec![v])
    }

    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Tensor {
        let needs = grad_enabled() && op_parents(&op).iter().any(|p| p.n.needs_grad);
        if needs {
            Self::new_node(shape, data, true, op)
        } else {
            // Drop parent references so intermediate buffers can be freed.
            Self::new_node(shape, data, false, Op::Leaf)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.n.shape
    }

    pub fn numel(&self) -> usize {
        self.n.shape.iter().product()
    }

    pub fn data(&self) -> std::cell::Ref<'_, Vec<f64>> {
        self.n.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.n.data.borrow().clone()
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.n.data.borrow()[0]
    }

    /// Overwrites the stored values in place (leaves only: optimizer steps,
    /// finite-difference probes). Shape must match.
    pub fn set_data(&self, v: &[f64]) {
        let mut d = self.n.data.borrow_mut();
        assert_eq!(d.len(), v.len(), "set_data length mismatch");
        d.copy_from_slice(v);
    }

    pub fn map_data(&self, f: impl FnMut(&mut f64)) {
        self.n.data.borrow_mut().iter_mut().for_each(f);
    }

    pub fn requires_grad(&self) -> bool {
        self.n.needs_grad && matches!(self.n.op, Op::Leaf)
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.n.grad.borrow().clone()
    }

    pub fn take_grad(&self) -> Option<Vec<f64>> {
        self.n.grad.borrow_mut().take()
    }

    pub fn zero_grad(&self) {
        *self.n.grad.borrow_mut() = None;
    }

    /// Detached copy: same values, no history.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(&self.n.shape, self.to_vec())
    }

    fn ensure_grad(&self) {
        let mut g = self.n.grad.borrow_mut();
        if g.is_none() {
            *g = Some(vec![0.0; self.numel()]);
        }
    }

    pub(crate) fn add_to_grad(&self, delta: &[f64]) {
        self.ensure_grad();
        let mut g = self.n.grad.borrow_mut();
        let g = g.as_mut().unwrap();
        debug_assert_eq!(g.len(), delta.len());
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    /// Reverse-mode sweep from a scalar output. Accumulates gradients into
    /// every reachable node with `needs_grad`.
    pub fn backward(&self) {
        assert_eq!(self.numel(), 1, "backward requires a scalar output");
        if !self.n.needs_grad {
            return;
        }
        // Gather reachable grad-needing nodes; creation ids give topo order.
        let mut seen = std::collections::HashSet::new();
        let mut order: Vec<Rc<Node>> = Vec::new();
        let mut stack = vec![self.n.clone()];
        while let Some(node) = stack.pop() {
            if !node.needs_grad || !seen.insert(node.id) {
                continue;
            }
            for p in op_parents(&node.op) {
                stack.push(p.n.clone());
            }
            order.push(node);
        }
        order.sort_by(|a, b| b.id.cmp(&a.id));
        *self.n.grad.borrow_mut() = Some(vec![1.0]);
        for node in &order {
            let has_grad = node.grad.borrow().is_some();
            if has_grad {
                ops::backward_step(node);
            }
        }
    }
}

fn op_parents(op: &Op) -> Vec<&Tensor> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::AddBiasLast(a, b)
        | Op::AddColBias(a, b)
        | Op::MulColBias(a, b)
        | Op::AddBatchBias(a, b)
        | Op::Matmul(a, b)
        | Op::Bmm(a, b)
        | Op::BmmNT(a, b) => vec![a, b],
        Op::AddScalar(a)
        | Op::MulScalar(a, _)
        | Op::SoftmaxLast(a)
        | Op::Gelu(a)
        | Op::Tanh(a)
        | Op::Softplus(a)
        | Op::Sigmoid(a)
        | Op::SumAll(a)
        | Op::MeanAll(a)
        | Op::Reshape(a) => vec![a],
        Op::NegLog2 { p, .. } => vec![p],
        Op::GaussianBin { resid, sigma } => vec![resid, sigma],
        Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
        Op::Concat { parts, .. } => parts.iter().collect(),
        Op::Gather { src, .. } => vec![src],
        Op::Conv2d { x, w, b, .. } => vec![x, w, b],
        Op::ConvT2d { x, w, b, .. } => vec![x, w, b],
    }
}

/// Standard normal CDF, evaluated through `erfc` for stable tails.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Standard normal density.
pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}
