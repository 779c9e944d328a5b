//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles in
//! execution order, so each node only ever references earlier nodes.
//! [`Tape::backward`] walks the list once in reverse and accumulates
//! vector-Jacobian products. A tape is meant to live for one minibatch.
//!
//! Elementwise binary operations accept equal shapes or a shape that is a
//! suffix of the other operand (repetition over leading batch axes). Every
//! other shape coercion goes through [`Var::broadcast_to`] or
//! [`Var::reshape`].

use std::cell::{Cell, Ref, RefCell};

use crate::error::TensorError;
use crate::tensor::Tensor;

pub type NodeId = usize;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Operation kinds understood by [`Tape::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Relu,
    /// Exponential linear unit with `alpha = 1`.
    Elu,
    Sigmoid,
    Softplus,
    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    Clamp {
        lo: f64,
        hi: f64,
    },
    Scale(f64),
    Offset(f64),
    /// Sum of all entries, producing a scalar.
    Sum,
    /// Mean of all entries, producing a scalar.
    Mean,
    /// Sum over the last axis.
    SumLast,
    /// Log-sum-exp over the last axis.
    LogSumExp,
    /// Concatenation along the last axis.
    Concat,
    /// Half-open range `[start, end)` of the last axis.
    Slice {
        start: usize,
        end: usize,
    },
    /// Numpy-style expansion to the given shape (size-1 and missing leading axes repeat).
    Broadcast(Vec<usize>),
    Reshape(Vec<usize>),
    /// `log N(z_b; mean_k, L_k L_k^T)` for every row `b` and component `k`.
    ///
    /// Inputs: `z (B, D)`, `mean (K, D)`, `diag (K, D)` with positive entries
    /// holding the Cholesky diagonal, and optionally `lower (K, D, D)` whose
    /// strictly lower triangle holds the off-diagonal Cholesky entries.
    /// Output shape `(B, K)`.
    GaussianLogDensity,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Relu => "relu",
            Op::Elu => "elu",
            Op::Sigmoid => "sigmoid",
            Op::Softplus => "softplus",
            Op::Clamp { .. } => "clamp",
            Op::Scale(_) => "scale",
            Op::Offset(_) => "offset",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumLast => "sum_last",
            Op::LogSumExp => "logsumexp",
            Op::Concat => "concat",
            Op::Slice { .. } => "slice",
            Op::Broadcast(_) => "broadcast",
            Op::Reshape(_) => "reshape",
            Op::GaussianLogDensity => "gaussian_log_density",
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    saved: Vec<f64>,
    requires_grad: bool,
}

/// Append-only record of operations.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    frozen: Cell<bool>,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.by_id(var.id)
    }

    pub fn by_id(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    /// Gradient for `var`, or zeros of its shape when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            frozen: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.get()
    }

    /// Drops every node and unfreezes the tape. Outstanding `Var`s become stale.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
        self.frozen.set(false);
    }

    /// Registers a differentiable leaf.
    pub fn param(&self, value: Tensor) -> Result<Var<'_>, TensorError> {
        self.leaf(value, true)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Result<Var<'_>, TensorError> {
        self.leaf(value, false)
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Result<Var<'_>, TensorError> {
        if self.frozen.get() {
            return Err(TensorError::Frozen);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            saved: Vec::new(),
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn owns(&self, var: &Var<'_>) -> bool {
        std::ptr::eq(self, var.tape) && var.id < self.nodes.borrow().len()
    }

    /// Records `op` applied to `inputs` and returns the output handle.
    pub fn apply<'t>(&'t self, op: Op, inputs: &[Var<'t>]) -> Result<Var<'t>, TensorError> {
        if self.frozen.get() {
            return Err(TensorError::Frozen);
        }
        if inputs.iter().any(|v| !self.owns(v)) {
            return Err(TensorError::Detached);
        }
        if op == Op::Leaf {
            return Err(TensorError::InvalidArgument {
                op: "leaf",
                msg: "use Tape::param or Tape::constant".into(),
            });
        }
        let (value, saved, requires_grad) = {
            let nodes = self.nodes.borrow();
            let values: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.id].value).collect();
            let (value, saved) = forward(&op, &values)?;
            (
                value,
                saved,
                inputs.iter().any(|v| nodes[v.id].requires_grad),
            )
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            inputs: inputs.iter().map(|v| v.id).collect(),
            value,
            saved,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Concatenates along the last axis.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>, TensorError> {
        self.apply(Op::Concat, parts)
    }

    /// Reverse sweep from a scalar `loss`. Freezes the tape.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, TensorError> {
        if !self.owns(&loss) {
            return Err(TensorError::Detached);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 || root.value.rank() > 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        self.frozen.set(true);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad && node.op != Op::Leaf {
                let needs: Vec<bool> = node
                    .inputs
                    .iter()
                    .map(|&i| nodes[i].requires_grad)
                    .collect();
                let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &nodes[i].value).collect();
                let input_grads = vjp(node, &inputs, &g, &needs);
                for (slot, ig) in node.inputs.iter().zip(input_grads) {
                    if let Some(ig) = ig {
                        match &mut grads[*slot] {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                            empty => *empty = Some(ig),
                        }
                    }
                }
            }
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Borrow of the forward value.
    pub fn value_ref(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn value(&self) -> Tensor {
        self.value_ref().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value_ref().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value_ref().item()
    }

    fn unary(self, op: Op) -> Result<Var<'t>, TensorError> {
        self.tape.apply(op, &[self])
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.tape.apply(Op::MatMul, &[self, rhs])
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.tape.apply(Op::Add, &[self, rhs])
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.tape.apply(Op::Sub, &[self, rhs])
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.tape.apply(Op::Mul, &[self, rhs])
    }

    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.tape.apply(Op::Div, &[self, rhs])
    }

    pub fn exp(self) -> Result<Var<'t>, TensorError> {
        self.unary(Op::Exp)
    }

    pub fn ln(self) -> Result<Var<'t>, TensorError> {
        self.unary(Op::Log)
    }

    pub fn relu(self) -> Result<Var<'t>, TensorError> {
        self.unary(Op::Relu)
    }

    pub fn elu(self) -> Result<Var<'t>, TensorError> {
        self.unary(Op::Elu)
    }

    pub fn sigmoid(self) -> Result<Var<'t>, TensorError> {
        self.unary(Op::Sigmoid)
    }

    pub fn softplus(self) -> Result<Var<'t>, TensorError> {
        self.unary(Op::Softplus)
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'t>, TensorError> {
        self.unary(Op::Clamp { lo, hi })
    }

    pub fn scale(self, factor: f64) -> Result<Var<'t>, TensorError> {
        self.unary(Op::Scale(factor))
    }

    pub fn offset(self, shift: f64) -> Result<Var<'t>, TensorError> {
        self.unary(Op::Offset(shift))
    }

    pub fn neg(self) -> Result<Var<'t>, TensorError> {
        self.unary(Op::Scale(-1.0))
    }

    pub fn sum(self) -> Result<Var<'t>, TensorError> {
        self.unary(Op::Sum)
    }

    pub fn mean(self) -> Result<Var<'t>, TensorError> {
        self.unary(Op::Mean)
    }

    pub fn sum_last(self) -> Result<Var<'t>, TensorError> {
        self.unary(Op::SumLast)
    }

    pub fn logsumexp(self) -> Result<Var<'t>, TensorError> {
        self.unary(Op::LogSumExp)
    }

    pub fn slice_last(self, start: usize, end: usize) -> Result<Var<'t>, TensorError> {
        self.unary(Op::Slice { start, end })
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>, TensorError> {
        self.unary(Op::Broadcast(shape.to_vec()))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>, TensorError> {
        self.unary(Op::Reshape(shape.to_vec()))
    }

    /// `x - logsumexp(x)` over the last axis.
    pub fn log_softmax(self) -> Result<Var<'t>, TensorError> {
        let shape = self.shape();
        let mut keep = shape.clone();
        if let Some(last) = keep.last_mut() {
            *last = 1;
        }
        let lse = self.logsumexp()?.reshape(&keep)?.broadcast_to(&shape)?;
        self.sub(lse)
    }
}

fn mismatch(op: &Op, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op: op.name(),
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn invalid(op: &Op, msg: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument {
        op: op.name(),
        msg: msg.into(),
    }
}

/// Output shape for an elementwise pair, where the shorter shape must be a
/// suffix of the longer one.
fn elementwise_shape(op: &Op, a: &Tensor, b: &Tensor) -> Result<Vec<usize>, TensorError> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa == sb {
        return Ok(sa.to_vec());
    }
    if sb.len() < sa.len() && sa.ends_with(sb) {
        return Ok(sa.to_vec());
    }
    if sa.len() < sb.len() && sb.ends_with(sa) {
        return Ok(sb.to_vec());
    }
    Err(mismatch(op, a, b))
}

fn last_axis(op: &Op, t: &Tensor) -> Result<usize, TensorError> {
    match t.shape().last() {
        Some(&k) => Ok(k),
        None => Err(invalid(op, "needs rank >= 1")),
    }
}

/// Flat input index for each output index under numpy-style broadcasting.
fn broadcast_map(op: &Op, from: &[usize], to: &[usize]) -> Result<Vec<usize>, TensorError> {
    if from.len() > to.len() {
        return Err(TensorError::ShapeMismatch {
            op: op.name(),
            lhs: from.to_vec(),
            rhs: to.to_vec(),
        });
    }
    let pad = to.len() - from.len();
    let mut strides = vec![0usize; to.len()];
    let mut acc = 1usize;
    for (i, &extent) in from.iter().enumerate().rev() {
        let target = to[pad + i];
        if extent == target {
            strides[pad + i] = acc;
        } else if extent != 1 {
            return Err(TensorError::ShapeMismatch {
                op: op.name(),
                lhs: from.to_vec(),
                rhs: to.to_vec(),
            });
        }
        acc *= extent;
    }
    let total: usize = to.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; to.len()];
    for _ in 0..total {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for axis in (0..to.len()).rev() {
            idx[axis] += 1;
            if idx[axis] < to[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
    Ok(map)
}

/// `c = beta * c + op(a) * op(b)` for row-major matrices, where `op` optionally transposes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // a is stored (m,k) or, when transposed, (k,m); likewise for b.
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // elements of the slices, whose lengths are checked by the callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn map_unary(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

fn forward(op: &Op, x: &[&Tensor]) -> Result<(Tensor, Vec<f64>), TensorError> {
    let arity_ok = match op {
        Op::Leaf => false,
        Op::MatMul | Op::Add | Op::Sub | Op::Mul | Op::Div => x.len() == 2,
        Op::Concat => !x.is_empty(),
        Op::GaussianLogDensity => x.len() == 3 || x.len() == 4,
        _ => x.len() == 1,
    };
    if !arity_ok {
        return Err(invalid(op, format!("wrong number of inputs ({})", x.len())));
    }
    let out = match op {
        Op::Leaf => unreachable!(),
        Op::MatMul => {
            let (a, b) = (x[0], x[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(mismatch(op, a, b));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut c);
            Tensor::new(vec![m, n], c)?
        }
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            let (a, b) = (x[0], x[1]);
            let shape = elementwise_shape(op, a, b)?;
            let n: usize = shape.iter().product();
            let (ad, bd) = (a.data(), b.data());
            let (na, nb) = (ad.len(), bd.len());
            let f: fn(f64, f64) -> f64 = match op {
                Op::Add => |p, q| p + q,
                Op::Sub => |p, q| p - q,
                Op::Mul => |p, q| p * q,
                _ => |p, q| p / q,
            };
            let data = if na == n && nb == n {
                ad.iter().zip(bd).map(|(&p, &q)| f(p, q)).collect()
            } else {
                (0..n).map(|i| f(ad[i % na], bd[i % nb])).collect()
            };
            Tensor::new(shape, data)?
        }
        Op::Exp => map_unary(x[0], f64::exp),
        Op::Log => map_unary(x[0], f64::ln),
        Op::Relu => map_unary(x[0], |v| if v > 0.0 { v } else { 0.0 }),
        Op::Elu => map_unary(x[0], |v| if v > 0.0 { v } else { v.exp_m1() }),
        Op::Sigmoid => map_unary(x[0], sigmoid),
        Op::Softplus => map_unary(x[0], softplus),
        Op::Clamp { lo, hi } => {
            if lo > hi {
                return Err(invalid(op, format!("empty interval [{lo}, {hi}]")));
            }
            map_unary(x[0], |v| v.clamp(*lo, *hi))
        }
        Op::Scale(c) => map_unary(x[0], |v| v * c),
        Op::Offset(c) => map_unary(x[0], |v| v + c),
        Op::Sum => Tensor::scalar(x[0].data().iter().sum()),
        Op::Mean => {
            if x[0].is_empty() {
                return Err(invalid(op, "mean of an empty tensor"));
            }
            Tensor::scalar(x[0].data().iter().sum::<f64>() / x[0].len() as f64)
        }
        Op::SumLast => {
            let k = last_axis(op, x[0])?;
            let shape = x[0].shape()[..x[0].rank() - 1].to_vec();
            let data = if k == 0 {
                vec![0.0; shape.iter().product()]
            } else {
                x[0].data().chunks(k).map(|r| r.iter().sum()).collect()
            };
            Tensor::new(shape, data)?
        }
        Op::LogSumExp => {
            let k = last_axis(op, x[0])?;
            if k == 0 {
                return Err(invalid(op, "empty last axis"));
            }
            let shape = x[0].shape()[..x[0].rank() - 1].to_vec();
            let data = x[0].data().chunks(k).map(logsumexp_slice).collect();
            Tensor::new(shape, data)?
        }
        Op::Concat => {
            let lead = &x[0].shape()[..x[0].rank().saturating_sub(1)];
            let rows = x[0].rows();
            let mut width = 0;
            for t in x {
                if t.rank() == 0 || &t.shape()[..t.rank() - 1] != lead {
                    return Err(mismatch(op, x[0], t));
                }
                width += t.last_dim();
            }
            let mut data = Vec::with_capacity(rows * width);
            for r in 0..rows {
                for t in x {
                    let w = t.last_dim();
                    data.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(width);
            Tensor::new(shape, data)?
        }
        Op::Slice { start, end } => {
            let k = last_axis(op, x[0])?;
            if start > end || *end > k {
                return Err(invalid(
                    op,
                    format!("range {start}..{end} outside last axis of {k}"),
                ));
            }
            let w = end - start;
            let data = x[0]
                .data()
                .chunks(k.max(1))
                .flat_map(|r| r[*start..*end].iter().copied())
                .collect();
            let mut shape = x[0].shape().to_vec();
            *shape.last_mut().expect("rank >= 1") = w;
            Tensor::new(shape, data)?
        }
        Op::Broadcast(to) => {
            let map = broadcast_map(op, x[0].shape(), to)?;
            let d = x[0].data();
            Tensor::new(to.clone(), map.iter().map(|&i| d[i]).collect())?
        }
        Op::Reshape(to) => x[0].clone().reshaped(to.clone())?,
        Op::GaussianLogDensity => return gaussian_forward(op, x),
    };
    Ok((out, Vec::new()))
}

pub(crate) fn logsumexp_slice(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if m == f64::INFINITY {
        return f64::INFINITY;
    }
    m + v.iter().map(|&a| (a - m).exp()).sum::<f64>().ln()
}

struct GaussianDims {
    b: usize,
    k: usize,
    d: usize,
}

fn gaussian_dims(op: &Op, x: &[&Tensor]) -> Result<GaussianDims, TensorError> {
    let (z, mean, diag) = (x[0], x[1], x[2]);
    if z.rank() != 2 || mean.rank() != 2 || z.shape()[1] != mean.shape()[1] {
        return Err(mismatch(op, z, mean));
    }
    if diag.shape() != mean.shape() {
        return Err(mismatch(op, mean, diag));
    }
    let dims = GaussianDims {
        b: z.shape()[0],
        k: mean.shape()[0],
        d: mean.shape()[1],
    };
    if let Some(lower) = x.get(3) {
        if lower.shape() != [dims.k, dims.d, dims.d] {
            return Err(mismatch(op, mean, lower));
        }
    }
    Ok(dims)
}

fn gaussian_forward(op: &Op, x: &[&Tensor]) -> Result<(Tensor, Vec<f64>), TensorError> {
    let GaussianDims { b, k, d } = gaussian_dims(op, x)?;
    let (z, mean, diag) = (x[0].data(), x[1].data(), x[2].data());
    let lower = x.get(3).map(|t| t.data());
    if diag.iter().any(|&v| v.is_nan() || v <= 0.0) {
        return Err(invalid(op, "Cholesky diagonal must be strictly positive"));
    }
    let mut out = vec![0.0; b * k];
    // whitened residuals u = L^{-1}(z - mean), kept for the backward pass
    let mut saved = vec![0.0; b * k * d];
    for c in 0..k {
        let mu = &mean[c * d..(c + 1) * d];
        let ld = &diag[c * d..(c + 1) * d];
        let log_det: f64 = ld.iter().map(|v| v.ln()).sum();
        let base = -0.5 * d as f64 * LN_2PI - log_det;
        for r in 0..b {
            let zr = &z[r * d..(r + 1) * d];
            let u = &mut saved[(r * k + c) * d..(r * k + c + 1) * d];
            for i in 0..d {
                let mut acc = zr[i] - mu[i];
                if let Some(low) = lower {
                    let row = &low[(c * d + i) * d..(c * d + i) * d + i];
                    for (j, l) in row.iter().enumerate() {
                        acc -= l * u[j];
                    }
                }
                u[i] = acc / ld[i];
            }
            out[r * k + c] = base - 0.5 * u.iter().map(|v| v * v).sum::<f64>();
        }
    }
    Ok((Tensor::new(vec![b, k], out)?, saved))
}

fn gaussian_vjp(x: &[&Tensor], saved: &[f64], g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
    let (b, k, d) = (x[0].shape()[0], x[1].shape()[0], x[1].shape()[1]);
    let diag = x[2].data();
    let lower = x.get(3).map(|t| t.data());
    let mut gz = needs[0].then(|| vec![0.0; b * d]);
    let mut gm = needs[1].then(|| vec![0.0; k * d]);
    let mut gd = needs[2].then(|| vec![0.0; k * d]);
    let mut gl =
        (lower.is_some() && needs.get(3).copied().unwrap_or(false)).then(|| vec![0.0; k * d * d]);
    let mut w = vec![0.0; d];
    for c in 0..k {
        let ld = &diag[c * d..(c + 1) * d];
        for r in 0..b {
            let gr = g[r * k + c];
            if gr == 0.0 {
                continue;
            }
            let u = &saved[(r * k + c) * d..(r * k + c + 1) * d];
            // w = L^{-T} u by back substitution
            for i in (0..d).rev() {
                let mut acc = u[i];
                if let Some(low) = lower {
                    for j in i + 1..d {
                        acc -= low[(c * d + j) * d + i] * w[j];
                    }
                }
                w[i] = acc / ld[i];
            }
            if let Some(gz) = gz.as_mut() {
                for i in 0..d {
                    gz[r * d + i] -= gr * w[i];
                }
            }
            if let Some(gm) = gm.as_mut() {
                for i in 0..d {
                    gm[c * d + i] += gr * w[i];
                }
            }
            if let Some(gd) = gd.as_mut() {
                for i in 0..d {
                    gd[c * d + i] += gr * (w[i] * u[i] - 1.0 / ld[i]);
                }
            }
            if let Some(gl) = gl.as_mut() {
                for i in 1..d {
                    for j in 0..i {
                        gl[(c * d + i) * d + j] += gr * w[i] * u[j];
                    }
                }
            }
        }
    }
    let mut out = vec![gz, gm, gd];
    if x.len() == 4 {
        out.push(gl);
    }
    out
}

/// Accumulates `g` from an output of length `n` into an operand of length `m`
/// that was repeated over leading axes.
fn reduce_to(len: usize, n: usize, g: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for i in 0..n {
        out[i % len] += g(i);
    }
    out
}

fn vjp(node: &Node, x: &[&Tensor], g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
    let y = node.value.data();
    let unary = |f: &dyn Fn(usize) -> f64| vec![Some((0..g.len()).map(f).collect::<Vec<f64>>())];
    match &node.op {
        Op::Leaf => Vec::new(),
        Op::MatMul => {
            let (a, b) = (x[0], x[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let ga = needs[0].then(|| {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, false, b.data(), true, 0.0, &mut ga);
                ga
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, a.data(), true, g, false, 0.0, &mut gb);
                gb
            });
            vec![ga, gb]
        }
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            let (ad, bd) = (x[0].data(), x[1].data());
            let (na, nb, n) = (ad.len(), bd.len(), g.len());
            let (ga, gb): (Option<Vec<f64>>, Option<Vec<f64>>) = match node.op {
                Op::Add => (
                    needs[0].then(|| reduce_to(na, n, |i| g[i])),
                    needs[1].then(|| reduce_to(nb, n, |i| g[i])),
                ),
                Op::Sub => (
                    needs[0].then(|| reduce_to(na, n, |i| g[i])),
                    needs[1].then(|| reduce_to(nb, n, |i| -g[i])),
                ),
                Op::Mul => (
                    needs[0].then(|| reduce_to(na, n, |i| g[i] * bd[i % nb])),
                    needs[1].then(|| reduce_to(nb, n, |i| g[i] * ad[i % na])),
                ),
                _ => (
                    needs[0].then(|| reduce_to(na, n, |i| g[i] / bd[i % nb])),
                    needs[1].then(|| {
                        reduce_to(nb, n, |i| {
                            let q = bd[i % nb];
                            -g[i] * ad[i % na] / (q * q)
                        })
                    }),
                ),
            };
            vec![ga, gb]
        }
        Op::Exp => unary(&|i| g[i] * y[i]),
        Op::Log => unary(&|i| g[i] / x[0].data()[i]),
        Op::Relu => unary(&|i| if x[0].data()[i] > 0.0 { g[i] } else { 0.0 }),
        Op::Elu => unary(&|i| {
            if x[0].data()[i] > 0.0 {
                g[i]
            } else {
                g[i] * (y[i] + 1.0)
            }
        }),
        Op::Sigmoid => unary(&|i| g[i] * y[i] * (1.0 - y[i])),
        Op::Softplus => unary(&|i| g[i] * sigmoid(x[0].data()[i])),
        Op::Clamp { lo, hi } => unary(&|i| {
            let v = x[0].data()[i];
            if v >= *lo && v <= *hi {
                g[i]
            } else {
                0.0
            }
        }),
        Op::Scale(c) => unary(&|i| g[i] * c),
        Op::Offset(_) => unary(&|i| g[i]),
        Op::Sum => vec![Some(vec![g[0]; x[0].len()])],
        Op::Mean => vec![Some(vec![g[0] / x[0].len() as f64; x[0].len()])],
        Op::SumLast => {
            let k = x[0].last_dim();
            vec![Some((0..x[0].len()).map(|i| g[i / k]).collect())]
        }
        Op::LogSumExp => {
            let k = x[0].last_dim();
            let xd = x[0].data();
            vec![Some(
                (0..xd.len())
                    .map(|i| {
                        let r = i / k;
                        if y[r] == f64::NEG_INFINITY {
                            0.0
                        } else {
                            g[r] * (xd[i] - y[r]).exp()
                        }
                    })
                    .collect(),
            )]
        }
        Op::Concat => {
            let rows = x[0].rows();
            let width: usize = x.iter().map(|t| t.last_dim()).sum();
            let mut offset = 0;
            let mut out = Vec::with_capacity(x.len());
            for (t, need) in x.iter().zip(needs) {
                let w = t.last_dim();
                out.push(need.then(|| {
                    let mut gt = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        gt.extend_from_slice(&g[r * width + offset..r * width + offset + w]);
                    }
                    gt
                }));
                offset += w;
            }
            out
        }
        Op::Slice { start, end } => {
            let k = x[0].last_dim();
            let w = end - start;
            let mut gx = vec![0.0; x[0].len()];
            for r in 0..x[0].rows() {
                gx[r * k + start..r * k + end].copy_from_slice(&g[r * w..(r + 1) * w]);
            }
            vec![Some(gx)]
        }
        Op::Broadcast(to) => {
            let map = broadcast_map(&node.op, x[0].shape(), to).expect("validated in forward");
            let mut gx = vec![0.0; x[0].len()];
            for (i, &src) in map.iter().enumerate() {
                gx[src] += g[i];
            }
            vec![Some(gx)]
        }
        Op::Reshape(_) => vec![Some(g.to_vec())],
        Op::GaussianLogDensity => gaussian_vjp(x, &node.saved, g, needs),
    }
}

/// Maximum over coordinates of `|analytic - central difference| / max(1, |analytic|)`
/// for a scalar function of several tensors.
pub fn check_gradients_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<f64, TensorError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, TensorError>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(TensorError::InvalidArgument {
            op: "check_gradients",
            msg: "eps must be > 0".into(),
        });
    }
    let eval = |inputs: &[Tensor]| -> Result<f64, TensorError> {
        let tape = Tape::new();
        let vars = inputs
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let v = f(&tape, &vars)?.item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(TensorError::NonFinite(v))
        }
    };
    let tape = Tape::new();
    let vars = xs
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let out = f(&tape, &vars)?;
    let v = out.item();
    if !v.is_finite() {
        return Err(TensorError::NonFinite(v));
    }
    let grads = tape.backward(out)?;
    let mut worst = 0.0f64;
    let mut probe = xs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var);
        for i in 0..xs[which].len() {
            let orig = xs[which].data()[i];
            probe[which].data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe[which].data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Single-input form of [`check_gradients_many`].
pub fn check_gradients<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, TensorError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, TensorError>,
{
    check_gradients_many(|tape, v| f(tape, v[0]), std::slice::from_ref(x), eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_is_elementwise() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let b = tape.constant(Tensor::vector(vec![3.0, 4.0])).unwrap();
        assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
    }

    #[test]
    fn logsumexp_of_zeros_is_ln2() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
        assert!((a.logsumexp().unwrap().item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn matmul_of_ones() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::full(&[2, 3], 1.0)).unwrap();
        let b = tape.constant(Tensor::full(&[3, 2], 1.0)).unwrap();
        let c = a.matmul(b).unwrap().value();
        assert_eq!(c.shape(), &[2, 2]);
        assert!(c.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(
            err.contains("matmul") && err.contains("[2, 3]") && err.contains("[2, 2]"),
            "{err}"
        );
        let err = a.add(b).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
    }

    #[test]
    fn derivative_of_square() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0)).unwrap();
        let y = x.mul(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn relu_gradient_is_zero_for_negative_input() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(-1.0)).unwrap();
        let y = x.relu().unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 0.0);
    }

    #[test]
    fn backward_rejects_non_scalar_and_freezes() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss(_))
        ));
        let s = x.sum().unwrap();
        tape.backward(s).unwrap();
        assert!(tape.is_frozen());
        assert!(matches!(x.exp(), Err(TensorError::Frozen)));
    }

    #[test]
    fn reset_unfreezes() {
        let mut tape = Tape::new();
        let s = tape.param(Tensor::scalar(1.0)).unwrap();
        tape.backward(s).unwrap();
        tape.reset();
        assert!(!tape.is_frozen() && tape.is_empty());
        assert!(tape.param(Tensor::scalar(2.0)).is_ok());
    }

    #[test]
    fn var_from_other_tape_is_detached() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.param(Tensor::scalar(1.0)).unwrap();
        let b = t2.param(Tensor::scalar(1.0)).unwrap();
        assert!(matches!(t2.backward(a), Err(TensorError::Detached)));
        assert!(matches!(
            t2.apply(Op::Add, &[a, b]),
            Err(TensorError::Detached)
        ));
    }

    #[test]
    fn sum_of_squares_gradient_check() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.5, 0.7, -0.4]);
        let err = check_gradients(|_, v| v.mul(v)?.sum(), &x, 1e-5).unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn sigmoid_composition_gradient_check() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.5]);
        let err = check_gradients(
            |_, v| v.sigmoid()?.scale(3.0)?.sigmoid()?.ln()?.sum(),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let err = check_gradients(|tape, _| tape.constant(Tensor::scalar(4.0)), &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_function_is_an_error() {
        let x = Tensor::vector(vec![-1.0]);
        assert!(matches!(
            check_gradients(|_, v| v.ln()?.sum(), &x, 1e-5),
            Err(TensorError::NonFinite(_))
        ));
    }

    #[test]
    fn broadcast_expands_and_reduces() {
        let tape = Tape::new();
        let x = tape.param(t(&[2, 1], &[1.0, 2.0])).unwrap();
        let y = x.broadcast_to(&[3, 2, 4]).unwrap();
        assert_eq!(y.shape(), vec![3, 2, 4]);
        assert_eq!(y.value().data()[4], 2.0);
        let g = tape.backward(y.sum().unwrap()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[12.0, 12.0]);
    }

    #[test]
    fn gaussian_density_matches_scalar_formula() {
        let tape = Tape::new();
        let z = tape.constant(t(&[1, 1], &[1.0])).unwrap();
        let m = tape.constant(t(&[1, 1], &[0.0])).unwrap();
        let d = tape.constant(t(&[1, 1], &[1.0])).unwrap();
        let v = tape
            .apply(Op::GaussianLogDensity, &[z, m, d])
            .unwrap()
            .item();
        assert!((v + 1.418_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn gaussian_rejects_nonpositive_diagonal() {
        let tape = Tape::new();
        let z = tape.constant(t(&[1, 1], &[1.0])).unwrap();
        let m = tape.constant(t(&[1, 1], &[0.0])).unwrap();
        let d = tape.constant(t(&[1, 1], &[0.0])).unwrap();
        assert!(tape.apply(Op::GaussianLogDensity, &[z, m, d]).is_err());
    }
}
