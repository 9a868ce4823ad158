use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::{NodeRef, Parameter, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Sin,
    Cos,
    Tanh,
    Sigmoid,
    Exp,
    Ln,
    Softplus,
    Neg,
    Square,
    /// Multiply by a constant.
    Scale(f64),
    /// Add a constant.
    Offset(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

/// An operation with a hand-written vector-Jacobian product.
///
/// `backward` receives the forward input values, the forward output and
/// the upstream gradient, and returns one gradient per input. Entries for
/// inputs with `needs[i] == false` may be `None`.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&[f64]],
        output: &[f64],
        grad_output: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

#[derive(Clone, Copy, Debug)]
enum Bcast {
    Full,
    Scalar,
    Row(usize),
}

impl Bcast {
    #[inline]
    fn index(self, i: usize) -> usize {
        match self {
            Bcast::Full => i,
            Bcast::Scalar => 0,
            Bcast::Row(n) => i % n,
        }
    }
}

enum Op {
    Leaf,
    Constant,
    Binary {
        op: BinaryOp,
        a: usize,
        b: usize,
        ba: Bcast,
        bb: Bcast,
    },
    Unary {
        op: UnaryOp,
        x: usize,
    },
    Matmul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Reduce {
        op: ReduceOp,
        x: usize,
        outer: usize,
        extent: usize,
        inner: usize,
    },
    Reshape {
        x: usize,
    },
    Custom {
        op: Box<dyn CustomOp>,
        inputs: Vec<usize>,
    },
}

struct Node {
    value: Arc<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    params: HashMap<String, usize>,
}

/// Append-only record of the operations of one forward pass.
///
/// A tape created with [`Tape::no_grad`] computes values but records
/// nothing, so every tensor it returns is untracked.
pub struct Tape {
    id: u64,
    recording: bool,
    inner: RefCell<TapeInner>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("id", &self.id)
            .field("recording", &self.recording)
            .field("nodes", &self.len())
            .finish()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl UnaryOp {
    fn name(self) -> &'static str {
        match self {
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Tanh => "tanh",
            UnaryOp::Sigmoid => "sigmoid",
            UnaryOp::Exp => "exp",
            UnaryOp::Ln => "ln",
            UnaryOp::Softplus => "softplus",
            UnaryOp::Neg => "neg",
            UnaryOp::Square => "square",
            UnaryOp::Scale(_) => "scale",
            UnaryOp::Offset(_) => "offset",
        }
    }

    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Sin => x.sin(),
            UnaryOp::Cos => x.cos(),
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Exp => x.exp(),
            UnaryOp::Ln => x.ln(),
            UnaryOp::Softplus => softplus(x),
            UnaryOp::Neg => -x,
            UnaryOp::Square => x * x,
            UnaryOp::Scale(c) => c * x,
            UnaryOp::Offset(c) => x + c,
        }
    }

    /// d(out)/d(in) given the input `x` and output `y`.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryOp::Sin => x.cos(),
            UnaryOp::Cos => -x.sin(),
            UnaryOp::Tanh => 1.0 - y * y,
            UnaryOp::Sigmoid => y * (1.0 - y),
            UnaryOp::Exp => y,
            UnaryOp::Ln => 1.0 / x,
            UnaryOp::Softplus => sigmoid(x),
            UnaryOp::Neg => -1.0,
            UnaryOp::Square => 2.0 * x,
            UnaryOp::Scale(c) => c,
            UnaryOp::Offset(_) => 1.0,
        }
    }
}

impl BinaryOp {
    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }

    #[inline]
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }
}

fn is_scalar_like(t: &Tensor) -> bool {
    t.numel() == 1 && t.shape().iter().all(|&d| d == 1)
}

fn row_of(matrix: &Tensor, row: &Tensor) -> Option<usize> {
    if matrix.rank() != 2 {
        return None;
    }
    let n = matrix.shape()[1];
    match row.shape() {
        [m] if *m == n => Some(n),
        [1, m] if *m == n => Some(n),
        _ => None,
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            recording: true,
            inner: RefCell::new(TapeInner::default()),
        }
    }

    pub fn no_grad() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Arc<Vec<f64>>, op: Op, requires_grad: bool) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        inner.nodes.len() - 1
    }

    fn wrap(&self, shape: Vec<usize>, value: Arc<Vec<f64>>, index: usize) -> Tensor {
        Tensor::from_parts(
            shape,
            value,
            Some(NodeRef {
                tape: self.id,
                index,
            }),
        )
    }

    /// Node index of `t` on this tape, registering untracked tensors as
    /// constants. Returns the index and whether gradient flows through it.
    fn input(&self, t: &Tensor) -> Result<(usize, bool)> {
        match t.node() {
            Some(node) if node.tape == self.id => {
                let rg = self.inner.borrow().nodes[node.index].requires_grad;
                Ok((node.index, rg))
            }
            Some(_) => Err(Error::InvalidArgument(
                "tensor is tracked on a different tape".into(),
            )),
            None => Ok((
                self.push(Arc::clone(t.shared_data()), Op::Constant, false),
                false,
            )),
        }
    }

    fn tracked_here(&self, t: &Tensor) -> Result<bool> {
        match t.node() {
            Some(node) if node.tape == self.id => Ok(true),
            Some(_) => Err(Error::InvalidArgument(
                "tensor is tracked on a different tape".into(),
            )),
            None => Ok(false),
        }
    }

    /// Registers `t` as a differentiable leaf.
    pub fn leaf(&self, t: &Tensor) -> Tensor {
        if !self.recording {
            return t.detach();
        }
        let value = Arc::clone(t.shared_data());
        let idx = self.push(Arc::clone(&value), Op::Leaf, true);
        self.wrap(t.shape().to_vec(), value, idx)
    }

    /// Tracked view of a parameter. Repeated calls with the same parameter
    /// name return the same leaf, so gradients accumulate across uses.
    pub fn param(&self, p: &Parameter) -> Tensor {
        if !self.recording {
            return p.value().detach();
        }
        let existing = self.inner.borrow().params.get(p.name()).copied();
        let idx = match existing {
            Some(idx) => idx,
            None => {
                let idx = self.push(Arc::clone(p.value().shared_data()), Op::Leaf, true);
                self.inner
                    .borrow_mut()
                    .params
                    .insert(p.name().to_string(), idx);
                idx
            }
        };
        let value = Arc::clone(&self.inner.borrow().nodes[idx].value);
        self.wrap(p.shape().to_vec(), value, idx)
    }

    // ---- elementwise ------------------------------------------------------

    pub fn binary(&self, op: BinaryOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (shape, ba, bb) = if a.shape() == b.shape() {
            (a.shape().to_vec(), Bcast::Full, Bcast::Full)
        } else if is_scalar_like(b) {
            (a.shape().to_vec(), Bcast::Full, Bcast::Scalar)
        } else if is_scalar_like(a) {
            (b.shape().to_vec(), Bcast::Scalar, Bcast::Full)
        } else if let Some(n) = row_of(a, b) {
            (a.shape().to_vec(), Bcast::Full, Bcast::Row(n))
        } else if let Some(n) = row_of(b, a) {
            (b.shape().to_vec(), Bcast::Row(n), Bcast::Full)
        } else {
            return Err(Error::ShapeMismatch {
                op: op.name(),
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        };
        let n: usize = shape.iter().product();
        let (ad, bd) = (a.data(), b.data());
        let out: Vec<f64> = (0..n)
            .map(|i| op.apply(ad[ba.index(i)], bd[bb.index(i)]))
            .collect();
        check_finite(op.name(), &out)?;
        let out = Arc::new(out);
        if self.recording && (self.tracked_here(a)? || self.tracked_here(b)?) {
            let (ia, ra) = self.input(a)?;
            let (ib, rb) = self.input(b)?;
            let idx = self.push(
                Arc::clone(&out),
                Op::Binary {
                    op,
                    a: ia,
                    b: ib,
                    ba,
                    bb,
                },
                ra || rb,
            );
            Ok(self.wrap(shape, out, idx))
        } else {
            Ok(Tensor::from_parts(shape, out, None))
        }
    }

    pub fn unary(&self, op: UnaryOp, x: &Tensor) -> Result<Tensor> {
        let out: Vec<f64> = x.data().iter().map(|&v| op.apply(v)).collect();
        check_finite(op.name(), &out)?;
        let out = Arc::new(out);
        if self.recording && self.tracked_here(x)? {
            let (ix, rx) = self.input(x)?;
            let idx = self.push(Arc::clone(&out), Op::Unary { op, x: ix }, rx);
            Ok(self.wrap(x.shape().to_vec(), out, idx))
        } else {
            Ok(Tensor::from_parts(x.shape().to_vec(), out, None))
        }
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn sin(&self, x: &Tensor) -> Result<Tensor> {
        self.unary(UnaryOp::Sin, x)
    }

    pub fn cos(&self, x: &Tensor) -> Result<Tensor> {
        self.unary(UnaryOp::Cos, x)
    }

    pub fn tanh(&self, x: &Tensor) -> Result<Tensor> {
        self.unary(UnaryOp::Tanh, x)
    }

    pub fn sigmoid(&self, x: &Tensor) -> Result<Tensor> {
        self.unary(UnaryOp::Sigmoid, x)
    }

    pub fn exp(&self, x: &Tensor) -> Result<Tensor> {
        self.unary(UnaryOp::Exp, x)
    }

    pub fn ln(&self, x: &Tensor) -> Result<Tensor> {
        self.unary(UnaryOp::Ln, x)
    }

    pub fn softplus(&self, x: &Tensor) -> Result<Tensor> {
        self.unary(UnaryOp::Softplus, x)
    }

    pub fn neg(&self, x: &Tensor) -> Result<Tensor> {
        self.unary(UnaryOp::Neg, x)
    }

    pub fn square(&self, x: &Tensor) -> Result<Tensor> {
        self.unary(UnaryOp::Square, x)
    }

    pub fn scale(&self, x: &Tensor, c: f64) -> Result<Tensor> {
        self.unary(UnaryOp::Scale(c), x)
    }

    pub fn offset(&self, x: &Tensor, c: f64) -> Result<Tensor> {
        self.unary(UnaryOp::Offset(c), x)
    }

    /// `a + c * b`, the workhorse of the Runge-Kutta stages.
    pub fn axpy(&self, a: &Tensor, c: f64, b: &Tensor) -> Result<Tensor> {
        let cb = self.scale(b, c)?;
        self.add(a, &cb)
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let out = matmul_raw(a.data(), b.data(), m, k, n);
        check_finite("matmul", &out)?;
        let out = Arc::new(out);
        if self.recording && (self.tracked_here(a)? || self.tracked_here(b)?) {
            let (ia, ra) = self.input(a)?;
            let (ib, rb) = self.input(b)?;
            let idx = self.push(
                Arc::clone(&out),
                Op::Matmul {
                    a: ia,
                    b: ib,
                    m,
                    k,
                    n,
                },
                ra || rb,
            );
            Ok(self.wrap(vec![m, n], out, idx))
        } else {
            Ok(Tensor::from_parts(vec![m, n], out, None))
        }
    }

    // ---- reductions -------------------------------------------------------

    pub fn reduce(&self, op: ReduceOp, x: &Tensor, axis: Option<usize>) -> Result<Tensor> {
        let (outer, extent, inner, shape) = match axis {
            None => (1, x.numel(), 1, Vec::new()),
            Some(ax) => {
                if ax >= x.rank() {
                    return Err(Error::InvalidArgument(format!(
                        "axis {ax} out of range for shape {:?}",
                        x.shape()
                    )));
                }
                let s = x.shape();
                let mut shape = s.to_vec();
                shape.remove(ax);
                (
                    s[..ax].iter().product(),
                    s[ax],
                    s[ax + 1..].iter().product(),
                    shape,
                )
            }
        };
        if extent == 0 {
            return Err(Error::EmptyReduction);
        }
        let xd = x.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |e: usize| xd[(o * extent + e) * inner + i];
                out[o * inner + i] = match op {
                    ReduceOp::Sum => (0..extent).map(at).sum(),
                    ReduceOp::Mean => (0..extent).map(at).sum::<f64>() / extent as f64,
                    ReduceOp::Max => (0..extent).map(at).fold(f64::NEG_INFINITY, f64::max),
                };
            }
        }
        check_finite("reduce", &out)?;
        let out = Arc::new(out);
        if self.recording && self.tracked_here(x)? {
            let (ix, rx) = self.input(x)?;
            let idx = self.push(
                Arc::clone(&out),
                Op::Reduce {
                    op,
                    x: ix,
                    outer,
                    extent,
                    inner,
                },
                rx,
            );
            Ok(self.wrap(shape, out, idx))
        } else {
            Ok(Tensor::from_parts(shape, out, None))
        }
    }

    pub fn sum(&self, x: &Tensor) -> Result<Tensor> {
        self.reduce(ReduceOp::Sum, x, None)
    }

    pub fn mean(&self, x: &Tensor) -> Result<Tensor> {
        self.reduce(ReduceOp::Mean, x, None)
    }

    pub fn max(&self, x: &Tensor) -> Result<Tensor> {
        self.reduce(ReduceOp::Max, x, None)
    }

    pub fn sum_axis(&self, x: &Tensor, axis: usize) -> Result<Tensor> {
        self.reduce(ReduceOp::Sum, x, Some(axis))
    }

    pub fn reshape(&self, x: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        let reshaped = x.reshaped(shape)?;
        if self.recording && self.tracked_here(x)? {
            let (ix, rx) = self.input(x)?;
            let value = Arc::clone(x.shared_data());
            let idx = self.push(Arc::clone(&value), Op::Reshape { x: ix }, rx);
            Ok(self.wrap(reshaped.shape().to_vec(), value, idx))
        } else {
            Ok(reshaped)
        }
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(
        &self,
        op: Box<dyn CustomOp>,
        inputs: &[&Tensor],
        shape: Vec<usize>,
        value: Vec<f64>,
    ) -> Result<Tensor> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::ShapeMismatch {
                op: op.name(),
                lhs: shape,
                rhs: vec![value.len()],
            });
        }
        check_finite(op.name(), &value)?;
        let value = Arc::new(value);
        let mut any_tracked = false;
        for t in inputs {
            any_tracked |= self.tracked_here(t)?;
        }
        if !(self.recording && any_tracked) {
            return Ok(Tensor::from_parts(shape, value, None));
        }
        let mut idx = Vec::with_capacity(inputs.len());
        let mut rg = false;
        for t in inputs {
            let (i, r) = self.input(t)?;
            idx.push(i);
            rg |= r;
        }
        let node = self.push(Arc::clone(&value), Op::Custom { op, inputs: idx }, rg);
        Ok(self.wrap(shape, value, node))
    }

    // ---- backward ---------------------------------------------------------

    /// Gradients of the scalar `root` with respect to every leaf recorded
    /// on this tape. Each call recomputes from scratch.
    pub fn backward(&self, root: &Tensor) -> Result<Gradients> {
        if root.rank() != 0 {
            return Err(Error::NotScalar(root.shape().to_vec()));
        }
        let root_idx = match root.node() {
            Some(n) if n.tape == self.id => n.index,
            _ => return Err(Error::NotTracked),
        };
        let inner = self.inner.borrow();
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root_idx + 1];
        grads[root_idx] = Some(vec![1.0]);
        let mut leaves = HashMap::new();

        fn acc(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize) -> &mut Vec<f64> {
            grads[idx].get_or_insert_with(|| vec![0.0; len])
        }

        for i in (0..=root_idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    leaves.insert(i, g);
                }
                Op::Constant => {}
                Op::Binary { op, a, b, ba, bb } => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    if nodes[*a].requires_grad {
                        let ga = acc(&mut grads, *a, av.len());
                        for (k, gk) in g.iter().enumerate() {
                            let (ia, ib) = (ba.index(k), bb.index(k));
                            ga[ia] += gk
                                * match op {
                                    BinaryOp::Add | BinaryOp::Sub => 1.0,
                                    BinaryOp::Mul => bv[ib],
                                    BinaryOp::Div => 1.0 / bv[ib],
                                };
                        }
                    }
                    if nodes[*b].requires_grad {
                        let gb = acc(&mut grads, *b, bv.len());
                        for (k, gk) in g.iter().enumerate() {
                            let (ia, ib) = (ba.index(k), bb.index(k));
                            gb[ib] += gk
                                * match op {
                                    BinaryOp::Add => 1.0,
                                    BinaryOp::Sub => -1.0,
                                    BinaryOp::Mul => av[ia],
                                    BinaryOp::Div => -av[ia] / (bv[ib] * bv[ib]),
                                };
                        }
                    }
                }
                Op::Unary { op, x } => {
                    if nodes[*x].requires_grad {
                        let xv = &nodes[*x].value;
                        let yv = &node.value;
                        let gx = acc(&mut grads, *x, xv.len());
                        for k in 0..g.len() {
                            gx[k] += g[k] * op.derivative(xv[k], yv[k]);
                        }
                    }
                }
                Op::Matmul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    if nodes[*a].requires_grad {
                        // dA = G · Bᵀ
                        let bv = &nodes[*b].value;
                        let ga = acc(&mut grads, *a, m * k);
                        for r in 0..m {
                            for c in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[r * n + j] * bv[c * n + j];
                                }
                                ga[r * k + c] += s;
                            }
                        }
                    }
                    if nodes[*b].requires_grad {
                        // dB = Aᵀ · G
                        let av = &nodes[*a].value;
                        let gb = acc(&mut grads, *b, k * n);
                        for r in 0..m {
                            for c in 0..k {
                                let a_rc = av[r * k + c];
                                if a_rc == 0.0 {
                                    continue;
                                }
                                let row = &g[r * n..(r + 1) * n];
                                let dst = &mut gb[c * n..(c + 1) * n];
                                for (d, gv) in dst.iter_mut().zip(row) {
                                    *d += a_rc * gv;
                                }
                            }
                        }
                    }
                }
                Op::Reduce {
                    op,
                    x,
                    outer,
                    extent,
                    inner,
                } => {
                    if nodes[*x].requires_grad {
                        let xv = &nodes[*x].value;
                        let yv = &node.value;
                        let gx = acc(&mut grads, *x, xv.len());
                        for o in 0..*outer {
                            for i in 0..*inner {
                                let gi = g[o * inner + i];
                                match op {
                                    ReduceOp::Sum => {
                                        for e in 0..*extent {
                                            gx[(o * extent + e) * inner + i] += gi;
                                        }
                                    }
                                    ReduceOp::Mean => {
                                        let share = gi / *extent as f64;
                                        for e in 0..*extent {
                                            gx[(o * extent + e) * inner + i] += share;
                                        }
                                    }
                                    ReduceOp::Max => {
                                        let target = yv[o * inner + i];
                                        // first arg-max receives the gradient
                                        if let Some(e) = (0..*extent)
                                            .find(|&e| xv[(o * extent + e) * inner + i] == target)
                                        {
                                            gx[(o * extent + e) * inner + i] += gi;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Reshape { x } => {
                    if nodes[*x].requires_grad {
                        let gx = acc(&mut grads, *x, g.len());
                        for (d, v) in gx.iter_mut().zip(&g) {
                            *d += v;
                        }
                    }
                }
                Op::Custom { op, inputs } => {
                    let values: Vec<&[f64]> =
                        inputs.iter().map(|&j| nodes[j].value.as_slice()).collect();
                    let needs: Vec<bool> = inputs.iter().map(|&j| nodes[j].requires_grad).collect();
                    let local = op.backward(&values, &node.value, &g, &needs);
                    for ((&j, need), lg) in inputs.iter().zip(&needs).zip(local) {
                        if let (true, Some(lg)) = (*need, lg) {
                            let gj = acc(&mut grads, j, nodes[j].value.len());
                            for (d, v) in gj.iter_mut().zip(&lg) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }

        Ok(Gradients {
            tape: self.id,
            leaves,
            params: inner.params.clone(),
        })
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let dst = &mut out[r * n..(r + 1) * n];
        for c in 0..k {
            let a_rc = a[r * k + c];
            if a_rc == 0.0 {
                continue;
            }
            for (d, bv) in dst.iter_mut().zip(&b[c * n..(c + 1) * n]) {
                *d += a_rc * bv;
            }
        }
    }
    out
}

/// Result of [`Tape::backward`]: gradients for every reached leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    leaves: HashMap<usize, Vec<f64>>,
    params: HashMap<String, usize>,
}

impl Gradients {
    /// Gradient with respect to a leaf, or `None` if the root does not
    /// depend on it.
    pub fn get(&self, leaf: &Tensor) -> Option<Tensor> {
        let node = leaf.node()?;
        if node.tape != self.tape {
            return None;
        }
        self.leaves
            .get(&node.index)
            .map(|g| Tensor::from_parts(leaf.shape().to_vec(), Arc::new(g.clone()), None))
    }

    /// Like [`get`](Self::get), with zeros for unreached leaves.
    pub fn wrt(&self, leaf: &Tensor) -> Tensor {
        self.get(leaf)
            .unwrap_or_else(|| Tensor::zeros(leaf.shape()))
    }

    pub fn param(&self, name: &str) -> Option<&[f64]> {
        let idx = self.params.get(name)?;
        self.leaves.get(idx).map(Vec::as_slice)
    }

    /// Stores the gradient of each parameter in `params`, zero when the
    /// parameter was not reached.
    pub fn apply_to<'a>(&self, params: impl IntoIterator<Item = &'a mut Parameter>) {
        for p in params {
            match self.param(p.name()) {
                Some(g) => p.grad_mut().copy_from_slice(g),
                None => p.zero_grad(),
            }
        }
    }
}
