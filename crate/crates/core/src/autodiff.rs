//! Reverse-mode differentiation over a tape of vector-valued nodes.
//!
//! The tape records operations lazily: building an expression only appends
//! nodes, [`Tape::forward`] evaluates every node in insertion order, and
//! [`Tape::backward`] walks the nodes in reverse to accumulate gradients of a
//! scalar output with respect to every node.
//!
//! Every primitive has a registered local derivative that is itself a
//! differentiable expression over the primitive set (`tanh` pairs with
//! `tanh_prime`, `softplus` with `sigmoid`, `exp` with itself). That is what
//! makes [`derivative_subgraph`] work: the derivative of a layered network
//! with respect to one of its inputs is spelled out as ordinary tape nodes,
//! so a later reverse pass over the extended graph differentiates a loss that
//! contains that derivative (double backpropagation).
//!
//! Values are stored row-major. A vector of length `n` has shape `(n, 1)`; a
//! scalar is a vector of length one.

use std::borrow::Cow;
use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};

use thiserror::Error;

/// Errors raised while evaluating or differentiating a tape.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("backward requires a scalar output, node {node} has {len} elements")]
    NonScalarOutput { node: usize, len: usize },
    #[error("tape has not been evaluated; call forward first")]
    NotEvaluated,
    #[error("activation {0} has no registered derivative primitive")]
    MissingDerivative(Activation),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub const fn vector(len: usize) -> Self {
        Shape { rows: len, cols: 1 }
    }

    pub const fn matrix(rows: usize, cols: usize) -> Self {
        Shape { rows, cols }
    }

    pub fn len(self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }
}

/// Largest exponent fed to `exp` by [`Tape::growth_integral`].
pub const GROWTH_EXPONENT_CAP: f64 = 60.0;
/// Below this `|w|` the growth integral switches to its series expansion.
pub const GROWTH_SERIES_THRESHOLD: f64 = 1e-8;

static GROWTH_CLAMP_WARNED: AtomicBool = AtomicBool::new(false);

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    MatVec(Var, Var),
    MatTVec(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Neg(Var),
    Tanh(Var),
    TanhPrime(Var),
    Softplus(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Sum(Var),
    Index(Var, usize),
    Concat(Var, Var),
    GrowthIntegral(Var, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatVec(..) => "matvec",
            Op::MatTVec(..) => "matvec_transposed",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Neg(..) => "neg",
            Op::Tanh(..) => "tanh",
            Op::TanhPrime(..) => "tanh_prime",
            Op::Softplus(..) => "softplus",
            Op::Sigmoid(..) => "sigmoid",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Sum(..) => "sum",
            Op::Index(..) => "index",
            Op::Concat(..) => "concat",
            Op::GrowthIntegral(..) => "growth_integral",
        }
    }
}

struct Node<'p> {
    op: Op,
    shape: Shape,
    value: Cow<'p, [f64]>,
    requires_grad: bool,
}

/// Append-only computation graph. Parents always precede their children.
///
/// Leaves may borrow their values (`'p`) so that model parameters are not
/// copied onto every per-window tape.
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    evaluated: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            evaluated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    fn leaf(&mut self, shape: Shape, value: Cow<'p, [f64]>, requires_grad: bool) -> Var {
        assert_eq!(shape.len(), value.len(), "leaf value does not match its shape");
        self.evaluated = false;
        self.nodes.push(Node {
            op: Op::Leaf,
            shape,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf borrowing its value.
    pub fn param(&mut self, shape: Shape, value: &'p [f64]) -> Var {
        self.leaf(shape, Cow::Borrowed(value), true)
    }

    /// A differentiable leaf owning its value.
    pub fn variable(&mut self, shape: Shape, value: Vec<f64>) -> Var {
        self.leaf(shape, Cow::Owned(value), true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, shape: Shape, value: Vec<f64>) -> Var {
        self.leaf(shape, Cow::Owned(value), false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Shape::vector(1), vec![value])
    }

    /// Replaces the value of a leaf. The tape must be re-evaluated afterwards.
    pub fn set_leaf(&mut self, v: Var, value: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        assert!(matches!(node.op, Op::Leaf), "set_leaf on non-leaf node {}", v.0);
        assert_eq!(node.shape.len(), value.len());
        node.value = Cow::Owned(value);
        self.evaluated = false;
    }

    fn push(&mut self, op: Op, shape: Shape, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.evaluated = false;
        self.nodes.push(Node {
            op,
            shape,
            value: Cow::Owned(Vec::new()),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var) -> Shape {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "shape mismatch between nodes {} and {}", a.0, b.0);
        sa
    }

    /// `A x` for a matrix `A` (rows × cols) and a vector `x` of length cols.
    pub fn matvec(&mut self, a: Var, x: Var) -> Var {
        let (sa, sx) = (self.shape(a), self.shape(x));
        assert_eq!(sa.cols, sx.len(), "matvec: {}x{} by {}", sa.rows, sa.cols, sx.len());
        self.push(Op::MatVec(a, x), Shape::vector(sa.rows), &[a, x])
    }

    /// `Aᵀ y` for a matrix `A` (rows × cols) and a vector `y` of length rows.
    pub fn matvec_t(&mut self, a: Var, y: Var) -> Var {
        let (sa, sy) = (self.shape(a), self.shape(y));
        assert_eq!(sa.rows, sy.len(), "matvec_t: {}x{} by {}", sa.rows, sa.cols, sy.len());
        self.push(Op::MatTVec(a, y), Shape::vector(sa.cols), &[a, y])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let s = self.same_shape(a, b);
        self.push(Op::Add(a, b), s, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let s = self.same_shape(a, b);
        self.push(Op::Mul(a, b), s, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let s = self.shape(a);
        self.push(Op::Scale(a, factor), s, &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        self.push(Op::Neg(a), s, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        self.push(Op::Tanh(a), s, &[a])
    }

    /// `1 - tanh²(a)`, evaluated as `sech²(a)` so it stays positive where
    /// `tanh` rounds to ±1.
    pub fn tanh_prime(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        self.push(Op::TanhPrime(a), s, &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        self.push(Op::Softplus(a), s, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        self.push(Op::Sigmoid(a), s, &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        self.push(Op::Log(a), s, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        self.push(Op::Exp(a), s, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::Sum(a), Shape::vector(1), &[a])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let m = self.mul(a, b);
        self.sum(m)
    }

    /// Element `i` of `a` as a scalar node.
    pub fn index(&mut self, a: Var, i: usize) -> Var {
        assert!(i < self.shape(a).len(), "index {i} out of range");
        self.push(Op::Index(a, i), Shape::vector(1), &[a])
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let len = self.shape(a).len() + self.shape(b).len();
        self.push(Op::Concat(a, b), Shape::vector(len), &[a, b])
    }

    /// `∫₀^τ exp(w s) ds = (exp(w τ) - 1) / w` for a scalar node `w` and a
    /// fixed `τ ≥ 0`.
    ///
    /// Uses the series `τ (1 + wτ/2 + (wτ)²/6)` when `|w|` is below
    /// [`GROWTH_SERIES_THRESHOLD`] and clamps `wτ` at
    /// [`GROWTH_EXPONENT_CAP`].
    pub fn growth_integral(&mut self, w: Var, tau: f64) -> Var {
        assert_eq!(self.shape(w).len(), 1, "growth_integral expects a scalar rate");
        assert!(tau >= 0.0, "growth_integral needs tau >= 0");
        self.push(Op::GrowthIntegral(w, tau), Shape::vector(1), &[w])
    }

    /// Evaluates every node in order.
    pub fn forward(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            let op = self.nodes[i].op;
            if !matches!(op, Op::Leaf) {
                let value = self.eval_op(op, self.nodes[i].shape.len());
                self.nodes[i].value = Cow::Owned(value);
            }
            if self.nodes[i].value.iter().any(|v| !v.is_finite()) {
                self.evaluated = false;
                return Err(AutodiffError::NonFinite { node: i, op: op.name() });
            }
        }
        self.evaluated = true;
        Ok(())
    }

    pub fn value(&self, v: Var) -> Result<&[f64]> {
        if !self.evaluated && !matches!(self.nodes[v.0].op, Op::Leaf) {
            return Err(AutodiffError::NotEvaluated);
        }
        Ok(&self.nodes[v.0].value)
    }

    /// Value of a scalar node.
    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        let value = self.value(v)?;
        if value.len() != 1 {
            return Err(AutodiffError::NonScalarOutput {
                node: v.0,
                len: value.len(),
            });
        }
        Ok(value[0])
    }

    fn val(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    fn eval_op(&self, op: Op, len: usize) -> Vec<f64> {
        match op {
            Op::Leaf => unreachable!("leaves are not recomputed"),
            Op::MatVec(a, x) => {
                let s = self.shape(a);
                let mut out = vec![0.0; s.rows];
                matvec_into(self.val(a), s, self.val(x), &mut out);
                out
            }
            Op::MatTVec(a, y) => {
                let s = self.shape(a);
                let mut out = vec![0.0; s.cols];
                matvec_t_accumulate(self.val(a), s, self.val(y), &mut out);
                out
            }
            Op::Add(a, b) => zip_map(self.val(a), self.val(b), |x, y| x + y),
            Op::Mul(a, b) => zip_map(self.val(a), self.val(b), |x, y| x * y),
            Op::Scale(a, c) => self.val(a).iter().map(|x| c * x).collect(),
            Op::Neg(a) => self.val(a).iter().map(|x| -x).collect(),
            Op::Tanh(a) => self.val(a).iter().map(|x| x.tanh()).collect(),
            Op::TanhPrime(a) => self.val(a).iter().map(|&x| sech2(x)).collect(),
            Op::Softplus(a) => self.val(a).iter().map(|&x| softplus(x)).collect(),
            Op::Sigmoid(a) => self.val(a).iter().map(|&x| sigmoid(x)).collect(),
            Op::Log(a) => self.val(a).iter().map(|x| x.ln()).collect(),
            Op::Exp(a) => self.val(a).iter().map(|x| x.exp()).collect(),
            Op::Sum(a) => vec![self.val(a).iter().sum()],
            Op::Index(a, i) => vec![self.val(a)[i]],
            Op::Concat(a, b) => {
                let mut out = Vec::with_capacity(len);
                out.extend_from_slice(self.val(a));
                out.extend_from_slice(self.val(b));
                out
            }
            Op::GrowthIntegral(w, tau) => vec![growth_integral(self.val(w)[0], tau).0],
        }
    }

    /// Gradients of the scalar `output` with respect to every node on the
    /// tape that depends on a differentiable leaf.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if !self.evaluated {
            return Err(AutodiffError::NotEvaluated);
        }
        let out_len = self.shape(output).len();
        if out_len != 1 {
            return Err(AutodiffError::NonScalarOutput {
                node: output.0,
                len: out_len,
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, op: Op, y: &[f64], g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::MatVec(a, x) => {
                let s = self.shape(a);
                if self.needs(a) {
                    let xv = self.val(x);
                    let ga = slot(grads, a, s.len());
                    for (r, &gr) in g.iter().enumerate() {
                        axpy(gr, xv, &mut ga[r * s.cols..(r + 1) * s.cols]);
                    }
                }
                if self.needs(x) {
                    let av = self.val(a);
                    let gx = slot(grads, x, s.cols);
                    matvec_t_accumulate(av, s, g, gx);
                }
            }
            Op::MatTVec(a, yv) => {
                let s = self.shape(a);
                if self.needs(a) {
                    let yvals = self.val(yv);
                    let ga = slot(grads, a, s.len());
                    for (r, &yr) in yvals.iter().enumerate() {
                        axpy(yr, g, &mut ga[r * s.cols..(r + 1) * s.cols]);
                    }
                }
                if self.needs(yv) {
                    let av = self.val(a);
                    let gy = slot(grads, yv, s.rows);
                    for (r, out) in gy.iter_mut().enumerate() {
                        *out += dot(&av[r * s.cols..(r + 1) * s.cols], g);
                    }
                }
            }
            Op::Add(a, b) => {
                for p in [a, b] {
                    if self.needs(p) {
                        axpy(1.0, g, slot(grads, p, g.len()));
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let bv = self.val(b);
                    let ga = slot(grads, a, g.len());
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * bi;
                    }
                }
                if self.needs(b) {
                    let av = self.val(a);
                    let gb = slot(grads, b, g.len());
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * ai;
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.needs(a) {
                    axpy(c, g, slot(grads, a, g.len()));
                }
            }
            Op::Neg(a) => {
                if self.needs(a) {
                    axpy(-1.0, g, slot(grads, a, g.len()));
                }
            }
            Op::Tanh(a) => self.unary_grad(a, y, g, grads, |x, _| sech2(x)),
            Op::TanhPrime(a) => self.unary_grad(a, y, g, grads, |x, y| -2.0 * x.tanh() * y),
            Op::Softplus(a) => self.unary_grad(a, y, g, grads, |x, _| sigmoid(x)),
            Op::Sigmoid(a) => self.unary_grad(a, y, g, grads, |_, s| s * (1.0 - s)),
            Op::Log(a) => self.unary_grad(a, y, g, grads, |x, _| 1.0 / x),
            Op::Exp(a) => self.unary_grad(a, y, g, grads, |_, y| y),
            Op::Sum(a) => {
                if self.needs(a) {
                    let n = self.shape(a).len();
                    for o in slot(grads, a, n).iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Index(a, i) => {
                if self.needs(a) {
                    let n = self.shape(a).len();
                    slot(grads, a, n)[i] += g[0];
                }
            }
            Op::Concat(a, b) => {
                let na = self.shape(a).len();
                if self.needs(a) {
                    axpy(1.0, &g[..na], slot(grads, a, na));
                }
                if self.needs(b) {
                    let nb = g.len() - na;
                    axpy(1.0, &g[na..], slot(grads, b, nb));
                }
            }
            Op::GrowthIntegral(w, tau) => {
                if self.needs(w) {
                    let (_, dw) = growth_integral(self.val(w)[0], tau);
                    slot(grads, w, 1)[0] += g[0] * dw;
                }
            }
        }
    }

    /// Accumulates `g ⊙ f'(x)` into the gradient of `a`, where the closure
    /// receives the input element and the node's own output element.
    fn unary_grad(
        &self,
        a: Var,
        y: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        local: impl Fn(f64, f64) -> f64,
    ) {
        if !self.needs(a) {
            return;
        }
        let xv = self.val(a);
        let ga = slot(grads, a, g.len());
        for (((o, gi), &x), &yi) in ga.iter_mut().zip(g).zip(xv).zip(y) {
            *o += gi * local(x, yi);
        }
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when `v` does not influence
    /// the output through any differentiable path.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient with respect to `v`, materialising zeros when absent.
    pub fn wrt(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Four-lane dot product; the split accumulators let the compiler vectorise.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `out += alpha * x`.
pub fn axpy(alpha: f64, x: &[f64], out: &mut [f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// `out = A x`.
pub fn matvec_into(a: &[f64], shape: Shape, x: &[f64], out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate() {
        *o = dot(&a[r * shape.cols..(r + 1) * shape.cols], x);
    }
}

/// `out += Aᵀ y`.
pub fn matvec_t_accumulate(a: &[f64], shape: Shape, y: &[f64], out: &mut [f64]) {
    for (r, &yr) in y.iter().enumerate() {
        axpy(yr, &a[r * shape.cols..(r + 1) * shape.cols], out);
    }
}

/// `log(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    (-z.abs()).exp().ln_1p() + z.max(0.0)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `sech²(z) = 1 - tanh²(z)`.
pub fn sech2(z: f64) -> f64 {
    let a = z.abs();
    if a > 350.0 {
        return 0.0;
    }
    let e = (-2.0 * a).exp();
    4.0 * e / ((1.0 + e) * (1.0 + e))
}

/// `((e^{wτ} - 1)/w, d/dw)` with the series branch and exponent clamp.
pub fn growth_integral(w: f64, tau: f64) -> (f64, f64) {
    if w.abs() < GROWTH_SERIES_THRESHOLD {
        let wt = w * tau;
        let value = tau * (1.0 + wt / 2.0 + wt * wt / 6.0);
        let dw = tau * tau * (0.5 + wt / 3.0);
        return (value, dw);
    }
    let mut exponent = w * tau;
    if exponent > GROWTH_EXPONENT_CAP {
        if !GROWTH_CLAMP_WARNED.swap(true, Ordering::Relaxed) {
            log::warn!("exponential hazard: w*tau = {exponent:.3} clamped at {GROWTH_EXPONENT_CAP}");
        }
        exponent = GROWTH_EXPONENT_CAP;
        let e = exponent.exp();
        return ((e - 1.0) / w, -(e - 1.0) / (w * w));
    }
    let em1 = exponent.exp_m1();
    let value = em1 / w;
    // d/dw (e^{wτ} - 1)/w = (wτ e^{wτ} - (e^{wτ} - 1)) / w²
    let dw = (exponent * (em1 + 1.0) - em1) / (w * w);
    (value, dw)
}

/// Activation functions usable in layers passed to [`derivative_subgraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Softplus,
    Exp,
    /// Has no derivative primitive on the tape.
    Sigmoid,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Activation::Tanh => "tanh",
            Activation::Softplus => "softplus",
            Activation::Exp => "exp",
            Activation::Sigmoid => "sigmoid",
        };
        f.write_str(name)
    }
}

impl Activation {
    pub fn apply(self, tape: &mut Tape<'_>, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Softplus => tape.softplus(x),
            Activation::Exp => tape.exp(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }

    /// Node computing `f'(x)` elementwise.
    pub fn derivative(self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        match self {
            Activation::Tanh => Ok(tape.tanh_prime(x)),
            Activation::Softplus => Ok(tape.sigmoid(x)),
            Activation::Exp => Ok(tape.exp(x)),
            Activation::Sigmoid => Err(AutodiffError::MissingDerivative(self)),
        }
    }
}

/// A dense layer `f(W y + b)` whose parameters already live on the tape.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub weight: Var,
    pub bias: Var,
    pub activation: Activation,
}

/// What [`derivative_subgraph`] needs to know about one evaluated layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerTrace {
    pub weight: Var,
    pub pre_activation: Var,
    pub activation: Activation,
}

/// Appends `Y⁽ʲ⁾ = f⁽ʲ⁾(W⁽ʲ⁾ Y⁽ʲ⁻¹⁾ + b⁽ʲ⁾)` for every layer and returns the
/// output node together with the per-layer trace.
pub fn feedforward(tape: &mut Tape<'_>, input: Var, layers: &[Dense]) -> (Var, Vec<LayerTrace>) {
    let mut y = input;
    let mut trace = Vec::with_capacity(layers.len());
    for layer in layers {
        let wy = tape.matvec(layer.weight, y);
        let pre = tape.add(wy, layer.bias);
        y = layer.activation.apply(tape, pre);
        trace.push(LayerTrace {
            weight: layer.weight,
            pre_activation: pre,
            activation: layer.activation,
        });
    }
    (y, trace)
}

/// Appends the backward recursion
/// `y⁽ʲ⁻¹⁾ = W⁽ʲ⁾ᵀ (f'⁽ʲ⁾(a⁽ʲ⁾) ⊙ y⁽ʲ⁾)`, starting from `y⁽ᴸ⁾ = 1`, and
/// returns the node holding `∂Y⁽ᴸ⁾/∂[Y⁽⁰⁾]_input_index`.
///
/// The network output must be a scalar. The returned node is an ordinary
/// tape expression, so it can appear inside a loss that is differentiated
/// again.
pub fn derivative_subgraph(tape: &mut Tape<'_>, trace: &[LayerTrace], input_index: usize) -> Result<Var> {
    let last = trace.last().expect("derivative_subgraph needs at least one layer");
    let out_len = tape.shape(last.pre_activation).len();
    assert_eq!(out_len, 1, "derivative_subgraph expects a scalar network output");
    let mut y = tape.constant(Shape::vector(1), vec![1.0]);
    for layer in trace.iter().rev() {
        let fprime = layer.activation.derivative(tape, layer.pre_activation)?;
        let g = tape.mul(fprime, y);
        y = tape.matvec_t(layer.weight, g);
    }
    assert!(input_index < tape.shape(y).len(), "input index out of range");
    Ok(tape.index(y, input_index))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6 * x.abs().max(1.0);
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn scalar_grad(build: impl Fn(&mut Tape<'_>, Var) -> Var, x: f64) -> (f64, f64) {
        let mut tape = Tape::new();
        let v = tape.variable(Shape::vector(1), vec![x]);
        let out = build(&mut tape, v);
        tape.forward().unwrap();
        let g = tape.backward(out).unwrap();
        (tape.scalar_value(out).unwrap(), g.wrt(v, 1)[0])
    }

    #[test]
    fn basic_values() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(0.0f64.tanh(), 0.0);
        assert!((softplus(50.0) - 50.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert!((sech2(0.3) - (1.0 - 0.3f64.tanh().powi(2))).abs() < 1e-15);
        assert!(sech2(25.0) > 0.0);
    }

    #[test]
    fn unary_primitives_match_finite_differences() {
        type Build = fn(&mut Tape<'_>, Var) -> Var;
        let cases: Vec<(&str, Build, fn(f64) -> f64)> = vec![
            ("tanh", |t, v| t.tanh(v), |x| x.tanh()),
            ("tanh_prime", |t, v| t.tanh_prime(v), sech2),
            ("softplus", |t, v| t.softplus(v), softplus),
            ("sigmoid", |t, v| t.sigmoid(v), sigmoid),
            ("exp", |t, v| t.exp(v), |x| x.exp()),
            ("neg", |t, v| t.neg(v), |x| -x),
            ("scale", |t, v| t.scale(v, 2.5), |x| 2.5 * x),
        ];
        for (name, build, f) in cases {
            for i in 0..21 {
                let x = -3.0 + 0.3 * i as f64;
                let (value, grad) = scalar_grad(build, x);
                assert!((value - f(x)).abs() < 1e-14, "{name} value at {x}");
                let fd = central(f, x);
                let err = (grad - fd).abs() / fd.abs().max(1e-8);
                assert!(err < 1e-7 || (grad - fd).abs() < 1e-9, "{name} at {x}: {grad} vs {fd}");
            }
        }
        for i in 1..20 {
            let x = 0.15 * i as f64;
            let (_, grad) = scalar_grad(|t, v| t.log(v), x);
            assert!((grad - 1.0 / x).abs() < 1e-12);
        }
    }

    #[test]
    fn softplus_and_tanh_gradients_at_zero() {
        assert_eq!(scalar_grad(|t, v| t.softplus(v), 0.0).1, 0.5);
        assert_eq!(scalar_grad(|t, v| t.tanh(v), 0.0).1, 1.0);
    }

    #[test]
    fn product_of_tanh() {
        // z = a * tanh(b)
        let mut tape = Tape::new();
        let a = tape.variable(Shape::vector(1), vec![2.0]);
        let b = tape.variable(Shape::vector(1), vec![0.5]);
        let tb = tape.tanh(b);
        let z = tape.mul(a, tb);
        tape.forward().unwrap();
        let g = tape.backward(z).unwrap();
        // central differences, h = 1e-6: (0.4621172, 1.5728955)
        assert!((g.wrt(a, 1)[0] - 0.4621172).abs() < 1e-6);
        assert!((g.wrt(b, 1)[0] - 1.5728955).abs() < 1e-6);
    }

    #[test]
    fn matvec_gradients() {
        // f = sum(tanh(A x)) ⋅ checked entrywise against finite differences
        let a0 = vec![0.3, -0.2, 0.5, 0.1, 0.7, -0.4];
        let x0 = vec![0.9, -1.1, 0.4];
        let eval = |a: &[f64], x: &[f64]| -> f64 { (0..2).map(|r| dot(&a[r * 3..r * 3 + 3], x).tanh()).sum() };
        let mut tape = Tape::new();
        let a = tape.variable(Shape::matrix(2, 3), a0.clone());
        let x = tape.variable(Shape::vector(3), x0.clone());
        let ax = tape.matvec(a, x);
        let t = tape.tanh(ax);
        let f = tape.sum(t);
        tape.forward().unwrap();
        let g = tape.backward(f).unwrap();
        let ga = g.wrt(a, 6);
        for k in 0..6 {
            let fd = central(
                |v| {
                    let mut aa = a0.clone();
                    aa[k] = v;
                    eval(&aa, &x0)
                },
                a0[k],
            );
            assert!((ga[k] - fd).abs() < 1e-8);
        }
        let gx = g.wrt(x, 3);
        for k in 0..3 {
            let fd = central(
                |v| {
                    let mut xx = x0.clone();
                    xx[k] = v;
                    eval(&a0, &xx)
                },
                x0[k],
            );
            assert!((gx[k] - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn matvec_t_gradients() {
        let a0 = vec![0.3, -0.2, 0.5, 0.1, 0.7, -0.4];
        let y0 = vec![0.6, -0.8];
        let eval = |a: &[f64], y: &[f64]| -> f64 { (0..3).map(|c| softplus(a[c] * y[0] + a[3 + c] * y[1])).sum() };
        let mut tape = Tape::new();
        let a = tape.variable(Shape::matrix(2, 3), a0.clone());
        let y = tape.variable(Shape::vector(2), y0.clone());
        let z = tape.matvec_t(a, y);
        let s = tape.softplus(z);
        let f = tape.sum(s);
        tape.forward().unwrap();
        assert!((tape.scalar_value(f).unwrap() - eval(&a0, &y0)).abs() < 1e-14);
        let g = tape.backward(f).unwrap();
        let ga = g.wrt(a, 6);
        for k in 0..6 {
            let fd = central(
                |v| {
                    let mut aa = a0.clone();
                    aa[k] = v;
                    eval(&aa, &y0)
                },
                a0[k],
            );
            assert!((ga[k] - fd).abs() < 1e-8);
        }
        let gy = g.wrt(y, 2);
        for k in 0..2 {
            let fd = central(
                |v| {
                    let mut yy = y0.clone();
                    yy[k] = v;
                    eval(&a0, &yy)
                },
                y0[k],
            );
            assert!((gy[k] - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn growth_integral_branches() {
        let (v, _) = growth_integral(1.0, 1.0);
        assert!((v - (std::f64::consts::E - 1.0)).abs() < 1e-14);
        let (v, _) = growth_integral(1e-12, 2.0);
        assert!((v - 2.0).abs() < 1e-9);
        for &(w, tau) in &[(0.7, 1.3), (-2.0, 0.4), (3e-8, 2.0), (-5e-9, 1.5), (0.01, 10.0)] {
            let (_, dw) = growth_integral(w, tau);
            let h = 1e-6;
            let fd = (growth_integral(w + h, tau).0 - growth_integral(w - h, tau).0) / (2.0 * h);
            assert!(
                (dw - fd).abs() / fd.abs().max(1e-8) < 1e-6,
                "w={w} tau={tau}: {dw} vs {fd}"
            );
        }
    }

    #[test]
    fn non_finite_is_reported_with_node() {
        let mut tape = Tape::new();
        let x = tape.constant(Shape::vector(1), vec![-1.0]);
        let l = tape.log(x);
        let err = tape.forward().unwrap_err();
        assert_eq!(
            err,
            AutodiffError::NonFinite {
                node: l.index(),
                op: "log"
            }
        );
    }

    #[test]
    fn backward_rejects_vector_output() {
        let mut tape = Tape::new();
        let x = tape.variable(Shape::vector(3), vec![1.0, 2.0, 3.0]);
        let t = tape.tanh(x);
        tape.forward().unwrap();
        assert!(matches!(
            tape.backward(t),
            Err(AutodiffError::NonScalarOutput { len: 3, .. })
        ));
    }

    #[test]
    fn backward_requires_forward() {
        let mut tape = Tape::new();
        let x = tape.variable(Shape::vector(1), vec![1.0]);
        let t = tape.tanh(x);
        assert!(matches!(tape.backward(t), Err(AutodiffError::NotEvaluated)));
    }

    #[test]
    fn one_layer_derivative() {
        // Z = softplus(w τ + b), w = 1, b = 0, τ = 0
        let mut tape = Tape::new();
        let input = tape.constant(Shape::vector(1), vec![0.0]);
        let w = tape.variable(Shape::matrix(1, 1), vec![1.0]);
        let b = tape.variable(Shape::vector(1), vec![0.0]);
        let (_, trace) = feedforward(
            &mut tape,
            input,
            &[Dense {
                weight: w,
                bias: b,
                activation: Activation::Softplus,
            }],
        );
        let dz = derivative_subgraph(&mut tape, &trace, 0).unwrap();
        tape.forward().unwrap();
        assert_eq!(tape.scalar_value(dz).unwrap(), 0.5);
    }

    #[test]
    fn missing_derivative_is_a_construction_error() {
        let mut tape = Tape::new();
        let input = tape.constant(Shape::vector(1), vec![0.0]);
        let w = tape.variable(Shape::matrix(1, 1), vec![1.0]);
        let b = tape.variable(Shape::vector(1), vec![0.0]);
        let (_, trace) = feedforward(
            &mut tape,
            input,
            &[Dense {
                weight: w,
                bias: b,
                activation: Activation::Sigmoid,
            }],
        );
        assert_eq!(
            derivative_subgraph(&mut tape, &trace, 0).unwrap_err(),
            AutodiffError::MissingDerivative(Activation::Sigmoid)
        );
    }

    #[test]
    fn identical_tapes_give_identical_gradients() {
        let build = || {
            let mut tape = Tape::new();
            let a = tape.variable(Shape::matrix(2, 2), vec![0.1, 0.2, -0.3, 0.4]);
            let x = tape.constant(Shape::vector(2), vec![1.5, -0.5]);
            let ax = tape.matvec(a, x);
            let t = tape.tanh(ax);
            let s = tape.sum(t);
            tape.forward().unwrap();
            tape.backward(s).unwrap().wrt(a, 4)
        };
        let g1 = build();
        let g2 = build();
        assert_eq!(
            g1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            g2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
