//! Reverse-mode automatic differentiation over 2-D tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes created from
//! constants (or from inputs that do not require a gradient) never receive a
//! gradient, so frozen parameters and images cost nothing in the backward
//! pass.

use std::sync::Arc;

use crate::scalar::Scalar;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Unary<T> {
    Relu,
    Gelu,
    Sigmoid,
    Softplus,
    Exp,
    Sqrt,
    Recip,
    Square,
    /// `ln(max(x, eps))`
    LogClamp(T),
    /// `max(ln σ(x), ln_eps)`, computed without forming σ(x).
    LogSigmoidClamp(T),
}

/// Column-space linear map applied to every row: `out[r][j] = Σ w · x[r][i]`.
#[derive(Clone, Debug)]
pub struct SparseMap<T> {
    pub in_cols: usize,
    pub taps: Vec<Vec<(usize, T)>>,
}

impl<T: Scalar> SparseMap<T> {
    pub fn out_cols(&self) -> usize {
        self.taps.len()
    }

    pub fn apply(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.cols(), self.in_cols, "sparse map input width");
        let mut out = Tensor::zeros(x.rows(), self.out_cols());
        for r in 0..x.rows() {
            let xr = x.row(r);
            let or = out.row_mut(r);
            for (o, taps) in or.iter_mut().zip(&self.taps) {
                let mut acc = T::zero();
                for &(i, w) in taps {
                    acc += w * xr[i];
                }
                *o = acc;
            }
        }
        out
    }

    fn apply_transpose(&self, dy: &Tensor<T>, dx: &mut Tensor<T>) {
        for r in 0..dy.rows() {
            let dyr = dy.row(r).to_vec();
            let dxr = dx.row_mut(r);
            for (g, taps) in dyr.iter().zip(&self.taps) {
                for &(i, w) in taps {
                    dxr[i] += w * *g;
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Unary(Var, Unary<T>),
    /// Derivative stored at forward time.
    Gelu(Var, Vec<T>),
    /// Partials in logits and targets stored at forward time.
    BceLogits(Var, Var, Box<(Vec<T>, Vec<T>)>),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    MaskedSoftmaxRows(Var),
    MaskedLogSumExpRows(Var, Arc<Vec<bool>>),
    NormalizeRows(Var, T),
    Norm(Var),
    Gather(Var, Arc<Vec<usize>>),
    ConcatRows(Vec<Var>),
    Sparse(Var, Arc<SparseMap<T>>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn gelu<T: Scalar>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::half();
    let one = T::one();
    let u = c * (x + k * x * x * x);
    let e = (-(u + u).abs()).exp();
    let th = ((one - e) / (one + e)).copysign(u);
    let y = half * x * (one + th);
    let du = c * (one + T::of(3.0) * k * x * x);
    let dy = half * (one + th) + half * x * (one - th * th) * du;
    (y, dy)
}

/// Value of the clamped soft-target BCE and its partials in `x` and `y`,
/// with a single exponential.
fn bce_terms<T: Scalar>(x: T, y: T, ln_eps: T) -> (T, T, T) {
    let e = (-x.abs()).exp();
    let l = e.ln_1p();
    let lp = -((-x).max(T::zero()) + l);
    let ln = -(x.max(T::zero()) + l);
    let (s_pos, s_neg) = if x >= T::zero() {
        (T::one() / (T::one() + e), e / (T::one() + e))
    } else {
        (e / (T::one() + e), T::one() / (T::one() + e))
    };
    let (lpc, dlp) = if lp > ln_eps { (lp, s_neg) } else { (ln_eps, T::zero()) };
    let (lnc, dln) = if ln > ln_eps { (ln, -s_pos) } else { (ln_eps, T::zero()) };
    let one_y = T::one() - y;
    (-(y * lpc + one_y * lnc), -(y * dlp + one_y * dln), lnc - lpc)
}

pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Unary<T> {
    fn forward(self, x: T) -> T {
        match self {
            Unary::Relu => x.max(T::zero()),
            Unary::Gelu => gelu(x).0,
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
            Unary::Sqrt => x.sqrt(),
            Unary::Recip => x.recip(),
            Unary::Square => x * x,
            Unary::LogClamp(eps) => x.max(eps).ln(),
            Unary::LogSigmoidClamp(ln_eps) => (-softplus(-x)).max(ln_eps),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: T, y: T) -> T {
        match self {
            Unary::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Unary::Gelu => gelu(x).1,
            Unary::Sigmoid => y * (T::one() - y),
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
            Unary::Sqrt => T::half() / y,
            Unary::Recip => -y * y,
            Unary::Square => x + x,
            Unary::LogClamp(eps) => {
                if x > eps {
                    x.recip()
                } else {
                    T::zero()
                }
            }
            Unary::LogSigmoidClamp(ln_eps) => {
                if -softplus(-x) > ln_eps {
                    sigmoid(-x)
                } else {
                    T::zero()
                }
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable input: gradients flow into it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant input: never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Constant copy of a node's current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.rows(), "matmul {:?} x {:?}", av.shape(), bv.shape());
        let mut out = Tensor::zeros(av.rows(), bv.cols());
        gemm_nn(av, bv, &mut out);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols(), "matmul_nt {:?} x {:?}ᵀ", av.shape(), bv.shape());
        let mut out = Tensor::zeros(av.rows(), bv.rows());
        gemm_nt(av, bv, &mut out);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMulNT(a, b), rg)
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "{op}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "div");
        let out = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Div(a, b), rg)
    }

    /// `x (m×n) + r (1×n)` broadcast over rows.
    pub fn add_row(&mut self, x: Var, r: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(r));
        assert_eq!((1, xv.cols()), rv.shape(), "add_row");
        let mut out = xv.clone();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(&[x, r]);
        self.push(out, Op::AddRow(x, r), rg)
    }

    /// `x (m×n) + c (m×1)` broadcast over columns.
    pub fn add_col(&mut self, x: Var, c: Var) -> Var {
        let (xv, cv) = (self.value(x), self.value(c));
        assert_eq!((xv.rows(), 1), cv.shape(), "add_col");
        let mut out = xv.clone();
        for i in 0..out.rows() {
            let b = cv.data()[i];
            for o in out.row_mut(i) {
                *o += b;
            }
        }
        let rg = self.rg(&[x, c]);
        self.push(out, Op::AddCol(x, c), rg)
    }

    pub fn mul_row(&mut self, x: Var, r: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(r));
        assert_eq!((1, xv.cols()), rv.shape(), "mul_row");
        let mut out = xv.clone();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(rv.data()) {
                *o *= b;
            }
        }
        let rg = self.rg(&[x, r]);
        self.push(out, Op::MulRow(x, r), rg)
    }

    pub fn mul_col(&mut self, x: Var, c: Var) -> Var {
        let (xv, cv) = (self.value(x), self.value(c));
        assert_eq!((xv.rows(), 1), cv.shape(), "mul_col");
        let mut out = xv.clone();
        for i in 0..out.rows() {
            let b = cv.data()[i];
            for o in out.row_mut(i) {
                *o *= b;
            }
        }
        let rg = self.rg(&[x, c]);
        self.push(out, Op::MulCol(x, c), rg)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v + s);
        let rg = self.rg(&[x]);
        self.push(out, Op::AddScalar(x), rg)
    }

    pub fn unary(&mut self, x: Var, f: Unary<T>) -> Var {
        if let Unary::Gelu = f {
            return self.gelu(x);
        }
        let out = self.value(x).map(|v| f.forward(v));
        let rg = self.rg(&[x]);
        self.push(out, Op::Unary(x, f), rg)
    }

    /// Elementwise `-[y·max(ln σ(x), c) + (1-y)·max(ln σ(-x), c)]` for
    /// logits `x`, probabilities `y` and floor `c = ln_eps`.
    pub fn bce_with_logits(&mut self, x: Var, y: Var, ln_eps: T) -> Var {
        self.same_shape(x, y, "bce_with_logits");
        let (xv, yv) = (self.value(x), self.value(y));
        let n = xv.len();
        let (mut out, mut dx, mut dy) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for (&xi, &yi) in xv.data().iter().zip(yv.data()) {
            let (v, gx, gy) = bce_terms(xi, yi, ln_eps);
            out.push(v);
            dx.push(gx);
            dy.push(gy);
        }
        let out = Tensor::from_vec(xv.rows(), xv.cols(), out).expect("same shape");
        let rg = self.rg(&[x, y]);
        self.push(out, Op::BceLogits(x, y, Box::new((dx, dy))), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (mut out, mut d) = (Vec::with_capacity(xv.len()), Vec::with_capacity(xv.len()));
        for &v in xv.data() {
            let (y, dy) = gelu(v);
            out.push(y);
            d.push(dy);
        }
        let out = Tensor::from_vec(xv.rows(), xv.cols(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x, d), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        if n == 0 {
            return s;
        }
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Per-row sum, `(m×n) → (m×1)`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::from_fn(xv.rows(), 1, |r, _| xv.row(r).iter().copied().sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::SumRows(x), rg)
    }

    /// Per-column sum, `(m×n) → (1×n)`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(1, xv.cols());
        for r in 0..xv.rows() {
            for (o, &v) in out.data_mut().iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::SumCols(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = softmax_rows_masked(self.value(x), None);
        let rg = self.rg(&[x]);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::LogSoftmaxRows(x), rg)
    }

    /// Row softmax over entries where `mask` is true; masked entries are exactly 0.
    /// A row with no unmasked entry yields all zeros.
    pub fn masked_softmax_rows(&mut self, x: Var, mask: Arc<Vec<bool>>) -> Var {
        assert_eq!(self.value(x).len(), mask.len(), "masked_softmax_rows mask size");
        let out = softmax_rows_masked(self.value(x), Some(&mask));
        let rg = self.rg(&[x]);
        self.push(out, Op::MaskedSoftmaxRows(x), rg)
    }

    /// `log Σ_{j: mask} exp x[r][j]` per row, `(m×n) → (m×1)`. Every row needs
    /// at least one unmasked entry.
    pub fn masked_logsumexp_rows(&mut self, x: Var, mask: Arc<Vec<bool>>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), mask.len(), "masked_logsumexp_rows mask size");
        let n = xv.cols();
        let out = Tensor::from_fn(xv.rows(), 1, |r, _| {
            let row = xv.row(r);
            let mrow = &mask[r * n..(r + 1) * n];
            let m = row
                .iter()
                .zip(mrow)
                .filter(|(_, &k)| k)
                .fold(T::neg_infinity(), |a, (&b, _)| a.max(b));
            let s: T = row
                .iter()
                .zip(mrow)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| (v - m).exp())
                .sum();
            m + s.ln()
        });
        let rg = self.rg(&[x]);
        self.push(out, Op::MaskedLogSumExpRows(x, mask), rg)
    }

    /// `x[r] / max(‖x[r]‖, eps)`
    pub fn normalize_rows(&mut self, x: Var, eps: T) -> Var {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::NormalizeRows(x, eps), rg)
    }

    /// Euclidean norm of the whole tensor; the gradient at the origin is taken as 0.
    pub fn norm(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sq_norm().sqrt());
        let rg = self.rg(&[x]);
        self.push(out, Op::Norm(x), rg)
    }

    /// `out.data[i] = x.data[index[i]]`, shaped `(rows, cols)`.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, rows: usize, cols: usize) -> Var {
        assert_eq!(index.len(), rows * cols, "gather index size");
        let xv = self.value(x);
        let data = index.iter().map(|&i| xv.data()[i]).collect();
        let out = Tensor::from_vec(rows, cols, data).expect("gather shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Gather(x, index), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = self.value(x).shape();
        let index: Vec<usize> = (0..c)
            .flat_map(|j| (0..r).map(move |i| i * c + j))
            .collect();
        self.gather(x, Arc::new(index), c, r)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let n = self.value(x).len();
        assert_eq!(n, rows * cols, "reshape size");
        self.gather(x, Arc::new((0..n).collect()), rows, cols)
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let c = self.value(x).cols();
        self.gather(x, Arc::new((start * c..end * c).collect()), end - start, c)
    }

    /// Repeat a `(1×n)` row `m` times.
    pub fn repeat_row(&mut self, x: Var, m: usize) -> Var {
        let (r, n) = self.value(x).shape();
        assert_eq!(r, 1, "repeat_row expects a single row");
        self.gather(x, Arc::new((0..m).flat_map(|_| 0..n).collect()), m, n)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows width");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let out = Tensor::from_vec(rows, cols, data).expect("concat shape");
        let rg = self.rg(parts);
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn sparse(&mut self, x: Var, map: Arc<SparseMap<T>>) -> Var {
        let out = map.apply(self.value(x));
        let rg = self.rg(&[x]);
        self.push(out, Op::Sparse(x, map), rg)
    }

    /// `x · W + b` with `W: (in, out)` and `b: (1, out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, out: Var) -> Grads<T> {
        assert_eq!(self.value(out).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        // Lazily-allocated accumulator for an input.
        let acc = |v: Var, grads: &mut [Option<Tensor<T>>], f: &mut dyn FnMut(&mut Tensor<T>)| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = &mut grads[v.0];
            if slot.is_none() {
                let (r, c) = self.nodes[v.0].value.shape();
                *slot = Some(Tensor::zeros(r, c));
            }
            f(slot.as_mut().unwrap());
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, grads, &mut |da| gemm_nt(g, bv, da));
                acc(*b, grads, &mut |db| gemm_tn(av, g, db));
            }
            Op::MatMulNT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, grads, &mut |da| gemm_nn(g, bv, da));
                acc(*b, grads, &mut |db| gemm_tn(g, av, db));
            }
            Op::Add(a, b) => {
                acc(*a, grads, &mut |da| da.add_assign(g));
                acc(*b, grads, &mut |db| db.add_assign(g));
            }
            Op::Sub(a, b) => {
                acc(*a, grads, &mut |da| da.add_assign(g));
                acc(*b, grads, &mut |db| {
                    for (d, &v) in db.data_mut().iter_mut().zip(g.data()) {
                        *d -= v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, grads, &mut |da| {
                    for ((d, &gv), &o) in da.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *d += gv * o;
                    }
                });
                acc(*b, grads, &mut |db| {
                    for ((d, &gv), &o) in db.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *d += gv * o;
                    }
                });
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                acc(*a, grads, &mut |da| {
                    for ((d, &gv), &o) in da.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *d += gv / o;
                    }
                });
                acc(*b, grads, &mut |db| {
                    for (((d, &gv), &o), &yv) in db
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(bv.data())
                        .zip(y.data())
                    {
                        *d -= gv * yv / o;
                    }
                });
            }
            Op::AddRow(x, r) => {
                acc(*x, grads, &mut |dx| dx.add_assign(g));
                acc(*r, grads, &mut |dr| {
                    for i in 0..g.rows() {
                        for (d, &v) in dr.data_mut().iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                });
            }
            Op::AddCol(x, c) => {
                acc(*x, grads, &mut |dx| dx.add_assign(g));
                acc(*c, grads, &mut |dc| {
                    for i in 0..g.rows() {
                        dc.data_mut()[i] += g.row(i).iter().copied().sum::<T>();
                    }
                });
            }
            Op::MulRow(x, r) => {
                let (xv, rv) = (self.value(*x), self.value(*r));
                acc(*x, grads, &mut |dx| {
                    for i in 0..g.rows() {
                        for ((d, &gv), &s) in dx.row_mut(i).iter_mut().zip(g.row(i)).zip(rv.data()) {
                            *d += gv * s;
                        }
                    }
                });
                acc(*r, grads, &mut |dr| {
                    for i in 0..g.rows() {
                        for ((d, &gv), &xv) in dr.data_mut().iter_mut().zip(g.row(i)).zip(xv.row(i)) {
                            *d += gv * xv;
                        }
                    }
                });
            }
            Op::MulCol(x, c) => {
                let (xv, cv) = (self.value(*x), self.value(*c));
                acc(*x, grads, &mut |dx| {
                    for i in 0..g.rows() {
                        let s = cv.data()[i];
                        for (d, &gv) in dx.row_mut(i).iter_mut().zip(g.row(i)) {
                            *d += gv * s;
                        }
                    }
                });
                acc(*c, grads, &mut |dc| {
                    for i in 0..g.rows() {
                        let s: T = g.row(i).iter().zip(xv.row(i)).map(|(&a, &b)| a * b).sum();
                        dc.data_mut()[i] += s;
                    }
                });
            }
            Op::Scale(x, s) => {
                acc(*x, grads, &mut |dx| {
                    for (d, &gv) in dx.data_mut().iter_mut().zip(g.data()) {
                        *d += gv * *s;
                    }
                });
            }
            Op::AddScalar(x) => acc(*x, grads, &mut |dx| dx.add_assign(g)),
            Op::BceLogits(x, t, partials) => {
                let (px, pt) = &**partials;
                acc(*x, grads, &mut |dx| {
                    for ((d, &gv), &p) in dx.data_mut().iter_mut().zip(g.data()).zip(px) {
                        *d += gv * p;
                    }
                });
                acc(*t, grads, &mut |dt| {
                    for ((d, &gv), &p) in dt.data_mut().iter_mut().zip(g.data()).zip(pt) {
                        *d += gv * p;
                    }
                });
            }
            Op::Gelu(x, deriv) => {
                acc(*x, grads, &mut |dx| {
                    for ((d, &gv), &p) in dx.data_mut().iter_mut().zip(g.data()).zip(deriv) {
                        *d += gv * p;
                    }
                });
            }
            Op::Unary(x, f) => {
                let xv = self.value(*x);
                acc(*x, grads, &mut |dx| {
                    for (((d, &gv), &xi), &yi) in dx
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(xv.data())
                        .zip(y.data())
                    {
                        *d += gv * f.derivative(xi, yi);
                    }
                });
            }
            Op::SumAll(x) => {
                let s = g.item();
                acc(*x, grads, &mut |dx| {
                    for d in dx.data_mut() {
                        *d += s;
                    }
                });
            }
            Op::SumRows(x) => {
                acc(*x, grads, &mut |dx| {
                    for i in 0..dx.rows() {
                        let s = g.data()[i];
                        for d in dx.row_mut(i) {
                            *d += s;
                        }
                    }
                });
            }
            Op::SumCols(x) => {
                acc(*x, grads, &mut |dx| {
                    for i in 0..dx.rows() {
                        for (d, &s) in dx.row_mut(i).iter_mut().zip(g.data()) {
                            *d += s;
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) | Op::MaskedSoftmaxRows(x) => {
                acc(*x, grads, &mut |dx| {
                    for i in 0..y.rows() {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((d, &yv), &gv) in dx.row_mut(i).iter_mut().zip(yr).zip(gr) {
                            *d += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(x) => {
                acc(*x, grads, &mut |dx| {
                    for i in 0..y.rows() {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let gs: T = gr.iter().copied().sum();
                        for ((d, &yv), &gv) in dx.row_mut(i).iter_mut().zip(yr).zip(gr) {
                            *d += gv - yv.exp() * gs;
                        }
                    }
                });
            }
            Op::MaskedLogSumExpRows(x, mask) => {
                let xv = self.value(*x);
                let n = xv.cols();
                acc(*x, grads, &mut |dx| {
                    for i in 0..xv.rows() {
                        let lse = y.data()[i];
                        let gi = g.data()[i];
                        let mrow = &mask[i * n..(i + 1) * n];
                        for ((d, &xv), &m) in dx.row_mut(i).iter_mut().zip(xv.row(i)).zip(mrow) {
                            if m {
                                *d += gi * (xv - lse).exp();
                            }
                        }
                    }
                });
            }
            Op::NormalizeRows(x, eps) => {
                let xv = self.value(*x);
                acc(*x, grads, &mut |dx| {
                    for i in 0..xv.rows() {
                        let n = xv.row(i).iter().map(|&v| v * v).sum::<T>().sqrt();
                        let (yr, gr) = (y.row(i), g.row(i));
                        if n > *eps {
                            let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                            for ((d, &yv), &gv) in dx.row_mut(i).iter_mut().zip(yr).zip(gr) {
                                *d += (gv - yv * dot) / n;
                            }
                        } else {
                            for (d, &gv) in dx.row_mut(i).iter_mut().zip(gr) {
                                *d += gv / *eps;
                            }
                        }
                    }
                });
            }
            Op::Norm(x) => {
                let xv = self.value(*x);
                let n = y.item();
                let s = g.item();
                acc(*x, grads, &mut |dx| {
                    if n > T::zero() {
                        for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                            *d += s * v / n;
                        }
                    }
                });
            }
            Op::Gather(x, index) => {
                acc(*x, grads, &mut |dx| {
                    let dd = dx.data_mut();
                    for (&i, &gv) in index.iter().zip(g.data()) {
                        dd[i] += gv;
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let gs = &g.data()[offset..offset + n];
                    acc(p, grads, &mut |dp| {
                        for (d, &gv) in dp.data_mut().iter_mut().zip(gs) {
                            *d += gv;
                        }
                    });
                    offset += n;
                }
            }
            Op::Sparse(x, map) => {
                acc(*x, grads, &mut |dx| map.apply_transpose(g, dx));
            }
        }
    }
}

fn softmax_rows_masked<T: Scalar>(x: &Tensor<T>, mask: Option<&[bool]>) -> Tensor<T> {
    let mut out = x.clone();
    let n = x.cols();
    for r in 0..out.rows() {
        let mrow = mask.map(|m| &m[r * n..(r + 1) * n]);
        let keep = |j: usize| mrow.is_none_or(|m| m[j]);
        let row = out.row_mut(r);
        let mut m = T::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if keep(j) {
                m = m.max(v);
            }
        }
        if m == T::neg_infinity() {
            row.iter_mut().for_each(|v| *v = T::zero());
            continue;
        }
        let mut s = T::zero();
        for (j, v) in row.iter_mut().enumerate() {
            if keep(j) {
                *v = (*v - m).exp();
                s += *v;
            } else {
                *v = T::zero();
            }
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}
