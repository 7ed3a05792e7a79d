//! Reverse-mode differentiation over a fixed set of matrix operations.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles during a
//! forward evaluation. [`Tape::backward`] then walks the record in reverse and
//! accumulates the gradient of a scalar output with respect to every node that
//! depends on a parameter leaf.
//!
//! Shape mismatches inside tape operations are programming errors and panic;
//! data-dependent failures (zero-norm rows) are reported as [`Error`]s.

use std::cell::RefCell;

use super::matrix::{gemm, Matrix};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Added to each row norm by [`Tape::normalize_rows_safe`].
pub const SAFE_NORM_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    NormalizeRows { x: Var, norms: Vec<f64>, eps: f64 },
    StandardizeRows { x: Var, inv_std: Vec<f64> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    PickPerRow(Var, Vec<usize>),
    Mse(Var, Var),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward evaluation. Confined to a single thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the output with respect to `v`, or `None` if `v` does not
    /// influence the output through any differentiable path.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but returns an explicit zero matrix of `shape`
    /// when no gradient reached `v`.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a differentiable leaf.
    pub fn param(&self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a leaf that receives no gradient.
    pub fn constant(&self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Matrix {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        let m = &nodes[v.0].value;
        assert_eq!(m.shape(), (1, 1), "scalar() on non-scalar node");
        m.get(0, 0)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push(&self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    fn unary(&self, x: Var, f: impl FnOnce(&Matrix) -> Matrix, op: Op) -> Var {
        let value = f(&self.nodes.borrow()[x.0].value);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    fn binary(&self, a: Var, b: Var, f: impl FnOnce(&Matrix, &Matrix) -> Matrix, op: Op) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value, &nodes[b.0].value)
        };
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| {
                assert_eq!(x.cols(), y.rows(), "matmul {:?} x {:?}", x.shape(), y.shape());
                gemm(x, false, y, false)
            },
            Op::MatMul(a, b),
        )
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| {
                assert_eq!(x.cols(), y.cols(), "matmul_nt {:?} x {:?}ᵀ", x.shape(), y.shape());
                gemm(x, false, y, true)
            },
            Op::MatMulNT(a, b),
        )
    }

    pub fn transpose(&self, x: Var) -> Var {
        self.unary(x, Matrix::transpose, Op::Transpose(x))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.zip_map(y, |p, q| p + q), Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.zip_map(y, |p, q| p - q), Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.zip_map(y, |p, q| p * q), Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.zip_map(y, |p, q| p / q), Op::Div(a, b))
    }

    /// Adds a 1×C row to every row of an R×C matrix.
    pub fn add_row(&self, x: Var, row: Var) -> Var {
        self.binary(
            x,
            row,
            |m, r| {
                assert_eq!((1, m.cols()), r.shape(), "add_row shape");
                let mut out = m.clone();
                for i in 0..m.rows() {
                    for (o, b) in out.row_mut(i).iter_mut().zip(r.data()) {
                        *o += b;
                    }
                }
                out
            },
            Op::AddRow(x, row),
        )
    }

    /// Multiplies every row of an R×C matrix elementwise by a 1×C row.
    pub fn mul_row(&self, x: Var, row: Var) -> Var {
        self.binary(
            x,
            row,
            |m, r| {
                assert_eq!((1, m.cols()), r.shape(), "mul_row shape");
                let mut out = m.clone();
                for i in 0..m.rows() {
                    for (o, g) in out.row_mut(i).iter_mut().zip(r.data()) {
                        *o *= g;
                    }
                }
                out
            },
            Op::MulRow(x, row),
        )
    }

    /// Scales row `i` of an R×C matrix by entry `i` of an R×1 column.
    pub fn mul_col(&self, x: Var, col: Var) -> Var {
        self.binary(
            x,
            col,
            |m, c| {
                assert_eq!((m.rows(), 1), c.shape(), "mul_col shape");
                let mut out = m.clone();
                for i in 0..m.rows() {
                    let s = c.get(i, 0);
                    out.row_mut(i).iter_mut().for_each(|o| *o *= s);
                }
                out
            },
            Op::MulCol(x, col),
        )
    }

    pub fn scale(&self, x: Var, s: f64) -> Var {
        self.unary(x, |m| m.map(|v| v * s), Op::Scale(x, s))
    }

    pub fn add_scalar(&self, x: Var, s: f64) -> Var {
        self.unary(x, |m| m.map(|v| v + s), Op::AddScalar(x))
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, |m| m.map(f64::exp), Op::Exp(x))
    }

    pub fn log(&self, x: Var) -> Var {
        self.unary(x, |m| m.map(f64::ln), Op::Log(x))
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, |m| m.map(f64::tanh), Op::Tanh(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, x: Var) -> Var {
        self.unary(
            x,
            |m| m.map(|v| 0.5 * v * (1.0 + (GELU_K * (v + GELU_C * v * v * v)).tanh())),
            Op::Gelu(x),
        )
    }

    pub fn softmax_rows(&self, x: Var) -> Var {
        self.unary(
            x,
            |m| {
                let mut out = m.clone();
                for i in 0..m.rows() {
                    softmax_in_place(out.row_mut(i));
                }
                out
            },
            Op::SoftmaxRows(x),
        )
    }

    pub fn log_softmax_rows(&self, x: Var) -> Var {
        self.unary(
            x,
            |m| {
                let mut out = m.clone();
                for i in 0..m.rows() {
                    let r = out.row_mut(i);
                    let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + r.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    r.iter_mut().for_each(|v| *v -= lse);
                }
                out
            },
            Op::LogSoftmaxRows(x),
        )
    }

    /// Scales every row to unit L2 norm. A zero row is an error.
    pub fn normalize_rows(&self, x: Var) -> Result<Var> {
        self.normalize_rows_impl(x, 0.0)
    }

    /// Like [`Tape::normalize_rows`] but divides by `‖row‖ + 1e-12`, so zero
    /// rows map to zero instead of failing.
    pub fn normalize_rows_safe(&self, x: Var) -> Var {
        self.normalize_rows_impl(x, SAFE_NORM_EPS)
            .expect("safe normalization cannot fail")
    }

    fn normalize_rows_impl(&self, x: Var, eps: f64) -> Result<Var> {
        let (value, norms) = {
            let nodes = self.nodes.borrow();
            let m = &nodes[x.0].value;
            let mut out = m.clone();
            let mut norms = Vec::with_capacity(m.rows());
            for i in 0..m.rows() {
                let n = m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                if eps == 0.0 && n == 0.0 {
                    return Err(Error::ZeroNormRow {
                        matrix: "input",
                        row: i,
                    });
                }
                let d = n + eps;
                out.row_mut(i).iter_mut().for_each(|v| *v /= d);
                norms.push(n);
            }
            (out, norms)
        };
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::NormalizeRows { x, norms, eps }, rg))
    }

    /// Per-row `(x - mean) / sqrt(var + eps)` (the parameter-free part of layer norm).
    pub fn standardize_rows(&self, x: Var, eps: f64) -> Var {
        let (value, inv_std) = {
            let nodes = self.nodes.borrow();
            let m = &nodes[x.0].value;
            let mut out = m.clone();
            let mut inv_std = Vec::with_capacity(m.rows());
            let n = m.cols() as f64;
            for i in 0..m.rows() {
                let r = out.row_mut(i);
                let mean = r.iter().sum::<f64>() / n;
                let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let is = 1.0 / (var + eps).sqrt();
                r.iter_mut().for_each(|v| *v = (*v - mean) * is);
                inv_std.push(is);
            }
            (out, inv_std)
        };
        let rg = self.rg(&[x]);
        self.push(value, Op::StandardizeRows { x, inv_std }, rg)
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let value = {
            let nodes = self.nodes.borrow();
            let cols = nodes[parts[0].0].value.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let m = &nodes[p.0].value;
                assert_eq!(m.cols(), cols, "concat_rows column mismatch");
                data.extend_from_slice(m.data());
                rows += m.rows();
            }
            Matrix::new(rows, cols, data).expect("consistent concat")
        };
        let rg = self.rg(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let value = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].0].value.rows();
            let cols: usize = parts.iter().map(|p| nodes[p.0].value.cols()).sum();
            let mut out = Matrix::zeros(rows, cols);
            let mut off = 0;
            for p in parts {
                let m = &nodes[p.0].value;
                assert_eq!(m.rows(), rows, "concat_cols row mismatch");
                for i in 0..rows {
                    out.row_mut(i)[off..off + m.cols()].copy_from_slice(m.row(i));
                }
                off += m.cols();
            }
            out
        };
        let rg = self.rg(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Rows `indices` of `x` in the given order; indices may repeat.
    pub fn gather_rows(&self, x: Var, indices: &[usize]) -> Var {
        self.unary(
            x,
            |m| {
                assert!(indices.iter().all(|&i| i < m.rows()), "gather_rows index out of range");
                m.select_rows(indices)
            },
            Op::GatherRows(x, indices.to_vec()),
        )
    }

    /// Columns `start..end`.
    pub fn slice_cols(&self, x: Var, start: usize, end: usize) -> Var {
        self.unary(
            x,
            |m| {
                assert!(start <= end && end <= m.cols(), "slice_cols range");
                Matrix::from_fn(m.rows(), end - start, |i, j| m.get(i, start + j))
            },
            Op::SliceCols(x, start, end),
        )
    }

    /// Mean over rows, giving a 1×C row.
    pub fn mean_rows(&self, x: Var) -> Var {
        self.unary(
            x,
            |m| {
                let mut s = m.col_sums();
                let n = m.rows() as f64;
                s.iter_mut().for_each(|v| *v /= n);
                Matrix::row_vector(s)
            },
            Op::MeanRows(x),
        )
    }

    pub fn sum(&self, x: Var) -> Var {
        self.unary(x, |m| Matrix::scalar(m.sum()), Op::Sum(x))
    }

    pub fn mean(&self, x: Var) -> Var {
        self.unary(x, |m| Matrix::scalar(m.mean()), Op::Mean(x))
    }

    /// Column `indices[i]` of row `i`, as an R×1 column.
    pub fn pick_per_row(&self, x: Var, indices: &[usize]) -> Var {
        self.unary(
            x,
            |m| {
                assert_eq!(indices.len(), m.rows(), "pick_per_row length");
                Matrix::column_vector(indices.iter().enumerate().map(|(i, &j)| m.get(i, j)).collect())
            },
            Op::PickPerRow(x, indices.to_vec()),
        )
    }

    /// Mean squared difference over all entries.
    pub fn mse(&self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| {
                assert_eq!(x.shape(), y.shape(), "mse shape");
                let s: f64 = x.data().iter().zip(y.data()).map(|(p, q)| (p - q) * (p - q)).sum();
                Matrix::scalar(s / x.len() as f64)
            },
            Op::Mse(a, b),
        )
    }

    /// Gradient of the 1×1 node `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.0].value.shape(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Matrix>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            backprop(&nodes, idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }
}

pub(crate) fn softmax_in_place(r: &mut [f64]) {
    let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in r.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    r.iter_mut().for_each(|v| *v /= s);
}

fn acc(nodes: &[Node], grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop(nodes: &[Node], idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
    let out = &nodes[idx].value;
    let val = |v: Var| &nodes[v.0].value;
    let needs = |v: Var| nodes[v.0].requires_grad;
    match &nodes[idx].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if needs(*a) {
                acc(nodes, grads, *a, gemm(g, false, val(*b), true));
            }
            if needs(*b) {
                acc(nodes, grads, *b, gemm(val(*a), true, g, false));
            }
        }
        Op::MatMulNT(a, b) => {
            // out = a bᵀ: da = g b, db = gᵀ a
            if needs(*a) {
                acc(nodes, grads, *a, gemm(g, false, val(*b), false));
            }
            if needs(*b) {
                acc(nodes, grads, *b, gemm(g, true, val(*a), false));
            }
        }
        Op::Transpose(a) => acc(nodes, grads, *a, g.transpose()),
        Op::Add(a, b) => {
            acc(nodes, grads, *a, g.clone());
            acc(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            acc(nodes, grads, *a, g.clone());
            acc(nodes, grads, *b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                acc(nodes, grads, *a, g.zip_map(val(*b), |p, q| p * q));
            }
            if needs(*b) {
                acc(nodes, grads, *b, g.zip_map(val(*a), |p, q| p * q));
            }
        }
        Op::Div(a, b) => {
            if needs(*a) {
                acc(nodes, grads, *a, g.zip_map(val(*b), |p, q| p / q));
            }
            if needs(*b) {
                // d(a/b)/db = -out / b
                let t = g.zip_map(out, |p, o| p * o);
                acc(nodes, grads, *b, t.zip_map(val(*b), |p, q| -p / q));
            }
        }
        Op::AddRow(x, row) => {
            acc(nodes, grads, *x, g.clone());
            if needs(*row) {
                acc(nodes, grads, *row, Matrix::row_vector(g.col_sums()));
            }
        }
        Op::MulRow(x, row) => {
            let r = val(*row);
            let m = val(*x);
            if needs(*x) {
                let mut dx = g.clone();
                for i in 0..dx.rows() {
                    for (d, s) in dx.row_mut(i).iter_mut().zip(r.data()) {
                        *d *= s;
                    }
                }
                acc(nodes, grads, *x, dx);
            }
            if needs(*row) {
                let mut dr = vec![0.0; r.cols()];
                for i in 0..g.rows() {
                    for ((d, gv), mv) in dr.iter_mut().zip(g.row(i)).zip(m.row(i)) {
                        *d += gv * mv;
                    }
                }
                acc(nodes, grads, *row, Matrix::row_vector(dr));
            }
        }
        Op::MulCol(x, col) => {
            let c = val(*col);
            let m = val(*x);
            if needs(*x) {
                let mut dx = g.clone();
                for i in 0..dx.rows() {
                    let s = c.get(i, 0);
                    dx.row_mut(i).iter_mut().for_each(|d| *d *= s);
                }
                acc(nodes, grads, *x, dx);
            }
            if needs(*col) {
                let dc = (0..g.rows())
                    .map(|i| g.row(i).iter().zip(m.row(i)).map(|(p, q)| p * q).sum())
                    .collect();
                acc(nodes, grads, *col, Matrix::column_vector(dc));
            }
        }
        Op::Scale(x, s) => acc(nodes, grads, *x, g.map(|v| v * s)),
        Op::AddScalar(x) => acc(nodes, grads, *x, g.clone()),
        Op::Exp(x) => acc(nodes, grads, *x, g.zip_map(out, |p, o| p * o)),
        Op::Log(x) => acc(nodes, grads, *x, g.zip_map(val(*x), |p, v| p / v)),
        Op::Tanh(x) => acc(nodes, grads, *x, g.zip_map(out, |p, o| p * (1.0 - o * o))),
        Op::Gelu(x) => acc(
            nodes,
            grads,
            *x,
            g.zip_map(val(*x), |p, v| {
                let t = (GELU_K * (v + GELU_C * v * v * v)).tanh();
                let d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * v * v);
                p * d
            }),
        ),
        Op::SoftmaxRows(x) => {
            let mut dx = g.clone();
            for i in 0..dx.rows() {
                let y = out.row(i);
                let dot: f64 = g.row(i).iter().zip(y).map(|(p, q)| p * q).sum();
                for (d, yv) in dx.row_mut(i).iter_mut().zip(y) {
                    *d = yv * (*d - dot);
                }
            }
            acc(nodes, grads, *x, dx);
        }
        Op::LogSoftmaxRows(x) => {
            let mut dx = g.clone();
            for i in 0..dx.rows() {
                let s: f64 = g.row(i).iter().sum();
                for (d, ly) in dx.row_mut(i).iter_mut().zip(out.row(i)) {
                    *d -= ly.exp() * s;
                }
            }
            acc(nodes, grads, *x, dx);
        }
        Op::NormalizeRows { x, norms, eps } => {
            let m = val(*x);
            let mut dx = g.clone();
            for i in 0..dx.rows() {
                let n = norms[i];
                let d = n + eps;
                let xr = m.row(i);
                let xg: f64 = xr.iter().zip(g.row(i)).map(|(p, q)| p * q).sum();
                let coef = if n > 0.0 { xg / (d * d * n) } else { 0.0 };
                for (dv, xv) in dx.row_mut(i).iter_mut().zip(xr) {
                    *dv = *dv / d - xv * coef;
                }
            }
            acc(nodes, grads, *x, dx);
        }
        Op::StandardizeRows { x, inv_std } => {
            let mut dx = g.clone();
            let n = g.cols() as f64;
            for i in 0..dx.rows() {
                let y = out.row(i);
                let gr = g.row(i);
                let mg = gr.iter().sum::<f64>() / n;
                let mgy = gr.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / n;
                for ((d, gv), yv) in dx.row_mut(i).iter_mut().zip(gr).zip(y) {
                    *d = inv_std[i] * (gv - mg - yv * mgy);
                }
            }
            acc(nodes, grads, *x, dx);
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for p in parts {
                let r = val(*p).rows();
                if needs(*p) {
                    let idx: Vec<usize> = (off..off + r).collect();
                    acc(nodes, grads, *p, g.select_rows(&idx));
                }
                off += r;
            }
        }
        Op::ConcatCols(parts) => {
            let mut off = 0;
            for p in parts {
                let c = val(*p).cols();
                if needs(*p) {
                    let part = Matrix::from_fn(g.rows(), c, |i, j| g.get(i, off + j));
                    acc(nodes, grads, *p, part);
                }
                off += c;
            }
        }
        Op::GatherRows(x, indices) => {
            let m = val(*x);
            let mut dx = Matrix::zeros(m.rows(), m.cols());
            for (k, &i) in indices.iter().enumerate() {
                for (d, gv) in dx.row_mut(i).iter_mut().zip(g.row(k)) {
                    *d += gv;
                }
            }
            acc(nodes, grads, *x, dx);
        }
        Op::SliceCols(x, start, _end) => {
            let m = val(*x);
            let mut dx = Matrix::zeros(m.rows(), m.cols());
            for i in 0..g.rows() {
                dx.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
            }
            acc(nodes, grads, *x, dx);
        }
        Op::MeanRows(x) => {
            let m = val(*x);
            let n = m.rows() as f64;
            let dx = Matrix::from_fn(m.rows(), m.cols(), |_, j| g.get(0, j) / n);
            acc(nodes, grads, *x, dx);
        }
        Op::Sum(x) => {
            let (r, c) = val(*x).shape();
            acc(nodes, grads, *x, Matrix::filled(r, c, g.get(0, 0)));
        }
        Op::Mean(x) => {
            let (r, c) = val(*x).shape();
            let n = (r * c) as f64;
            acc(nodes, grads, *x, Matrix::filled(r, c, g.get(0, 0) / n));
        }
        Op::PickPerRow(x, indices) => {
            let (r, c) = val(*x).shape();
            let mut dx = Matrix::zeros(r, c);
            for (i, &j) in indices.iter().enumerate() {
                dx.set(i, j, g.get(i, 0));
            }
            acc(nodes, grads, *x, dx);
        }
        Op::Mse(a, b) => {
            let n = val(*a).len() as f64;
            let s = 2.0 * g.get(0, 0) / n;
            let diff = val(*a).zip_map(val(*b), |p, q| (p - q) * s);
            if needs(*b) {
                acc(nodes, grads, *b, diff.map(|v| -v));
            }
            acc(nodes, grads, *a, diff);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_get_no_gradient() {
        let t = Tape::new();
        let c = t.constant(Matrix::scalar(2.0));
        let p = t.param(Matrix::scalar(3.0));
        let y = t.mul(c, p);
        let g = t.backward(y);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().get(0, 0), 2.0);
    }

    #[test]
    fn reused_variable_accumulates() {
        let t = Tape::new();
        let x = t.param(Matrix::scalar(3.0));
        let y = t.mul(x, x);
        let g = t.backward(y);
        assert_eq!(g.get(x).unwrap().get(0, 0), 6.0);
    }

    #[test]
    fn zero_row_normalization_fails_unless_safe() {
        let t = Tape::new();
        let x = t.param(Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap());
        let err = t.normalize_rows(x).unwrap_err();
        assert!(err.to_string().contains("zero-norm vector"));
        let y = t.normalize_rows_safe(x);
        assert_eq!(t.value(y).row(1), &[0.0, 0.0]);
    }

    #[test]
    fn log_softmax_rows_sum_to_one_in_probability() {
        let t = Tape::new();
        let x = t.constant(Matrix::from_rows(&[[1.0, 2.0, 3.0], [-5.0, 0.0, 700.0]]).unwrap());
        let y = t.value(t.log_softmax_rows(x));
        for r in y.iter_rows() {
            let s: f64 = r.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
