//! Reverse-mode differentiation over whole matrices.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the nodes in reverse and accumulates adjoints. Nodes that do not
//! depend on any variable leaf are skipped during the backward sweep.
//!
//! Shape errors in tape operations are programming errors and panic.

use alloc::vec;
use alloc::vec::Vec;

use super::matrix::{log_sum_exp, softmax_in_place, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    NormalizeRows(Var),
    SumAll(Var),
    SqDist(Var, Var),
    ConcatCols(Var, Var),
    MaskedLse(Var, Matrix),
    Diag(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros if `v` did not
    /// influence the loss.
    pub fn wrt(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Matrix {
        let (r, c) = self.shapes[v.0];
        self.grads[v.0].take().unwrap_or_else(|| Matrix::zeros(r, c))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient is wanted.
    pub fn var(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as constant; no gradient flows into it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on a {}x{} node", m.rows(), m.cols());
        m.as_slice()[0]
    }

    fn push(&mut self, value: Matrix, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn unary(&mut self, a: Var, value: Matrix, op: Op) -> Var {
        let t = self.tracked(&[a]);
        self.push(value, op, t)
    }

    fn binary(&mut self, a: Var, b: Var, value: Matrix, op: Op) -> Var {
        let t = self.tracked(&[a, b]);
        self.push(value, op, t)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        assert_eq!(sa, sb, "{what}: shapes {sa:?} and {sb:?} differ");
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols(), vb.rows(), "matmul: inner dimensions differ");
        let out = va.matmul_unchecked(vb);
        self.binary(a, b, out, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols(), vb.cols(), "matmul_nt: row widths differ");
        let out = va.matmul_nt_unchecked(vb);
        self.binary(a, b, out, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let out = self.value(a).add(self.value(b)).expect("shape checked");
        self.binary(a, b, out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let out = self.value(a).sub(self.value(b)).expect("shape checked");
        self.binary(a, b, out, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let out = self.value(a).hadamard(self.value(b)).expect("shape checked");
        self.binary(a, b, out, Op::Mul(a, b))
    }

    /// Adds a 1×c row vector to every row of an n×c matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert!(vr.rows() == 1 && vr.cols() == va.cols(), "add_row: bias must be 1x{}", va.cols());
        let mut out = va.clone();
        let bias = vr.as_slice();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bias) {
                *o += b;
            }
        }
        self.binary(a, row, out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.unary(a, out, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v + s);
        self.unary(a, out, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(libm::tanh);
        self.unary(a, out, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(libm::exp);
        self.unary(a, out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(libm::log);
        self.unary(a, out, Op::Log(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).softmax_rows();
        self.unary(a, out, Op::Softmax(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).log_softmax_rows();
        self.unary(a, out, Op::LogSoftmax(a))
    }

    /// Scales each row to unit Euclidean norm. A zero or non-finite row
    /// yields non-finite output rather than a panic.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let norm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
            row.iter_mut().for_each(|v| *v /= norm);
        }
        self.unary(a, out, Op::NormalizeRows(a))
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::filled(1, 1, self.value(a).sum());
        self.unary(a, out, Op::SumAll(a))
    }

    /// Squared Euclidean distance between every row of `a` and every row of `b`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).sq_dist(self.value(b)).expect("sq_dist: row widths differ");
        self.binary(a, b, out, Op::SqDist(a, b))
    }

    /// Places `b` to the right of `a`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.rows(), vb.rows(), "concat_cols: row counts differ");
        let out = Matrix::from_fn(va.rows(), va.cols() + vb.cols(), |r, c| {
            if c < va.cols() {
                va[(r, c)]
            } else {
                vb[(r, c - va.cols())]
            }
        });
        self.binary(a, b, out, Op::ConcatCols(a, b))
    }

    /// Per-row log-sum-exp over the entries whose `mask` value is nonzero;
    /// an n×1 node. Every row needs at least one selected entry.
    pub fn masked_log_sum_exp(&mut self, a: Var, mask: Matrix) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape(), mask.shape(), "masked_log_sum_exp: mask shape");
        let mut out = Matrix::zeros(va.rows(), 1);
        let mut buf = Vec::with_capacity(va.cols());
        for r in 0..va.rows() {
            buf.clear();
            buf.extend(va.row(r).iter().zip(mask.row(r)).filter(|(_, &m)| m != 0.0).map(|(&v, _)| v));
            assert!(!buf.is_empty(), "masked_log_sum_exp: row {r} has no selected entry");
            out[(r, 0)] = log_sum_exp(&buf);
        }
        self.unary(a, out, Op::MaskedLse(a, mask))
    }

    /// Diagonal of a square matrix as an n×1 node.
    pub fn diag(&mut self, a: Var) -> Var {
        let va = self.value(a);
        assert_eq!(va.rows(), va.cols(), "diag: matrix is not square");
        let out = Matrix::from_fn(va.rows(), 1, |r, _| va[(r, r)]);
        self.unary(a, out, Op::Diag(a))
    }

    /// Runs the backward sweep from a 1×1 node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar loss");
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape()).collect() }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign_unchecked(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let y = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if self.wants(a) {
                    self.accumulate(grads, a, g.matmul_nt_unchecked(self.value(b)));
                }
                if self.wants(b) {
                    self.accumulate(grads, b, self.value(a).matmul_tn_unchecked(g));
                }
            }
            &Op::MatMulNt(a, b) => {
                // y = a bᵀ: da = g b, db = gᵀ a
                if self.wants(a) {
                    self.accumulate(grads, a, g.matmul_unchecked(self.value(b)));
                }
                if self.wants(b) {
                    self.accumulate(grads, b, g.matmul_tn_unchecked(self.value(a)));
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                if self.wants(b) {
                    self.accumulate(grads, b, g.scale(-1.0));
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    self.accumulate(grads, a, g.hadamard(self.value(b)).unwrap());
                }
                if self.wants(b) {
                    self.accumulate(grads, b, g.hadamard(self.value(a)).unwrap());
                }
            }
            &Op::AddRow(a, row) => {
                self.accumulate(grads, a, g.clone());
                if self.wants(row) {
                    let sums = g.col_sums();
                    self.accumulate(grads, row, Matrix::from_vec_unchecked(1, sums.len(), sums));
                }
            }
            &Op::Scale(a, s) => self.accumulate(grads, a, g.scale(s)),
            &Op::AddScalar(a) => self.accumulate(grads, a, g.clone()),
            &Op::Tanh(a) => {
                let d = g.zip_map(y, |g, t| g * (1.0 - t * t)).unwrap();
                self.accumulate(grads, a, d);
            }
            &Op::Exp(a) => self.accumulate(grads, a, g.hadamard(y).unwrap()),
            &Op::Log(a) => {
                let d = g.zip_map(self.value(a), |g, x| g / x).unwrap();
                self.accumulate(grads, a, d);
            }
            &Op::Softmax(a) => {
                let mut d = g.clone();
                for r in 0..d.rows() {
                    let yr = y.row(r);
                    let inner: f64 = g.row(r).iter().zip(yr).map(|(g, y)| g * y).sum();
                    for (dv, (&gv, &yv)) in d.row_mut(r).iter_mut().zip(g.row(r).iter().zip(yr)) {
                        *dv = yv * (gv - inner);
                    }
                }
                self.accumulate(grads, a, d);
            }
            &Op::LogSoftmax(a) => {
                let mut d = g.clone();
                for r in 0..d.rows() {
                    let total: f64 = g.row(r).iter().sum();
                    for (dv, &ly) in d.row_mut(r).iter_mut().zip(y.row(r)) {
                        *dv -= libm::exp(ly) * total;
                    }
                }
                self.accumulate(grads, a, d);
            }
            &Op::NormalizeRows(a) => {
                let x = self.value(a);
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let norm = libm::sqrt(x.row(r).iter().map(|v| v * v).sum::<f64>());
                    let yr = y.row(r);
                    let inner: f64 = g.row(r).iter().zip(yr).map(|(g, y)| g * y).sum();
                    for (c, dv) in d.row_mut(r).iter_mut().enumerate() {
                        *dv = (g[(r, c)] - yr[c] * inner) / norm;
                    }
                }
                self.accumulate(grads, a, d);
            }
            &Op::SumAll(a) => {
                let (r, c) = self.value(a).shape();
                self.accumulate(grads, a, Matrix::filled(r, c, g.as_slice()[0]));
            }
            &Op::SqDist(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                if self.wants(a) {
                    // da_m = 2 Σ_k g_mk (a_m − b_k)
                    let mut d = Matrix::zeros(va.rows(), va.cols());
                    for m in 0..va.rows() {
                        let gm: f64 = g.row(m).iter().sum();
                        let row = d.row_mut(m);
                        for (dv, &av) in row.iter_mut().zip(va.row(m)) {
                            *dv = 2.0 * gm * av;
                        }
                        for k in 0..vb.rows() {
                            let w = 2.0 * g[(m, k)];
                            for (dv, &bv) in row.iter_mut().zip(vb.row(k)) {
                                *dv -= w * bv;
                            }
                        }
                    }
                    self.accumulate(grads, a, d);
                }
                if self.wants(b) {
                    let col = g.col_sums();
                    let mut d = Matrix::zeros(vb.rows(), vb.cols());
                    for k in 0..vb.rows() {
                        let row = d.row_mut(k);
                        for (dv, &bv) in row.iter_mut().zip(vb.row(k)) {
                            *dv = 2.0 * col[k] * bv;
                        }
                    }
                    for m in 0..va.rows() {
                        for k in 0..vb.rows() {
                            let w = 2.0 * g[(m, k)];
                            for (dv, &av) in d.row_mut(k).iter_mut().zip(va.row(m)) {
                                *dv -= w * av;
                            }
                        }
                    }
                    self.accumulate(grads, b, d);
                }
            }
            &Op::ConcatCols(a, b) => {
                let ca = self.value(a).cols();
                let cb = self.value(b).cols();
                if self.wants(a) {
                    self.accumulate(grads, a, Matrix::from_fn(g.rows(), ca, |r, c| g[(r, c)]));
                }
                if self.wants(b) {
                    self.accumulate(grads, b, Matrix::from_fn(g.rows(), cb, |r, c| g[(r, ca + c)]));
                }
            }
            Op::MaskedLse(a, mask) => {
                let x = self.value(*a);
                let mut d = Matrix::zeros(x.rows(), x.cols());
                let mut buf = Vec::with_capacity(x.cols());
                for r in 0..x.rows() {
                    buf.clear();
                    buf.extend(x.row(r).iter().zip(mask.row(r)).filter(|(_, &m)| m != 0.0).map(|(&v, _)| v));
                    softmax_in_place(&mut buf);
                    let gr = g[(r, 0)];
                    let mut it = buf.iter();
                    for (dv, &m) in d.row_mut(r).iter_mut().zip(mask.row(r)) {
                        if m != 0.0 {
                            *dv = gr * it.next().unwrap();
                        }
                    }
                }
                self.accumulate(grads, *a, d);
            }
            &Op::Diag(a) => {
                let n = g.rows();
                let mut d = Matrix::zeros(n, n);
                for r in 0..n {
                    d[(r, r)] = g[(r, 0)];
                }
                self.accumulate(grads, a, d);
            }
        }
    }
}
