//! A small reverse-mode automatic differentiation tape over [`Matrix`].
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! topological order, so the backward sweep is a single reverse iteration.
//! Only nodes that transitively depend on a leaf created with
//! [`Graph::leaf`]`(.., true)` carry gradients.

use crate::tensor::{gemm, gemm_into, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boundary handling for [`Graph::im2col`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Replicate,
    Circular,
}

impl Padding {
    fn source(self, t: isize, len: usize) -> Option<usize> {
        let n = len as isize;
        if (0..n).contains(&t) {
            return Some(t as usize);
        }
        match self {
            Padding::Zero => None,
            Padding::Replicate => Some(t.clamp(0, n - 1) as usize),
            Padding::Circular => Some(t.rem_euclid(n) as usize),
        }
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Silu(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SumCols(Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    Softmax(Var),
    LogSoftmax(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    RepeatRows(Var, usize),
    Reshape(Var),
    Im2Col { x: Var, offsets: Vec<isize>, padding: Padding },
    Transpose(Var),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by a backward sweep, indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Matrix>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = gemm(self.value(a), false, self.value(b), false);
        self.push(value, Op::MatMul { a, b, tb: false }, &[a, b])
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = gemm(self.value(a), false, self.value(b), true);
        self.push(value, Op::MatMul { a, b, tb: true }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `1 x c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let value = broadcast_rows(self.value(x), self.value(row), |a, b| a + b);
        self.push(value, Op::AddRow(x, row), &[x, row])
    }

    /// Multiplies every row of `x` elementwise by a `1 x c` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let value = broadcast_rows(self.value(x), self.value(row), |a, b| a * b);
        self.push(value, Op::MulRow(x, row), &[x, row])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::Scale(x, s), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        self.push(value, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        self.push(value, Op::Silu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        self.push(value, Op::Exp(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::abs);
        self.push(value, Op::Abs(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        self.push(value, Op::Square(x), &[x])
    }

    /// Hard clamp; the gradient is zero where the input lies outside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(value, Op::Clamp(x, lo, hi), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Matrix::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Matrix::scalar(self.value(x).mean());
        self.push(value, Op::Mean(x), &[x])
    }

    /// Column means, `1 x c`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let value = self.value(x).mean_rows();
        self.push(value, Op::MeanRows(x), &[x])
    }

    /// Column means computed as `min + sum(sorted(v - min)) / n` per column.
    ///
    /// The value does not depend on row order and equals the common value
    /// exactly when all rows are identical. The gradient is that of the mean.
    pub fn mean_rows_exact(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let n = m.rows() as f64;
        let mut out = Matrix::zeros(1, m.cols());
        let mut col = Vec::with_capacity(m.rows());
        for c in 0..m.cols() {
            col.clear();
            col.extend((0..m.rows()).map(|r| m.get(r, c)));
            col.sort_by(f64::total_cmp);
            let lo = col[0];
            let spread: f64 = col.iter().map(|v| v - lo).sum();
            out.set(0, c, lo + spread / n);
        }
        self.push(out, Op::MeanRows(x), &[x])
    }

    /// Row sums, `r x 1`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let value = Matrix::from_fn(m.rows(), 1, |r, _| m.row(r).iter().sum());
        self.push(value, Op::SumCols(x), &[x])
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let m = self.value(x);
        let (rows, cols) = m.shape();
        let mut out = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = m.row(r);
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + eps).sqrt();
            for (o, v) in out.row_mut(r).iter_mut().zip(row) {
                *o = (v - mu) * s;
            }
            rstd.push(s);
        }
        self.push(out, Op::LayerNorm { x, rstd }, &[x])
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let mut out = m.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = if v.is_finite() { (*v - mx).exp() } else { 0.0 };
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let mut out = m.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(out, Op::LogSoftmax(x), &[x])
    }

    /// Divides every row by its Euclidean norm. Callers must reject zero rows
    /// beforehand.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let mut out = m.clone();
        let mut norms = Vec::with_capacity(m.rows());
        for r in 0..m.rows() {
            let n = m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            out.row_mut(r).iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        self.push(out, Op::L2NormalizeRows { x, norms }, &[x])
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let value = self.value(x).select_rows(&idx);
        self.push(value, Op::GatherRows(x, idx), &[x])
    }

    /// `out[i] = x[i, idx[i]]`, shape `r x 1`.
    pub fn pick(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let m = self.value(x);
        assert_eq!(idx.len(), m.rows(), "pick needs one index per row");
        let value = Matrix::from_fn(m.rows(), 1, |r, _| m.get(r, idx[r]));
        self.push(value, Op::Pick(x, idx), &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Matrix::zeros(rows, total);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let src = self.value(*p);
                assert_eq!(src.rows(), rows, "concat_cols row mismatch");
                out.row_mut(r)[off..off + src.cols()].copy_from_slice(src.row(r));
                off += src.cols();
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|p| self.value(*p)).collect();
        let value = Matrix::vstack(&mats);
        self.push(value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let m = self.value(x);
        let value = Matrix::from_fn(m.rows(), len, |r, c| m.get(r, start + c));
        self.push(value, Op::SliceCols(x, start), &[x])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let m = self.value(x);
        let value = Matrix::from_vec(len, m.cols(), m.data()[start * m.cols()..(start + len) * m.cols()].to_vec());
        self.push(value, Op::SliceRows(x, start), &[x])
    }

    /// Repeats every row `r` times consecutively (frame-repetition upsampling).
    pub fn repeat_rows(&mut self, x: Var, r: usize) -> Var {
        let m = self.value(x);
        let idx: Vec<usize> = (0..m.rows()).flat_map(|i| std::iter::repeat_n(i, r)).collect();
        let value = m.select_rows(&idx);
        self.push(value, Op::RepeatRows(x, r), &[x])
    }

    /// Reinterprets the row-major buffer with a new shape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let value = self.value(x).clone().reshape(rows, cols);
        self.push(value, Op::Reshape(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        self.push(value, Op::Transpose(x), &[x])
    }

    /// Gathers time-shifted copies of `x` side by side: row `t` of the output
    /// is `[x[t + o_0], x[t + o_1], ...]`. A convolution is then a single
    /// matmul against a `(k * c) x c_out` kernel.
    pub fn im2col(&mut self, x: Var, offsets: &[isize], padding: Padding) -> Var {
        let m = self.value(x);
        let (t_len, c) = m.shape();
        let k = offsets.len();
        let mut out = Matrix::zeros(t_len, k * c);
        for t in 0..t_len {
            for (j, &o) in offsets.iter().enumerate() {
                if let Some(s) = padding.source(t as isize + o, t_len) {
                    out.row_mut(t)[j * c..(j + 1) * c].copy_from_slice(m.row(s));
                }
            }
        }
        self.push(out, Op::Im2Col { x, offsets: offsets.to_vec(), padding }, &[x])
    }

    // Composite helpers.

    /// `x * w + b` with `w: in x out`, `b: 1 x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward() needs a scalar; use backward_seeded");
        self.backward_seeded(&[(loss, Matrix::scalar(1.0))])
    }

    /// Backpropagates arbitrary upstream gradients from several outputs.
    pub fn backward_seeded(&self, seeds: &[(Var, Matrix)]) -> Grads {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut start = 0;
        for (v, g) in seeds {
            assert_eq!(self.value(*v).shape(), g.shape(), "seed gradient shape mismatch");
            accumulate(&mut grads, *v, g.clone());
            start = start.max(v.0);
        }
        for i in (0..=start).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Grads { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, dy: &Matrix, grads: &mut [Option<Matrix>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    // y = a b  -> da = dy b^T ;  y = a b^T -> da = dy b
                    accumulate_gemm(grads, *a, dy, false, bv, !tb);
                }
                if self.wants(*b) {
                    if *tb {
                        // db = dy^T a
                        accumulate_gemm(grads, *b, dy, true, av, false);
                    } else {
                        accumulate_gemm(grads, *b, av, true, dy, false);
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, || dy.clone());
                self.acc(grads, *b, || dy.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, || dy.clone());
                self.acc(grads, *b, || dy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                self.acc(grads, *a, || dy.zip_map(self.value(*b), |g, v| g * v));
                self.acc(grads, *b, || dy.zip_map(self.value(*a), |g, v| g * v));
            }
            Op::AddRow(x, row) => {
                self.acc(grads, *x, || dy.clone());
                self.acc(grads, *row, || dy.mean_rows().map(|v| v * dy.rows() as f64));
            }
            Op::MulRow(x, row) => {
                let rv = self.value(*row);
                self.acc(grads, *x, || broadcast_rows(dy, rv, |g, s| g * s));
                self.acc(grads, *row, || {
                    let xv = self.value(*x);
                    let mut out = Matrix::zeros(1, rv.cols());
                    for r in 0..dy.rows() {
                        for ((o, g), v) in out.data_mut().iter_mut().zip(dy.row(r)).zip(xv.row(r)) {
                            *o += g * v;
                        }
                    }
                    out
                });
            }
            Op::Scale(x, s) => self.acc(grads, *x, || dy.map(|g| g * s)),
            Op::Tanh(x) => self.acc(grads, *x, || dy.zip_map(y, |g, t| g * (1.0 - t * t))),
            Op::Sigmoid(x) => self.acc(grads, *x, || dy.zip_map(y, |g, s| g * s * (1.0 - s))),
            Op::Silu(x) => self.acc(grads, *x, || {
                dy.zip_map(self.value(*x), |g, v| {
                    let s = sigmoid(v);
                    g * (s + v * s * (1.0 - s))
                })
            }),
            Op::Exp(x) => self.acc(grads, *x, || dy.zip_map(y, |g, e| g * e)),
            Op::Abs(x) => self.acc(grads, *x, || dy.zip_map(self.value(*x), |g, v| g * sign(v))),
            Op::Square(x) => self.acc(grads, *x, || dy.zip_map(self.value(*x), |g, v| 2.0 * g * v)),
            Op::Clamp(x, lo, hi) => self.acc(grads, *x, || {
                dy.zip_map(self.value(*x), |g, v| if v < *lo || v > *hi { 0.0 } else { g })
            }),
            Op::Sum(x) => {
                let (r, c) = self.value(*x).shape();
                self.acc(grads, *x, || Matrix::filled(r, c, dy.item()));
            }
            Op::Mean(x) => {
                let (r, c) = self.value(*x).shape();
                self.acc(grads, *x, || Matrix::filled(r, c, dy.item() / (r * c) as f64));
            }
            Op::MeanRows(x) => {
                let (r, c) = self.value(*x).shape();
                self.acc(grads, *x, || Matrix::from_fn(r, c, |_, j| dy.get(0, j) / r as f64));
            }
            Op::SumCols(x) => {
                let (r, c) = self.value(*x).shape();
                self.acc(grads, *x, || Matrix::from_fn(r, c, |i, _| dy.get(i, 0)));
            }
            Op::LayerNorm { x, rstd } => self.acc(grads, *x, || {
                let c = y.cols() as f64;
                let mut out = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), dy.row(r));
                    let mg = gr.iter().sum::<f64>() / c;
                    let mgy = gr.iter().zip(yr).map(|(g, v)| g * v).sum::<f64>() / c;
                    for ((o, g), v) in out.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = rstd[r] * (g - mg - v * mgy);
                    }
                }
                out
            }),
            Op::Softmax(x) => self.acc(grads, *x, || {
                let mut out = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), dy.row(r));
                    let dot: f64 = gr.iter().zip(yr).map(|(g, v)| g * v).sum();
                    for ((o, g), v) in out.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = v * (g - dot);
                    }
                }
                out
            }),
            Op::LogSoftmax(x) => self.acc(grads, *x, || {
                let mut out = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), dy.row(r));
                    let s: f64 = gr.iter().sum();
                    for ((o, g), v) in out.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = g - v.exp() * s;
                    }
                }
                out
            }),
            Op::L2NormalizeRows { x, norms } => self.acc(grads, *x, || {
                let mut out = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), dy.row(r));
                    let dot: f64 = gr.iter().zip(yr).map(|(g, v)| g * v).sum();
                    for ((o, g), v) in out.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = (g - v * dot) / norms[r];
                    }
                }
                out
            }),
            Op::GatherRows(x, idx) => self.acc(grads, *x, || {
                let xv = self.value(*x);
                let mut out = Matrix::zeros(xv.rows(), xv.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, g) in out.row_mut(i).iter_mut().zip(dy.row(r)) {
                        *o += g;
                    }
                }
                out
            }),
            Op::Pick(x, idx) => self.acc(grads, *x, || {
                let xv = self.value(*x);
                let mut out = Matrix::zeros(xv.rows(), xv.cols());
                for (r, &c) in idx.iter().enumerate() {
                    out.set(r, c, dy.get(r, 0));
                }
                out
            }),
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    self.acc(grads, *p, || Matrix::from_fn(dy.rows(), c, |r, j| dy.get(r, off + j)));
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let (r, c) = self.value(*p).shape();
                    self.acc(grads, *p, || Matrix::from_vec(r, c, dy.data()[off * c..(off + r) * c].to_vec()));
                    off += r;
                }
            }
            Op::SliceCols(x, start) => self.acc(grads, *x, || {
                let (r, c) = self.value(*x).shape();
                let mut out = Matrix::zeros(r, c);
                for i in 0..r {
                    out.row_mut(i)[*start..*start + dy.cols()].copy_from_slice(dy.row(i));
                }
                out
            }),
            Op::SliceRows(x, start) => self.acc(grads, *x, || {
                let (r, c) = self.value(*x).shape();
                let mut out = Matrix::zeros(r, c);
                out.data_mut()[start * c..(start + dy.rows()) * c].copy_from_slice(dy.data());
                out
            }),
            Op::RepeatRows(x, k) => self.acc(grads, *x, || {
                let (r, c) = self.value(*x).shape();
                let mut out = Matrix::zeros(r, c);
                for i in 0..dy.rows() {
                    for (o, g) in out.row_mut(i / k).iter_mut().zip(dy.row(i)) {
                        *o += g;
                    }
                }
                out
            }),
            Op::Reshape(x) => {
                let (r, c) = self.value(*x).shape();
                self.acc(grads, *x, || dy.clone().reshape(r, c));
            }
            Op::Transpose(x) => self.acc(grads, *x, || dy.transpose()),
            Op::Im2Col { x, offsets, padding } => self.acc(grads, *x, || {
                let (t_len, c) = self.value(*x).shape();
                let mut out = Matrix::zeros(t_len, c);
                for t in 0..t_len {
                    for (j, &o) in offsets.iter().enumerate() {
                        if let Some(s) = padding.source(t as isize + o, t_len) {
                            let g = &dy.row(t)[j * c..(j + 1) * c];
                            for (dst, v) in out.row_mut(s).iter_mut().zip(g) {
                                *dst += v;
                            }
                        }
                    }
                }
                out
            }),
        }
    }

    fn acc(&self, grads: &mut [Option<Matrix>], v: Var, f: impl FnOnce() -> Matrix) {
        if self.wants(v) {
            accumulate(grads, v, f());
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_gemm(grads: &mut [Option<Matrix>], v: Var, a: &Matrix, ta: bool, b: &Matrix, tb: bool) {
    match &mut grads[v.0] {
        Some(existing) => gemm_into(a, ta, b, tb, existing, 1.0),
        slot @ None => *slot = Some(gemm(a, ta, b, tb)),
    }
}

fn broadcast_rows(x: &Matrix, row: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    assert_eq!(row.rows(), 1, "broadcast operand must be a single row");
    assert_eq!(x.cols(), row.cols(), "broadcast width mismatch: {:?} vs {:?}", x.shape(), row.shape());
    let mut out = x.clone();
    for r in 0..out.rows() {
        for (o, b) in out.row_mut(r).iter_mut().zip(row.data()) {
            *o = f(*o, *b);
        }
    }
    out
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
