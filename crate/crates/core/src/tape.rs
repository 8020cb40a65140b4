//! Reverse-mode automatic differentiation over whole matrices.
//!
//! A [`Tape`] records every operation as it executes, producing a
//! topologically ordered list of nodes. [`Tape::backward`] then walks the
//! list once in reverse, applying each operation's vector-Jacobian rule and
//! accumulating gradients for the leaves marked as parameters. Training and
//! evaluation share the same recorded forward computation; evaluation simply
//! never calls `backward`.
//!
//! Operations are matrix-granular: one node per matmul or activation, not
//! one per scalar. Segment and scatter operations let graph computations
//! work on edge lists instead of dense adjacency matrices, so memory scales
//! with edge count.

use ndarray::Axis;

use crate::error::{Error, Result};
use crate::tensor::{self, Matrix, EXP_CLAMP, LOG_FLOOR};

/// Handle to a node on a tape. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// a @ b^T
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    /// matrix + broadcast 1 x c row
    AddRow(Var, Var),
    Sub(Var, Var),
    /// elementwise product
    Mul(Var, Var),
    /// elementwise quotient
    Div(Var, Var),
    /// each row scaled by an n x 1 column entry
    MulCol(Var, Var),
    /// each row divided by an n x 1 column entry
    DivCol(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Log(Var),
    SoftmaxRows(Var),
    /// softmax over positions where a constant mask was nonzero; masked
    /// outputs are zero, which the shared softmax VJP handles unchanged
    MaskedSoftmaxRows(Var),
    L2NormalizeRows(Var),
    RowSums(Var),
    SumAll(Var),
    MeanAll(Var),
    DiagCol(Var),
    /// rows picked by constant indices (repeats allowed)
    GatherRows(Var, Vec<usize>),
    /// entries picked by constant (row, col) pairs, as an e x 1 column
    GatherElems(Var, Vec<(usize, usize)>),
    /// out[idx[e]] += in[e]; the adjoint of GatherRows
    ScatterAddRows(Var, Vec<usize>),
    /// softmax over contiguous segments of an e x 1 column
    SegmentSoftmax(Var, Vec<usize>),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize, usize),
    /// summed negative log-likelihood of constant targets under row softmax
    NllRows(Var, Vec<usize>),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to every parameter on the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Extracts a 1 x 1 node as an f64.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let m = self.value(v);
        if m.dim() != (1, 1) {
            return Err(Error::NonScalarLoss {
                rows: m.nrows(),
                cols: m.ncols(),
            });
        }
        Ok(m[(0, 0)])
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is tracked through it.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input; `backward` reports a gradient for it.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::MatMulNT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let rg = self.requires(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::add(self.value(a), self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let value = tensor::add_row(self.value(m), self.value(row))?;
        let rg = self.requires(m) || self.requires(row);
        Ok(self.push(value, Op::AddRow(m, row), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::sub(self.value(a), self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::mul(self.value(a), self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::mul(self.value(a), &self.value(b).mapv(|x| 1.0 / x))?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::Div(a, b), rg))
    }

    pub fn mul_col(&mut self, m: Var, col: Var) -> Result<Var> {
        let value = tensor::mul_col(self.value(m), self.value(col))?;
        let rg = self.requires(m) || self.requires(col);
        Ok(self.push(value, Op::MulCol(m, col), rg))
    }

    pub fn div_col(&mut self, m: Var, col: Var) -> Result<Var> {
        let value = tensor::div_col(self.value(m), self.value(col))?;
        let rg = self.requires(m) || self.requires(col);
        Ok(self.push(value, Op::DivCol(m, col), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = tensor::scale(self.value(a), k);
        let rg = self.requires(a);
        self.push(value, Op::Scale(a, k), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = tensor::sigmoid(self.value(a));
        let rg = self.requires(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = tensor::tanh(self.value(a));
        let rg = self.requires(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = tensor::leaky_relu(self.value(a), slope);
        let rg = self.requires(a);
        self.push(value, Op::LeakyRelu(a, slope), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = tensor::exp(self.value(a));
        let rg = self.requires(a);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = tensor::log(self.value(a));
        let rg = self.requires(a);
        self.push(value, Op::Log(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = tensor::softmax_rows(self.value(a));
        let rg = self.requires(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    pub fn masked_softmax_rows(&mut self, a: Var, mask: &Matrix) -> Result<Var> {
        let value = tensor::masked_softmax_rows(self.value(a), mask)?;
        let rg = self.requires(a);
        Ok(self.push(value, Op::MaskedSoftmaxRows(a), rg))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let value = tensor::l2_normalize_rows(self.value(a))?;
        let rg = self.requires(a);
        Ok(self.push(value, Op::L2NormalizeRows(a), rg))
    }

    pub fn row_sums(&mut self, a: Var) -> Var {
        let value = tensor::row_sums(self.value(a));
        let rg = self.requires(a);
        self.push(value, Op::RowSums(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Matrix::from_elem((1, 1), tensor::sum_all(self.value(a)));
        let rg = self.requires(a);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let value = Matrix::from_elem((1, 1), tensor::mean_all(self.value(a)));
        let rg = self.requires(a);
        self.push(value, Op::MeanAll(a), rg)
    }

    pub fn diag_col(&mut self, a: Var) -> Result<Var> {
        let value = tensor::diag_col(self.value(a))?;
        let rg = self.requires(a);
        Ok(self.push(value, Op::DiagCol(a), rg))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let value = tensor::gather_rows(self.value(a), idx)?;
        let rg = self.requires(a);
        Ok(self.push(value, Op::GatherRows(a, idx.to_vec()), rg))
    }

    /// Picks scalar entries at constant (row, col) positions into an
    /// e x 1 column; gradients scatter-add back into the source matrix.
    pub fn gather_elems(&mut self, a: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let x = self.value(a);
        let mut value = Matrix::zeros((idx.len(), 1));
        for (e, &(r, c)) in idx.iter().enumerate() {
            if r >= x.nrows() || c >= x.ncols() {
                return Err(Error::ShapeMismatch {
                    op: "gather_elems",
                    left: (x.nrows(), x.ncols()),
                    right: (r, c),
                });
            }
            value[(e, 0)] = x[(r, c)];
        }
        let rg = self.requires(a);
        Ok(self.push(value, Op::GatherElems(a, idx.to_vec()), rg))
    }

    /// Sums row e of the input into output row `idx[e]`. `out_rows` fixes
    /// the output height; rows receiving no input stay zero.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], out_rows: usize) -> Result<Var> {
        let input = self.value(a);
        if idx.len() != input.nrows() {
            return Err(Error::ShapeMismatch {
                op: "scatter_add_rows",
                left: (input.nrows(), input.ncols()),
                right: (idx.len(), 1),
            });
        }
        let mut value = Matrix::zeros((out_rows, input.ncols()));
        for (e, &i) in idx.iter().enumerate() {
            if i >= out_rows {
                return Err(Error::InvalidTarget {
                    target: i,
                    classes: out_rows,
                });
            }
            let mut row = value.row_mut(i);
            row += &input.row(e);
        }
        let rg = self.requires(a);
        Ok(self.push(value, Op::ScatterAddRows(a, idx.to_vec()), rg))
    }

    /// Softmax over contiguous segments of an e x 1 column. `offsets` are
    /// segment boundaries: segment s covers rows offsets[s]..offsets[s+1].
    pub fn segment_softmax(&mut self, a: Var, offsets: &[usize]) -> Result<Var> {
        let input = self.value(a);
        if input.ncols() != 1
            || offsets.first() != Some(&0)
            || offsets.last() != Some(&input.nrows())
            || offsets.windows(2).any(|w| w[0] > w[1])
        {
            return Err(Error::ShapeMismatch {
                op: "segment_softmax",
                left: (input.nrows(), input.ncols()),
                right: (offsets.len(), 1),
            });
        }
        let mut value = input.clone();
        for w in offsets.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            if lo == hi {
                continue;
            }
            let mut seg = value.slice_mut(ndarray::s![lo..hi, ..]);
            let max = seg.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            seg.mapv_inplace(|x| (x - max).exp());
            let sum = seg.sum();
            seg.mapv_inplace(|x| x / sum);
        }
        let rg = self.requires(a);
        Ok(self.push(value, Op::SegmentSoftmax(a, offsets.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::concat_cols(self.value(a), self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::ConcatCols(a, b), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&v| self.value(v)).collect();
        let value = tensor::concat_rows(&mats)?;
        let rg = parts.iter().any(|&v| self.requires(v));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let input = self.value(a);
        if n > input.nrows() {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                left: (input.nrows(), input.ncols()),
                right: (n, input.ncols()),
            });
        }
        let value = tensor::slice_rows(input, n);
        let rg = self.requires(a);
        Ok(self.push(value, Op::SliceRows(a, n), rg))
    }

    pub fn slice_cols(&mut self, a: Var, lo: usize, hi: usize) -> Result<Var> {
        let input = self.value(a);
        if lo > hi || hi > input.ncols() {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                left: (input.nrows(), input.ncols()),
                right: (lo, hi),
            });
        }
        let value = tensor::slice_cols(input, lo, hi);
        let rg = self.requires(a);
        Ok(self.push(value, Op::SliceCols(a, lo, hi), rg))
    }

    /// Summed cross-entropy of each row's softmax against a constant target
    /// index, computed via a stabilized log-sum-exp. Returns a 1 x 1 scalar.
    pub fn nll_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        if targets.len() != x.nrows() {
            return Err(Error::ShapeMismatch {
                op: "nll_rows",
                left: (x.nrows(), x.ncols()),
                right: (targets.len(), 1),
            });
        }
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= x.ncols() {
                return Err(Error::InvalidTarget {
                    target: t,
                    classes: x.ncols(),
                });
            }
            let row = x.row(i);
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let rg = self.requires(logits);
        Ok(self.push(
            Matrix::from_elem((1, 1), total),
            Op::NllRows(logits, targets.to_vec()),
            rg,
        ))
    }

    /// Accumulates d(loss)/d(node) for every node that needs a gradient,
    /// walking the tape once in reverse from `loss`, which must be 1 x 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.scalar(loss)?;
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::from_elem((1, 1), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.apply_vjp(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn apply_vjp(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut acc = |v: Var, delta: Matrix| {
            if !self.requires(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, g.dot(&self.value(*b).t()));
                acc(*b, self.value(*a).t().dot(g));
            }
            Op::MatMulNT(a, b) => {
                acc(*a, g.dot(self.value(*b)));
                acc(*b, g.t().dot(self.value(*a)));
            }
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(m, row) => {
                acc(*m, g.clone());
                acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                acc(*a, g * self.value(*b));
                acc(*b, g * self.value(*a));
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                acc(*a, g / bv);
                acc(*b, -(g * out) / bv);
            }
            Op::MulCol(m, col) => {
                let cv = self.value(*col);
                acc(*m, tensor::mul_col(g, cv).expect("shapes fixed at forward"));
                let prod = g * self.value(*m);
                acc(*col, tensor::row_sums(&prod));
            }
            Op::DivCol(m, col) => {
                let cv = self.value(*col);
                acc(*m, tensor::div_col(g, cv).expect("shapes fixed at forward"));
                let prod = g * out;
                let mut dcol = tensor::row_sums(&prod);
                dcol = -(&dcol / cv);
                acc(*col, dcol);
            }
            Op::Scale(a, k) => acc(*a, g * *k),
            Op::Sigmoid(a) => acc(*a, g * &(out * &(1.0 - out))),
            Op::Tanh(a) => acc(*a, g * &(1.0 - &(out * out))),
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                let dx = x.mapv(|v| if v >= 0.0 { 1.0 } else { *slope });
                acc(*a, g * &dx);
            }
            Op::Exp(a) => {
                // Zero slope outside the clamp window, exp(x) inside.
                let x = self.value(*a);
                let mut dx = out * g;
                dx.zip_mut_with(x, |d, &v| {
                    if v.abs() > EXP_CLAMP {
                        *d = 0.0;
                    }
                });
                acc(*a, dx);
            }
            Op::Log(a) => {
                // Zero slope below the floor, 1/x above it.
                let x = self.value(*a);
                let dx = x.mapv(|v| if v > LOG_FLOOR { 1.0 / v } else { 0.0 });
                acc(*a, g * &dx);
            }
            Op::SoftmaxRows(a) | Op::MaskedSoftmaxRows(a) => {
                // Masked entries have output 0, which zeroes their slot in
                // the same row-wise formula dx = y * (g - sum(g * y)).
                let mut dx = Matrix::zeros(out.dim());
                for r in 0..out.nrows() {
                    let dot: f64 = (0..out.ncols()).map(|c| g[(r, c)] * out[(r, c)]).sum();
                    for c in 0..out.ncols() {
                        dx[(r, c)] = out[(r, c)] * (g[(r, c)] - dot);
                    }
                }
                acc(*a, dx);
            }
            Op::L2NormalizeRows(a) => {
                let x = self.value(*a);
                let mut dx = Matrix::zeros(out.dim());
                for r in 0..out.nrows() {
                    let norm = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = (0..out.ncols()).map(|c| g[(r, c)] * out[(r, c)]).sum();
                    for c in 0..out.ncols() {
                        dx[(r, c)] = (g[(r, c)] - out[(r, c)] * dot) / norm;
                    }
                }
                acc(*a, dx);
            }
            Op::RowSums(a) => {
                let x = self.value(*a);
                let mut dx = Matrix::zeros(x.dim());
                for (mut row, &gi) in dx.rows_mut().into_iter().zip(g.column(0)) {
                    row.fill(gi);
                }
                acc(*a, dx);
            }
            Op::SumAll(a) => {
                let x = self.value(*a);
                acc(*a, Matrix::from_elem(x.dim(), g[(0, 0)]));
            }
            Op::MeanAll(a) => {
                let x = self.value(*a);
                acc(*a, Matrix::from_elem(x.dim(), g[(0, 0)] / x.len() as f64));
            }
            Op::DiagCol(a) => {
                let n = self.value(*a).nrows();
                let mut dx = Matrix::zeros((n, n));
                for r in 0..n {
                    dx[(r, r)] = g[(r, 0)];
                }
                acc(*a, dx);
            }
            Op::GatherRows(a, idx) => {
                let x = self.value(*a);
                let mut dx = Matrix::zeros(x.dim());
                for (k, &r) in idx.iter().enumerate() {
                    let mut row = dx.row_mut(r);
                    row += &g.row(k);
                }
                acc(*a, dx);
            }
            Op::GatherElems(a, idx) => {
                let x = self.value(*a);
                let mut dx = Matrix::zeros(x.dim());
                for (e, &(r, c)) in idx.iter().enumerate() {
                    dx[(r, c)] += g[(e, 0)];
                }
                acc(*a, dx);
            }
            Op::ScatterAddRows(a, idx) => {
                acc(*a, tensor::gather_rows(g, idx).expect("indices checked at forward"));
            }
            Op::SegmentSoftmax(a, offsets) => {
                let mut dx = Matrix::zeros(out.dim());
                for w in offsets.windows(2) {
                    let (lo, hi) = (w[0], w[1]);
                    let dot: f64 = (lo..hi).map(|e| g[(e, 0)] * out[(e, 0)]).sum();
                    for e in lo..hi {
                        dx[(e, 0)] = out[(e, 0)] * (g[(e, 0)] - dot);
                    }
                }
                acc(*a, dx);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).ncols();
                acc(*a, tensor::slice_cols(g, 0, ca));
                acc(*b, tensor::slice_cols(g, ca, g.ncols()));
            }
            Op::ConcatRows(parts) => {
                let mut lo = 0;
                for &p in parts {
                    let rows = self.value(p).nrows();
                    acc(p, g.slice(ndarray::s![lo..lo + rows, ..]).to_owned());
                    lo += rows;
                }
            }
            Op::SliceRows(a, n) => {
                let x = self.value(*a);
                let mut dx = Matrix::zeros(x.dim());
                dx.slice_mut(ndarray::s![..*n, ..]).assign(g);
                acc(*a, dx);
            }
            Op::SliceCols(a, lo, hi) => {
                let x = self.value(*a);
                let mut dx = Matrix::zeros(x.dim());
                dx.slice_mut(ndarray::s![.., *lo..*hi]).assign(g);
                acc(*a, dx);
            }
            Op::NllRows(a, targets) => {
                // d/dx of (logsumexp(x) - x[t]) is softmax(x) - onehot(t).
                let x = self.value(*a);
                let mut dx = tensor::softmax_rows(x);
                for (r, &t) in targets.iter().enumerate() {
                    dx[(r, t)] -= 1.0;
                }
                acc(*a, dx * g[(0, 0)]);
            }
        }
    }
}
