//! Dense matrix kernels shared by the forward pass and the autodiff tape.
//!
//! Everything is 64-bit and single-threaded so results are reproducible
//! bit-for-bit across runs. Shape errors are reported with both operand
//! shapes rather than panicking.

use ndarray::{concatenate, s, Array2, Axis};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

/// Floor applied inside every logarithm to keep losses finite.
pub const LOG_FLOOR: f64 = 1e-12;
/// Symmetric clamp applied inside every exponential.
pub const EXP_CLAMP: f64 = 60.0;
/// Negative-side slope of the LeakyReLU used by the attention scorer.
pub const LEAKY_SLOPE: f64 = 0.01;

fn dims(m: &Matrix) -> (usize, usize) {
    (m.nrows(), m.ncols())
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.ncols() != b.nrows() {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: dims(a),
            right: dims(b),
        });
    }
    Ok(a.dot(b))
}

/// `a @ b^T` without materializing the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.ncols() != b.ncols() {
        return Err(Error::ShapeMismatch {
            op: "matmul_nt",
            left: dims(a),
            right: dims(b),
        });
    }
    Ok(a.dot(&b.t()))
}

fn same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            op,
            left: dims(a),
            right: dims(b),
        });
    }
    Ok(())
}

pub fn add(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    same_shape("add", a, b)?;
    Ok(a + b)
}

pub fn sub(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    same_shape("sub", a, b)?;
    Ok(a - b)
}

pub fn mul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    same_shape("mul", a, b)?;
    Ok(a * b)
}

/// Adds a 1 x c row vector to every row of an n x c matrix.
pub fn add_row(m: &Matrix, row: &Matrix) -> Result<Matrix> {
    if row.nrows() != 1 || row.ncols() != m.ncols() {
        return Err(Error::ShapeMismatch {
            op: "add_row",
            left: dims(m),
            right: dims(row),
        });
    }
    Ok(m + &row.row(0))
}

/// Multiplies every row of an n x c matrix by the matching entry of an
/// n x 1 column vector.
pub fn mul_col(m: &Matrix, col: &Matrix) -> Result<Matrix> {
    if col.ncols() != 1 || col.nrows() != m.nrows() {
        return Err(Error::ShapeMismatch {
            op: "mul_col",
            left: dims(m),
            right: dims(col),
        });
    }
    let mut out = m.clone();
    for (mut r, &c) in out.rows_mut().into_iter().zip(col.column(0)) {
        r *= c;
    }
    Ok(out)
}

/// Divides every row of an n x c matrix by the matching entry of an
/// n x 1 column vector.
pub fn div_col(m: &Matrix, col: &Matrix) -> Result<Matrix> {
    if col.ncols() != 1 || col.nrows() != m.nrows() {
        return Err(Error::ShapeMismatch {
            op: "div_col",
            left: dims(m),
            right: dims(col),
        });
    }
    let mut out = m.clone();
    for (mut r, &c) in out.rows_mut().into_iter().zip(col.column(0)) {
        r /= c;
    }
    Ok(out)
}

pub fn scale(m: &Matrix, k: f64) -> Matrix {
    m * k
}

pub fn sigmoid(m: &Matrix) -> Matrix {
    m.mapv(|x| 1.0 / (1.0 + (-x).exp()))
}

pub fn tanh(m: &Matrix) -> Matrix {
    m.mapv(f64::tanh)
}

pub fn leaky_relu(m: &Matrix, slope: f64) -> Matrix {
    m.mapv(|x| if x >= 0.0 { x } else { slope * x })
}

/// exp with inputs clamped to +-EXP_CLAMP so the result stays finite.
pub fn exp(m: &Matrix) -> Matrix {
    m.mapv(|x| x.clamp(-EXP_CLAMP, EXP_CLAMP).exp())
}

/// ln with inputs floored at LOG_FLOOR so the result stays finite.
pub fn log(m: &Matrix) -> Matrix {
    m.mapv(|x| x.max(LOG_FLOOR).ln())
}

/// Row-wise softmax, stabilized by subtracting each row's maximum.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    out
}

/// Row-wise softmax over the positions where `mask` is nonzero; masked
/// positions get probability 0, and a fully masked row stays all-zero.
pub fn masked_softmax_rows(m: &Matrix, mask: &Matrix) -> Result<Matrix> {
    same_shape("masked_softmax_rows", m, mask)?;
    let mut out = Matrix::zeros(m.dim());
    for i in 0..m.nrows() {
        let mut max = f64::NEG_INFINITY;
        for j in 0..m.ncols() {
            if mask[(i, j)] != 0.0 {
                max = max.max(m[(i, j)]);
            }
        }
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut sum = 0.0;
        for j in 0..m.ncols() {
            if mask[(i, j)] != 0.0 {
                let e = (m[(i, j)] - max).exp();
                out[(i, j)] = e;
                sum += e;
            }
        }
        for j in 0..m.ncols() {
            out[(i, j)] /= sum;
        }
    }
    Ok(out)
}

/// Scales every row to unit L2 norm. A zero row has no direction, so it is
/// rejected rather than silently propagated.
pub fn l2_normalize_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroVectorRow { row: i });
        }
        row.mapv_inplace(|x| x / norm);
    }
    Ok(out)
}

/// n x 1 column of row sums.
pub fn row_sums(m: &Matrix) -> Matrix {
    let col = m.sum_axis(Axis(1));
    col.insert_axis(Axis(1))
}

pub fn sum_all(m: &Matrix) -> f64 {
    m.sum()
}

pub fn mean_all(m: &Matrix) -> f64 {
    m.sum() / (m.len() as f64)
}

/// Main diagonal of a square matrix as an n x 1 column.
pub fn diag_col(m: &Matrix) -> Result<Matrix> {
    if m.nrows() != m.ncols() {
        return Err(Error::ShapeMismatch {
            op: "diag_col",
            left: dims(m),
            right: dims(m),
        });
    }
    let n = m.nrows();
    let mut out = Matrix::zeros((n, 1));
    for i in 0..n {
        out[(i, 0)] = m[(i, i)];
    }
    Ok(out)
}

/// Stacks the selected rows, in index order, into a new matrix.
/// Indices may repeat.
pub fn gather_rows(m: &Matrix, idx: &[usize]) -> Result<Matrix> {
    let mut out = Matrix::zeros((idx.len(), m.ncols()));
    for (k, &i) in idx.iter().enumerate() {
        if i >= m.nrows() {
            return Err(Error::InvalidTarget {
                target: i,
                classes: m.nrows(),
            });
        }
        out.row_mut(k).assign(&m.row(i));
    }
    Ok(out)
}

pub fn concat_cols(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.nrows() != b.nrows() {
        return Err(Error::ShapeMismatch {
            op: "concat_cols",
            left: dims(a),
            right: dims(b),
        });
    }
    Ok(concatenate(Axis(1), &[a.view(), b.view()]).expect("row counts checked"))
}

pub fn concat_rows(parts: &[&Matrix]) -> Result<Matrix> {
    let cols = parts
        .first()
        .ok_or(Error::ViewCountTooSmall { got: 0 })?
        .ncols();
    for p in parts {
        if p.ncols() != cols {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                left: (parts[0].nrows(), cols),
                right: dims(p),
            });
        }
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok(concatenate(Axis(0), &views).expect("column counts checked"))
}

pub fn slice_rows(m: &Matrix, n: usize) -> Matrix {
    m.slice(s![..n, ..]).to_owned()
}

pub fn slice_cols(m: &Matrix, lo: usize, hi: usize) -> Matrix {
    m.slice(s![.., lo..hi]).to_owned()
}

/// Cosine similarity between two equal-length slices.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Pairwise cosine similarity of rows: normalize, then take Gram matrix.
/// Errors on a zero row, where cosine is undefined.
pub fn cosine_rows(m: &Matrix) -> Result<Matrix> {
    let n = l2_normalize_rows(m)?;
    matmul_nt(&n, &n)
}

pub fn squared_frobenius(m: &Matrix) -> f64 {
    m.iter().map(|x| x * x).sum()
}
