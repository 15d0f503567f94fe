//! Dense row-major matrices and the Gram/centering primitives used by CKA.
//!
//! Samples are rows, features are columns. All arithmetic is `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidMatrix(format!(
                "{rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix input"));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix without the finiteness scan. Length is still checked.
    pub(crate) fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidMatrix("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_vec(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::from_vec(rows, cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix::from_vec(idx.len(), self.cols, data)
    }

    pub fn scale(&self, alpha: f64) -> Matrix {
        Matrix::from_vec(
            self.rows,
            self.cols,
            self.data.iter().map(|v| v * alpha).collect(),
        )
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Copy with every column shifted to zero mean.
    pub fn center_columns(&self) -> Matrix {
        let n = self.rows as f64;
        let mut means = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (m, v) in means.iter_mut().zip(self.row(i)) {
                *m += v;
            }
        }
        means.iter_mut().for_each(|m| *m /= n);
        let mut out = self.clone();
        for i in 0..self.rows {
            for (v, m) in out.row_mut(i).iter_mut().zip(&means) {
                *v -= m;
            }
        }
        out
    }
}

/// Symmetric `n × n` kernel matrix over samples.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix(Matrix);

impl GramMatrix {
    /// Wraps a square matrix, checking symmetry to 1e-12 absolute.
    pub fn new(m: Matrix) -> Result<Self> {
        if m.rows != m.cols {
            return Err(Error::Shape {
                op: "gram",
                left: m.shape(),
                right: (m.cols, m.rows),
            });
        }
        for i in 0..m.rows {
            for j in (i + 1)..m.cols {
                if (m.get(i, j) - m.get(j, i)).abs() > 1e-12 {
                    return Err(Error::InvalidMatrix(format!(
                        "gram matrix not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        if m.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gram matrix"));
        }
        Ok(Self(m))
    }

    pub(crate) fn new_unchecked(m: Matrix) -> Self {
        Self(m)
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.0.rows
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in orow.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materialising the transpose. Row `i` of the result holds
/// the dot products of `a[i]` with every row of `b`.
pub fn matmul_transposed(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::Shape {
            op: "matmul_transposed",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(arow, b.row(j));
        }
    }
    Ok(out)
}

/// `aᵀ · b` for matrices sharing their row count.
pub fn transpose_matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::Shape {
            op: "transpose_matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for r in 0..a.rows {
        let br = b.row(r);
        for (i, &av) in a.row(r).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// Dot product over four interleaved partial sums, so the adds pipeline and
/// vectorise. The summation order is fixed, so results stay deterministic.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[2]) + (acc[1] + acc[3]) + tail
}

/// Linear-kernel Gram matrix `x · xᵀ`.
pub fn gram_linear(x: &Matrix) -> Result<GramMatrix> {
    if x.rows < 2 {
        return Err(Error::TooFewSamples("gram_linear", x.rows));
    }
    let n = x.rows;
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = dot(x.row(i), x.row(j));
            k.data[i * n + j] = v;
            k.data[j * n + i] = v;
        }
    }
    Ok(GramMatrix(k))
}

/// `H·K·H` with `H = I − (1/n)·11ᵀ`, computed by subtracting row and column
/// means and adding back the grand mean.
pub fn center_gram(k: &GramMatrix) -> GramMatrix {
    let n = k.n();
    let m = &k.0;
    let nf = n as f64;
    let row_means: Vec<f64> = (0..n).map(|i| m.row(i).iter().sum::<f64>() / nf).collect();
    let grand = row_means.iter().sum::<f64>() / nf;
    // K is symmetric, so column means equal row means.
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = m.get(i, j) - row_means[i] - row_means[j] + grand;
            out.data[i * n + j] = v;
            out.data[j * n + i] = v;
        }
    }
    GramMatrix(out)
}

/// Frobenius inner product `Σᵢⱼ aᵢⱼ·bᵢⱼ`.
pub fn frob_inner(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "frob_inner",
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(dot(&a.data, &b.data))
}
