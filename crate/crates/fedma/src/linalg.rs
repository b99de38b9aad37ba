//! Dense real linear algebra used throughout the crate.
//!
//! Everything is `f64` and row-major. The SVD is delegated to `faer`; the
//! rest is small enough to write out directly.

use faer::Mat;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Numerical tolerances shared by the solvers and diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    /// Singular values at or below `rank_rel * sigma_max * max(rows, cols)` count as zero.
    pub rank_rel: f64,
    /// Largest matrix dimension `svd` accepts.
    pub svd_max_dim: usize,
}

pub const TOL: Tolerances = Tolerances {
    rank_rel: 1e-10,
    svd_max_dim: 8192,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch in {op}: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("svd did not converge (matrix hash {hash})")]
    NoConvergence { hash: String },
}

fn mismatch(op: &'static str, detail: String) -> LinalgError {
    LinalgError::DimensionMismatch { op, detail }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if rows * cols != data.len() {
            return Err(mismatch(
                "from_vec",
                format!("{rows}x{cols} needs {} entries, got {}", rows * cols, data.len()),
            ));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, LinalgError> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(mismatch("from_rows", format!("row {i} has {} entries, expected {c}", row.len())));
            }
            data.extend_from_slice(row);
        }
        Ok(DenseMatrix { rows: r, cols: c, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
        if self.cols != other.rows {
            return Err(mismatch(
                "matmul",
                format!("{}x{} times {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>, LinalgError> {
        if v.len() != self.cols {
            return Err(mismatch("matvec", format!("{}x{} times vector of {}", self.rows, self.cols, v.len())));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `vᵀ A`, i.e. a linear combination of the rows.
    pub fn vecmat(&self, v: &[f64]) -> Result<Vec<f64>, LinalgError> {
        if v.len() != self.rows {
            return Err(mismatch("vecmat", format!("vector of {} times {}x{}", v.len(), self.rows, self.cols)));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &c) in v.iter().enumerate() {
            if c != 0.0 {
                axpy(c, self.row(i), &mut out);
            }
        }
        Ok(out)
    }

    /// Copy of row `i`.
    pub fn row_slice(&self, i: usize) -> Result<Vec<f64>, LinalgError> {
        if i >= self.rows {
            return Err(mismatch("row_slice", format!("row {i} of {}", self.rows)));
        }
        Ok(self.row(i).to_vec())
    }

    /// Leading `r x c` block.
    pub fn leading(&self, r: usize, c: usize) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(r, c);
        for i in 0..r {
            out.row_mut(i).copy_from_slice(&self.row(i)[..c]);
        }
        out
    }

    /// Append a column in place.
    pub fn col_append(&mut self, col: &[f64]) -> Result<(), LinalgError> {
        if self.cols == 0 && self.rows == 0 {
            self.rows = col.len();
        }
        if col.len() != self.rows {
            return Err(mismatch("col_append", format!("column of {} onto {} rows", col.len(), self.rows)));
        }
        let nc = self.cols + 1;
        let mut data = Vec::with_capacity(self.rows * nc);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.push(col[i]);
        }
        self.data = data;
        self.cols = nc;
        Ok(())
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(mismatch("sub", format!("{}x{} minus {}x{}", self.rows, self.cols, other.rows, other.cols)));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(DenseMatrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn frobenius_sq(&self) -> f64 {
        frobenius_sq(self)
    }

    fn to_faer(&self) -> Mat<f64> {
        Mat::from_fn(self.rows, self.cols, |i, j| self.data[i * self.cols + j])
    }

    fn from_faer(m: faer::MatRef<'_, f64>) -> DenseMatrix {
        let (r, c) = (m.nrows(), m.ncols());
        let mut out = DenseMatrix::zeros(r, c);
        for i in 0..r {
            for j in 0..c {
                out.data[i * c + j] = m[(i, j)];
            }
        }
        out
    }

    /// Short content hash, used to tag numerical failures.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.rows as u64).to_le_bytes());
        h.update((self.cols as u64).to_le_bytes());
        for x in &self.data {
            h.update(x.to_le_bytes());
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Square lower-triangular matrix stored packed by rows; the upper part does not exist.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerTriangular {
    dim: usize,
    data: Vec<f64>,
}

#[inline]
fn packed(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

impl LowerTriangular {
    pub fn zeros(dim: usize) -> Self {
        LowerTriangular {
            dim,
            data: vec![0.0; dim * (dim + 1) / 2],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.data[packed(i, i)] = 1.0;
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j > i {
            0.0
        } else {
            self.data[packed(i, j)]
        }
    }

    /// Set an on-or-below-diagonal entry. Writing above the diagonal is an error.
    pub fn set(&mut self, i: usize, j: usize, v: f64) -> Result<(), LinalgError> {
        if j > i || i >= self.dim {
            return Err(LinalgError::InvalidInput(format!(
                "entry ({i},{j}) is outside the lower triangle of dim {}",
                self.dim
            )));
        }
        self.data[packed(i, j)] = v;
        Ok(())
    }

    #[inline]
    pub(crate) fn add_at(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(j <= i);
        self.data[packed(i, j)] += v;
    }

    /// Stored part of row `i`, columns `0..=i`.
    pub fn row_prefix(&self, i: usize) -> &[f64] {
        &self.data[packed(i, 0)..packed(i, 0) + i + 1]
    }

    pub(crate) fn row_prefix_mut(&mut self, i: usize) -> &mut [f64] {
        let s = packed(i, 0);
        &mut self.data[s..s + i + 1]
    }

    /// Full row `i` of length `dim`, zero after the diagonal.
    pub fn row_slice(&self, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        out[..=i].copy_from_slice(self.row_prefix(i));
        out
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.dim, self.dim);
        for i in 0..self.dim {
            out.row_mut(i)[..=i].copy_from_slice(self.row_prefix(i));
        }
        out
    }

    /// Leading `n x n` block as a dense matrix.
    pub fn leading_dense(&self, n: usize) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(n, n);
        for i in 0..n {
            out.row_mut(i)[..=i].copy_from_slice(self.row_prefix(i));
        }
        out
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    /// Nonzero entries as `(row, col, value)`.
    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for i in 0..self.dim {
            for (j, &v) in self.row_prefix(i).iter().enumerate() {
                if v != 0.0 {
                    out.push((i, j, v));
                }
            }
        }
        out
    }
}

/// Thin singular value decomposition `A = U diag(s) Vᵀ`.
#[derive(Debug, Clone)]
pub struct SvdFactorization {
    /// `rows x k`, with `k = min(rows, cols)`.
    pub u: DenseMatrix,
    /// Non-increasing, non-negative.
    pub singular_values: Vec<f64>,
    /// `cols x k`.
    pub v: DenseMatrix,
    pub rank: usize,
    pub tolerance: f64,
}

impl SvdFactorization {
    pub fn reconstruct(&self) -> DenseMatrix {
        let (m, n, k) = (self.u.rows(), self.v.rows(), self.singular_values.len());
        let mut out = DenseMatrix::zeros(m, n);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..k {
                    s += self.u.get(i, l) * self.singular_values[l] * self.v.get(j, l);
                }
                out.set(i, j, s);
            }
        }
        out
    }
}

pub fn rank_tolerance(sigma_max: f64, rows: usize, cols: usize) -> f64 {
    TOL.rank_rel * sigma_max * rows.max(cols) as f64
}

pub fn svd(a: &DenseMatrix) -> Result<SvdFactorization, LinalgError> {
    if !a.is_finite() {
        return Err(LinalgError::InvalidInput("svd input has non-finite entries".into()));
    }
    if a.rows.max(a.cols) > TOL.svd_max_dim {
        return Err(LinalgError::InvalidInput(format!(
            "svd dimension {} exceeds the limit {}",
            a.rows.max(a.cols),
            TOL.svd_max_dim
        )));
    }
    let (m, n) = (a.rows, a.cols);
    let k = m.min(n);
    if k == 0 {
        return Ok(SvdFactorization {
            u: DenseMatrix::zeros(m, 0),
            singular_values: Vec::new(),
            v: DenseMatrix::zeros(n, 0),
            rank: 0,
            tolerance: 0.0,
        });
    }
    let dec = a.to_faer().thin_svd().map_err(|_| LinalgError::NoConvergence { hash: a.content_hash() })?;
    let singular_values: Vec<f64> = dec.S().column_vector().iter().copied().collect();
    let sigma_max = singular_values[0];
    let tolerance = rank_tolerance(sigma_max, m, n);
    let rank = singular_values.iter().filter(|&&s| s > tolerance).count();
    Ok(SvdFactorization {
        u: DenseMatrix::from_faer(dec.U()),
        singular_values,
        v: DenseMatrix::from_faer(dec.V()),
        rank,
        tolerance,
    })
}

/// Minimum-norm `x` minimizing `‖xᵀA − bᵀ‖₂`, with `A` of shape `m x n` and `b` of length `n`.
pub fn least_squares_min_norm(a: &DenseMatrix, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
    if b.len() != a.cols {
        return Err(mismatch(
            "least_squares_min_norm",
            format!("target of length {} for a {}x{} system", b.len(), a.rows, a.cols),
        ));
    }
    if a.cols == 0 {
        return Err(LinalgError::InvalidInput("system has no columns".into()));
    }
    if !a.is_finite() || b.iter().any(|x| !x.is_finite()) {
        return Err(LinalgError::InvalidInput("non-finite entry in least-squares input".into()));
    }
    let f = svd(a)?;
    Ok(min_norm_from_svd(&f, b))
}

/// `x = U_r diag(1/s_r) V_rᵀ b`.
pub fn min_norm_from_svd(f: &SvdFactorization, b: &[f64]) -> Vec<f64> {
    let m = f.u.rows();
    let mut x = vec![0.0; m];
    for l in 0..f.rank {
        let mut c = 0.0;
        for (j, bj) in b.iter().enumerate() {
            c += f.v.get(j, l) * bj;
        }
        c /= f.singular_values[l];
        for (i, xi) in x.iter_mut().enumerate() {
            *xi += c * f.u.get(i, l);
        }
    }
    x
}

pub fn frobenius_sq(a: &DenseMatrix) -> f64 {
    a.data.iter().map(|x| x * x).sum()
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}
