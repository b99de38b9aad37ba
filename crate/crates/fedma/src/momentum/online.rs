//! Streaming full momentum approximation.
//!
//! The solver sees one row of `W` per step and keeps a thin QR factorization
//! `W[:, J] = Q R` of the columns `J` that have a nonzero entry so far. Columns
//! outside `J` are exactly zero, so the minimum-norm solution is
//! `a = Q R⁻ᵀ M[t, J]` when `R` is comfortably nonsingular. Columns that turn
//! out to depend on earlier ones are rotated to the back of the factorization
//! so that `R = [R11 R12; 0 ~0]`, and the least-squares problem is reduced to
//! a square triangle `L`. Singular values of `L` near the rank threshold are
//! found by block inverse iteration and discarded exactly as an SVD would;
//! when the call is too close the step is re-solved from scratch with an SVD.

use super::{one_minus_alpha_from_svd, step_residual, MomentumError, MomentumMatrix};
use crate::linalg::{self, DenseMatrix, LinalgError, LowerTriangular};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolvePath {
    Incremental,
    Svd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub t: usize,
    /// `a_t`, of length `t`.
    pub weights: Vec<f64>,
    pub residual: f64,
    pub rank: usize,
    pub one_minus_alpha: f64,
    pub path: SolvePath,
}

#[derive(Debug, Clone)]
pub struct OnlineMaSolver {
    beta: f64,
    w: LowerTriangular,
    t: usize,
    active: Vec<usize>,
    is_active: Vec<bool>,
    /// Columns of `Q`, each of length `t`.
    q: Vec<Vec<f64>>,
    /// Rows of the upper-triangular `R`; row `k` holds entries `k..n` at positions `k..n`.
    r: Vec<Vec<f64>>,
    svd_steps: usize,
}

impl OnlineMaSolver {
    pub fn new(horizon: usize, beta: f64) -> Self {
        OnlineMaSolver {
            beta,
            w: LowerTriangular::zeros(horizon),
            t: 0,
            active: Vec::new(),
            is_active: vec![false; horizon],
            q: Vec::new(),
            r: Vec::new(),
            svd_steps: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.t
    }

    pub fn svd_steps(&self) -> usize {
        self.svd_steps
    }

    pub fn staleness(&self) -> &LowerTriangular {
        &self.w
    }

    /// Consume row `t` of `W` (entries `0..t`, zero based) and solve step `t`.
    pub fn push_row(&mut self, row: &[f64]) -> Result<StepReport, MomentumError> {
        let horizon = self.w.dim();
        let i = self.t;
        if i >= horizon {
            return Err(MomentumError::StepOutOfRange { t: i + 1, horizon });
        }
        if row.len() != i + 1 {
            return Err(LinalgError::DimensionMismatch {
                op: "push_row",
                detail: format!("row {} has {} entries, expected {}", i + 1, row.len(), i + 1),
            }
            .into());
        }
        if row.iter().any(|x| !x.is_finite()) {
            return Err(LinalgError::InvalidInput(format!("non-finite entry in row {}", i + 1)).into());
        }
        self.w.row_prefix_mut(i).copy_from_slice(row);
        self.t = i + 1;
        self.append_row(row);
        for s in 0..=i {
            if row[s] != 0.0 && !self.is_active[s] {
                self.append_column(s, row[s]);
            }
        }
        self.solve()
    }

    fn append_row(&mut self, row: &[f64]) {
        let rows = self.t;
        let n = self.active.len();
        let mut wa: Vec<f64> = self.active.iter().map(|&s| row[s]).collect();
        for qk in &mut self.q {
            qk.push(0.0);
        }
        let Some(k0) = wa.iter().position(|&x| x != 0.0) else {
            return;
        };
        let mut z = vec![0.0; rows];
        z[rows - 1] = 1.0;
        for k in k0..n {
            let b = wa[k];
            if b == 0.0 {
                continue;
            }
            let a = self.r[k][k];
            let h = a.hypot(b);
            let (c, s) = (a / h, b / h);
            let rk = &mut self.r[k];
            for j in k..n {
                let (x, y) = (rk[j], wa[j]);
                rk[j] = c * x + s * y;
                wa[j] = -s * x + c * y;
            }
            wa[k] = 0.0;
            let qk = &mut self.q[k];
            for (qv, zv) in qk.iter_mut().zip(z.iter_mut()) {
                let (x, y) = (*qv, *zv);
                *qv = c * x + s * y;
                *zv = -s * x + c * y;
            }
        }
    }

    fn append_column(&mut self, s: usize, value: f64) {
        let rows = self.t;
        let last = rows - 1;
        let n = self.active.len();
        let mut col = vec![0.0; rows];
        col[last] = value;
        let mut coef = vec![0.0; n];
        let mut resid = col;
        for _ in 0..2 {
            for k in 0..n {
                let c = linalg::dot(&self.q[k], &resid);
                coef[k] += c;
                linalg::axpy(-c, &self.q[k], &mut resid);
            }
        }
        let rho = linalg::norm(&resid);
        let qn = if rho > 1e-13 * value.abs() {
            resid.iter().map(|x| x / rho).collect()
        } else {
            self.complement_direction()
        };
        for (k, rk) in self.r.iter_mut().enumerate() {
            rk.push(coef[k]);
        }
        let mut new_row = vec![0.0; n + 1];
        new_row[n] = rho;
        self.r.push(new_row);
        self.q.push(qn);
        self.active.push(s);
        self.is_active[s] = true;
    }

    /// Unit vector orthogonal to the current `Q`, used when a new column is
    /// numerically dependent on the old ones.
    fn complement_direction(&self) -> Vec<f64> {
        let rows = self.t;
        let mut best = (f64::INFINITY, 0);
        for j in 0..rows {
            let w: f64 = self.q.iter().map(|qk| qk[j] * qk[j]).sum();
            if w < best.0 {
                best = (w, j);
            }
        }
        let mut v = vec![0.0; rows];
        v[best.1] = 1.0;
        for _ in 0..2 {
            for qk in &self.q {
                let c = linalg::dot(qk, &v);
                linalg::axpy(-c, qk, &mut v);
            }
        }
        let nv = linalg::norm(&v);
        v.iter().map(|x| x / nv).collect()
    }

    fn solve(&mut self) -> Result<StepReport, MomentumError> {
        let t = self.t;
        let target = super::momentum_row(self.beta, t);
        let row_norm_sq = linalg::norm_sq(&target);
        let deficient = self.deflate();
        let n = self.active.len();
        let rank = self.split_point(n - deficient);
        {
            let mut rhs: Vec<f64> = self.active.iter().map(|&s| target[s]).collect();
            let mut lost = 0.0;
            let lower = self.reduce_trailing(rank, &mut rhs, &mut lost);
            if let Some((y, truncated)) = lower.truncated_solve(&rhs[..rank], t, &mut lost) {
                let mut a = vec![0.0; t];
                for (k, yk) in y.iter().enumerate() {
                    linalg::axpy(*yk, &self.q[k], &mut a);
                }
                let missing: f64 = (0..t).filter(|&s| !self.is_active[s]).map(|s| target[s] * target[s]).sum();
                let one_minus_alpha = if row_norm_sq > 0.0 { ((missing + lost) / row_norm_sq).clamp(0.0, 1.0) } else { 0.0 };
                let residual = step_residual(&self.w, &target, &a);
                return Ok(StepReport {
                    t,
                    weights: a,
                    residual,
                    rank: rank - truncated,
                    one_minus_alpha,
                    path: SolvePath::Incremental,
                });
            }
        }
        self.svd_steps += 1;
        let f = linalg::svd(&self.w.leading_dense(t))?;
        let a = linalg::min_norm_from_svd(&f, &target);
        let residual = step_residual(&self.w, &target, &a);
        Ok(StepReport {
            t,
            residual,
            rank: f.rank,
            one_minus_alpha: one_minus_alpha_from_svd(&f, &target, row_norm_sq),
            weights: a,
            path: SolvePath::Svd,
        })
    }

    /// Threshold below which a diagonal entry of `R` marks a dependent column.
    fn dependence_tolerance(&self) -> f64 {
        let n = self.active.len();
        let scale = (0..n)
            .map(|j| (0..=j).map(|k| self.r[k][j] * self.r[k][j]).sum::<f64>())
            .fold(0.0, f64::max)
            .sqrt();
        linalg::rank_tolerance(scale, self.t, n)
    }

    /// Move every column with a negligible diagonal to the end, keeping `R`
    /// upper triangular, and return how many there are.
    fn deflate(&mut self) -> usize {
        let n = self.active.len();
        let tol = self.dependence_tolerance();
        let mut end = n;
        for k in (0..n).rev() {
            if self.r[k][k].abs() <= tol {
                self.move_column(k, end - 1);
                end -= 1;
            }
        }
        n - end
    }

    /// Cyclically move column `from` to position `to > from` and restore the
    /// triangular shape with Givens rotations on neighbouring rows.
    fn move_column(&mut self, from: usize, to: usize) {
        if from == to {
            return;
        }
        let n = self.active.len();
        self.active[from..=to].rotate_left(1);
        for row in &mut self.r {
            row[from..=to].rotate_left(1);
        }
        for j in from..to {
            let (a, b) = (self.r[j][j], self.r[j + 1][j]);
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let (c, s) = (a / h, b / h);
            let (top, bottom) = self.r.split_at_mut(j + 1);
            let (rj, rj1) = (&mut top[j], &mut bottom[0]);
            for col in j..n {
                let (x, y) = (rj[col], rj1[col]);
                rj[col] = c * x + s * y;
                rj1[col] = -s * x + c * y;
            }
            rj1[j] = 0.0;
            let (qa, qb) = self.q.split_at_mut(j + 1);
            for (x, y) in qa[j].iter_mut().zip(qb[0].iter_mut()) {
                let (u, v) = (*x, *y);
                *x = c * u + s * v;
                *y = -s * u + c * v;
            }
        }
    }

    /// Rows `rank..n` of `R` must vanish for the rank split to be exact.
    /// Smallest `k ≥ rank` such that rows `k..` of `R` are negligible. Columns
    /// with a tiny diagonal but a sizeable entry further right stay in the
    /// reduced triangle and are handled by truncation instead.
    fn split_point(&self, rank: usize) -> usize {
        let tol = self.dependence_tolerance();
        (rank..self.active.len())
            .filter(|&k| self.r[k][k..].iter().any(|x| x.abs() > tol))
            .last()
            .map_or(rank, |k| k + 1)
    }

    /// Least squares `[R11 R12]ᵀ y ≈ rhs`: rotate the dependent equations into
    /// the lower-triangular `R11ᵀ`. Returns the reduced triangle; `rhs[..rank]`
    /// is updated in place and the squared unreachable part added to `lost`.
    fn reduce_trailing(&self, rank: usize, rhs: &mut [f64], lost: &mut f64) -> Lower {
        let n = self.active.len();
        let mut lower: Vec<Vec<f64>> = (0..rank).map(|i| (0..=i).map(|j| self.r[j][i]).collect()).collect();
        for p in rank..n {
            let mut v: Vec<f64> = (0..rank).map(|j| self.r[j][p]).collect();
            let mut extra = rhs[p];
            for j in (0..rank).rev() {
                let b = v[j];
                if b == 0.0 {
                    continue;
                }
                let a = lower[j][j];
                let h = a.hypot(b);
                let (c, s) = (a / h, b / h);
                let lj = &mut lower[j];
                for col in 0..=j {
                    let (x, y) = (lj[col], v[col]);
                    lj[col] = c * x + s * y;
                    v[col] = -s * x + c * y;
                }
                v[j] = 0.0;
                let (x, y) = (rhs[j], extra);
                rhs[j] = c * x + s * y;
                extra = -s * x + c * y;
            }
            *lost += extra * extra;
        }
        Lower(lower)
    }
}

/// Dense lower-triangular matrix stored by rows; row `i` has `i + 1` entries.
struct Lower(Vec<Vec<f64>>);

/// Initial size of the block used to find singular values near the rank threshold.
const SMALL_BLOCK: usize = 4;
const MAX_BLOCK: usize = 64;
/// Cap on block inverse iteration sweeps before deferring to the SVD.
const INVERSE_ROUNDS: usize = 12;
/// Singular values within this factor of the threshold are left to the SVD.
const RANK_MARGIN: f64 = 1.01;

impl Lower {
    fn dim(&self) -> usize {
        self.0.len()
    }

    /// `L x = b`.
    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; b.len()];
        for (i, row) in self.0.iter().enumerate() {
            x[i] = (b[i] - linalg::dot(&row[..i], &x[..i])) / row[i];
        }
        x
    }

    /// `Lᵀ x = b`.
    fn solve_transposed(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        for i in (0..x.len()).rev() {
            let row = &self.0[i];
            let xi = x[i] / row[i];
            x[i] = xi;
            linalg::axpy(-xi, &row[..i], &mut x[..i]);
        }
        x
    }

    fn mul(&self, x: &[f64]) -> Vec<f64> {
        self.0.iter().map(|row| linalg::dot(row, &x[..row.len()])).collect()
    }

    fn mul_transposed(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for (row, xi) in self.0.iter().zip(x) {
            linalg::axpy(*xi, row, &mut out[..row.len()]);
        }
        out
    }

    fn frobenius(&self) -> f64 {
        self.0.iter().map(|r| linalg::norm_sq(r)).sum::<f64>().sqrt()
    }

    /// Lower estimate of `‖L⁻¹‖₁` (Hager's method, with Higham's extra test vector).
    fn inverse_norm1_estimate(&self) -> f64 {
        let n = self.dim();
        let mut x = vec![1.0 / n as f64; n];
        let mut est = 0.0;
        let mut last_j = usize::MAX;
        for _ in 0..5 {
            let y = self.solve(&x);
            est = y.iter().map(|v| v.abs()).sum::<f64>();
            let xi: Vec<f64> = y.iter().map(|v| if *v >= 0.0 { 1.0 } else { -1.0 }).collect();
            let z = self.solve_transposed(&xi);
            let (j, zmax) = z
                .iter()
                .enumerate()
                .fold((0, 0.0), |acc, (i, v)| if v.abs() > acc.1 { (i, v.abs()) } else { acc });
            if zmax <= linalg::dot(&z, &x) || j == last_j {
                break;
            }
            last_j = j;
            x = vec![0.0; n];
            x[j] = 1.0;
        }
        let alt: Vec<f64> = (0..n)
            .map(|i| {
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                sign * (1.0 + i as f64 / (n.max(2) - 1) as f64)
            })
            .collect();
        let y = self.solve(&alt);
        let alt_est = 2.0 * y.iter().map(|v| v.abs()).sum::<f64>() / (3.0 * n as f64);
        est.max(alt_est)
    }

    /// Largest singular value by power iteration on `LᵀL`.
    fn largest_singular_value(&self) -> f64 {
        let n = self.dim();
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + (i % 7) as f64 * 0.1).collect();
        let mut sigma = 0.0;
        for _ in 0..300 {
            let nv = linalg::norm(&v);
            v.iter_mut().for_each(|x| *x /= nv);
            let lv = self.mul(&v);
            let next = linalg::norm(&lv);
            v = self.mul_transposed(&lv);
            if (next - sigma).abs() <= 1e-9 * next {
                sigma = next;
                break;
            }
            sigma = next;
        }
        sigma
    }

    /// The few smallest singular triplets `(σ, x, y)` with `L y = σ x`, by block
    /// inverse iteration on `LᵀL` followed by a Rayleigh-Ritz step.
    fn smallest_singular(&self, tol: f64, p: usize) -> Result<Option<Vec<(f64, Vec<f64>, Vec<f64>)>>, LinalgError> {
        let n = self.dim();
        let p = p.min(n);
        let mut block: Vec<Vec<f64>> = (0..p)
            .map(|j| (0..n).map(|i| ((i * 7919 + j * 104_729) % 1000) as f64 / 1000.0 - 0.5).collect())
            .collect();
        for round in 0..INVERSE_ROUNDS {
            orthonormalize(&mut block);
            for y in &mut block {
                *y = self.solve(&self.solve_transposed(y));
            }
            if round < 3 {
                continue;
            }
            orthonormalize(&mut block);
            let pairs = self.ritz_pairs(&block)?;
            // pairs headed for truncation must be accurate or the dropped
            // subspace eats part of the reachable target
            let converged = pairs.iter().filter(|(s, _, _)| *s <= tol * RANK_MARGIN).all(|(s, x, y)| {
                let back = self.mul_transposed(x);
                let r: f64 = back.iter().zip(y).map(|(b, yi)| (b - s * yi).powi(2)).sum::<f64>().sqrt();
                r <= tol
            });
            if converged {
                return Ok(Some(pairs));
            }
        }
        Ok(None)
    }

    /// Rayleigh-Ritz on `Xᵀ L Y` with `X` spanning `L⁻ᵀ Y`. Recovering the
    /// left vectors from `L Y` instead would lose them to rounding whenever a
    /// singular value sits below machine precision.
    fn ritz_pairs(&self, block: &[Vec<f64>]) -> Result<Vec<(f64, Vec<f64>, Vec<f64>)>, LinalgError> {
        let p = block.len();
        let mut left: Vec<Vec<f64>> = block.iter().map(|y| self.solve_transposed(y)).collect();
        orthonormalize(&mut left);
        let images: Vec<Vec<f64>> = block.iter().map(|y| self.mul(y)).collect();
        let mut data = Vec::with_capacity(p * p);
        for x in &left {
            data.extend(images.iter().map(|z| linalg::dot(x, z)));
        }
        let f = linalg::svd(&DenseMatrix::from_vec(p, p, data)?)?;
        let n = self.dim();
        let mut out = Vec::with_capacity(p);
        for l in (0..f.singular_values.len()).rev() {
            let mut x = vec![0.0; n];
            let mut y = vec![0.0; n];
            for j in 0..p {
                linalg::axpy(f.u.get(j, l), &left[j], &mut x);
                linalg::axpy(f.v.get(j, l), &block[j], &mut y);
            }
            out.push((f.singular_values[l], x, y));
        }
        Ok(out)
    }

    /// Minimum-norm least squares for `L y ≈ b` with singular values at or
    /// below the rank threshold of a `t x t` problem discarded. Returns `y`
    /// and the number of discarded directions, adding the squared unreachable
    /// part of `b` to `lost`; `None` when the rank is too close to call.
    fn truncated_solve(&self, b: &[f64], t: usize, lost: &mut f64) -> Option<(Vec<f64>, usize)> {
        let n = self.dim();
        if n == 0 {
            return Some((Vec::new(), 0));
        }
        if self.0.iter().enumerate().any(|(i, r)| r[i] == 0.0 || !r[i].is_finite()) {
            return None;
        }
        // σ_min ≥ 1/(√n ‖L⁻¹‖₁); the estimate may undershoot, hence the slack
        let coarse_tol = linalg::rank_tolerance(self.frobenius(), t, t);
        let sigma_min_bound = 1.0 / ((n as f64).sqrt() * self.inverse_norm1_estimate());
        if sigma_min_bound > 15.0 * coarse_tol {
            return Some((self.solve(b), 0));
        }
        let tol = linalg::rank_tolerance(self.largest_singular_value(), t, t);
        let mut block = SMALL_BLOCK;
        let (small, dropped) = loop {
            let small = self.smallest_singular(tol, block).ok()??;
            if small.iter().any(|(s, _, _)| *s > tol / RANK_MARGIN && *s < tol * RANK_MARGIN) {
                return None;
            }
            let dropped = small.iter().filter(|(s, _, _)| *s <= tol).count();
            if dropped < small.len() || small.len() == n {
                break (small, dropped);
            }
            // every value found is below the threshold, so more may be hiding
            if block >= MAX_BLOCK {
                return None;
            }
            block *= 2;
        };
        let dropped: Vec<&(f64, Vec<f64>, Vec<f64>)> = small[..dropped].iter().collect();
        let mut rhs = b.to_vec();
        for (_, x, _) in &dropped {
            let c = linalg::dot(x, &rhs);
            *lost += c * c;
            linalg::axpy(-c, x, &mut rhs);
        }
        if dropped.len() == n {
            return Some((vec![0.0; n], n));
        }
        let mut y = self.solve(&rhs);
        for (_, _, v) in &dropped {
            let c = linalg::dot(v, &y);
            linalg::axpy(-c, v, &mut y);
        }
        Some((y, dropped.len()))
    }
}

/// Modified Gram-Schmidt, applied twice.
fn orthonormalize(vs: &mut [Vec<f64>]) {
    for _ in 0..2 {
        for j in 0..vs.len() {
            let (done, rest) = vs.split_at_mut(j);
            let v = &mut rest[0];
            for u in done.iter() {
                let c = linalg::dot(u, v);
                linalg::axpy(-c, u, v);
            }
            let nv = linalg::norm(v);
            if nv > 0.0 {
                v.iter_mut().for_each(|x| *x /= nv);
            }
        }
    }
}

/// Momentum-approximation coefficients for every step of an existing `W`.
pub fn solve_all(w: &LowerTriangular, m: &MomentumMatrix) -> Result<Vec<StepReport>, MomentumError> {
    let mut s = OnlineMaSolver::new(w.dim(), m.beta());
    (1..=w.dim()).map(|t| s.push_row(w.row_prefix(t - 1))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::momentum::solve_ma_weights;

    #[test]
    fn identity_reproduces_momentum_rows() {
        let m = MomentumMatrix::new(0.9, 8).unwrap();
        let reps = solve_all(&LowerTriangular::identity(8), &m).unwrap();
        for rep in reps {
            assert_eq!(rep.path, SolvePath::Incremental);
            assert_eq!(rep.weights.as_slice(), m.target(rep.t));
            assert_eq!(rep.rank, rep.t);
        }
    }

    #[test]
    fn zero_columns_match_svd_solution() {
        let mut w = LowerTriangular::zeros(6);
        let rows: [&[f64]; 6] = [
            &[0.5],
            &[0.2, 0.0],
            &[0.1, 0.0, 0.4],
            &[0.0, 0.3, 0.1, 0.5],
            &[0.0, 0.0, 0.2, 0.0, 0.0],
            &[0.0, 0.0, 0.1, 0.2, 0.0, 0.3],
        ];
        for (i, r) in rows.iter().enumerate() {
            w.row_prefix_mut(i).copy_from_slice(r);
        }
        let m = MomentumMatrix::new(0.7, 6).unwrap();
        let reps = solve_all(&w, &m).unwrap();
        for rep in reps {
            let exact = solve_ma_weights(&w, &m, rep.t).unwrap();
            for (x, y) in rep.weights.iter().zip(exact.weights.active_slice()) {
                assert!((x - y).abs() < 1e-10, "t={} {:?} vs {:?}", rep.t, rep.weights, exact.weights);
            }
            assert_eq!(rep.rank, exact.rank, "t={}", rep.t);
            assert!((rep.one_minus_alpha - exact.one_minus_alpha).abs() < 1e-10);
        }
    }

    fn assert_matches_svd(w: &LowerTriangular, beta: f64) -> Vec<StepReport> {
        let m = MomentumMatrix::new(beta, w.dim()).unwrap();
        let reps = solve_all(w, &m).unwrap();
        for rep in &reps {
            let exact = solve_ma_weights(w, &m, rep.t).unwrap();
            for (x, y) in rep.weights.iter().zip(exact.weights.active_slice()) {
                assert!((x - y).abs() < 1e-10, "t={} {:?} vs {:?}", rep.t, rep.weights, exact.weights);
            }
            assert_eq!(rep.rank, exact.rank, "t={}", rep.t);
            assert!((rep.residual - exact.residual).abs() < 1e-10);
            assert!((rep.one_minus_alpha - exact.one_minus_alpha).abs() < 1e-10);
        }
        reps
    }

    #[test]
    fn proportional_columns_stay_incremental() {
        // versions 1 and 2 only ever arrive together in row 3, so their columns are proportional
        let rows: [&[f64]; 7] = [
            &[1.0],
            &[0.5, 0.0],
            &[0.5, 0.0, 0.0],
            &[0.0, 0.3, 0.15, 0.55],
            &[0.0, 0.0, 0.0, 0.4, 0.6],
            &[0.0, 0.0, 0.0, 0.0, 0.2, 0.8],
            &[0.0, 0.0, 0.0, 0.1, 0.0, 0.3, 0.6],
        ];
        let mut w = LowerTriangular::zeros(7);
        for (i, r) in rows.iter().enumerate() {
            w.row_prefix_mut(i).copy_from_slice(r);
        }
        let reps = assert_matches_svd(&w, 0.9);
        assert!(reps.iter().all(|r| r.path == SolvePath::Incremental));
        assert_eq!(reps[6].rank, 5);
    }

    #[test]
    fn dependence_that_later_resolves() {
        // columns 0 and 1 are proportional until row 4 separates them
        let rows: [&[f64]; 6] = [
            &[0.0],
            &[0.4, 0.6],
            &[0.2, 0.3, 0.5],
            &[0.0, 0.0, 0.5, 0.5],
            &[0.3, 0.0, 0.0, 0.3, 0.4],
            &[0.0, 0.0, 0.2, 0.0, 0.3, 0.5],
        ];
        let mut w = LowerTriangular::zeros(6);
        for (i, r) in rows.iter().enumerate() {
            w.row_prefix_mut(i).copy_from_slice(r);
        }
        assert_matches_svd(&w, 0.5);
    }

    #[test]
    fn simulated_near_singular_history_matches_svd_residual() {
        // long uniform delays with a steep staleness penalty leave singular
        // values far below the rank threshold, exercising deflation and truncation
        use crate::engine::{simulate_staleness, Method, SimConfig};
        use crate::staleness::DelayDistribution;
        let mut c = SimConfig::example(Method::MaFull);
        c.sampled = 60;
        c.cohort = 60;
        c.horizon = 200;
        c.p = 2.0;
        c.delay = DelayDistribution::uniform(40);
        c.seed = 1;
        let (w, _) = simulate_staleness(&c).unwrap();
        let m = MomentumMatrix::new(0.9, 200).unwrap();
        let mut s = OnlineMaSolver::new(200, 0.9);
        for t in 1..=200 {
            let rep = s.push_row(w.matrix().row_prefix(t - 1)).unwrap();
            let exact = solve_ma_weights(w.matrix(), &m, t).unwrap();
            assert_eq!(rep.rank, exact.rank, "t={t}");
            assert!((rep.residual - exact.residual).abs() < 1e-9, "t={t} {} vs {}", rep.residual, exact.residual);
        }
    }

    #[test]
    fn wrong_row_length_is_rejected() {
        let mut s = OnlineMaSolver::new(3, 0.5);
        assert!(s.push_row(&[1.0, 0.0]).is_err());
        s.push_row(&[1.0]).unwrap();
        assert!(s.push_row(&[f64::NAN, 1.0]).is_err());
    }
}
