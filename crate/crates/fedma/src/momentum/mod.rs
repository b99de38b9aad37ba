//! Momentum weights, the momentum-approximation solvers and the bias
//! diagnostics built on them.
//!
//! Iterations are counted from 1 in the public API: "step `t`" means the
//! leading `t x t` block of `W` and row `t - 1` (zero based) of `M`.

mod online;

pub use online::{solve_all, OnlineMaSolver, SolvePath, StepReport};

use crate::linalg::{self, DenseMatrix, LinalgError, LowerTriangular};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MomentumError {
    #[error("momentum parameter {0} is outside [0, 1)")]
    InvalidBeta(f64),
    #[error("step {t} is outside the horizon 1..={horizon}")]
    StepOutOfRange { t: usize, horizon: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Weight `β^(t−s)(1−β)` of update `s` inside the momentum buffer at `t`, for a
/// `t`-long row. Entry `s` (zero based) of the returned vector.
pub fn momentum_row(beta: f64, t: usize) -> Vec<f64> {
    let mut row = vec![0.0; t];
    let mut w = 1.0 - beta;
    for s in (0..t).rev() {
        row[s] = w;
        w *= beta;
    }
    row
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentumMatrix {
    beta: f64,
    m: LowerTriangular,
}

impl MomentumMatrix {
    pub fn new(beta: f64, horizon: usize) -> Result<Self, MomentumError> {
        if !(0.0..1.0).contains(&beta) || !beta.is_finite() {
            return Err(MomentumError::InvalidBeta(beta));
        }
        let mut m = LowerTriangular::zeros(horizon);
        for t in 0..horizon {
            m.row_prefix_mut(t).copy_from_slice(&momentum_row(beta, t + 1));
        }
        Ok(MomentumMatrix { beta, m })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn horizon(&self) -> usize {
        self.m.dim()
    }

    pub fn matrix(&self) -> &LowerTriangular {
        &self.m
    }

    /// Row for step `t`, restricted to its first `t` entries.
    pub fn target(&self, t: usize) -> &[f64] {
        self.m.row_prefix(t - 1)
    }
}

/// `θ₁ − η R Mᵀ 𝟙`, with the updates `r_1..r_T` as the columns of `r`.
pub fn unrolled_momentum_update(
    theta1: &[f64],
    r: &DenseMatrix,
    m: &MomentumMatrix,
    eta: f64,
) -> Result<Vec<f64>, MomentumError> {
    let horizon = m.horizon();
    if r.cols() != horizon || r.rows() != theta1.len() {
        return Err(LinalgError::DimensionMismatch {
            op: "unrolled_momentum_update",
            detail: format!(
                "history is {}x{}, model has {} entries, horizon {}",
                r.rows(),
                r.cols(),
                theta1.len(),
                horizon
            ),
        }
        .into());
    }
    let mut colsum = vec![0.0; horizon];
    for t in 0..horizon {
        for (c, v) in colsum.iter_mut().zip(m.matrix().row_prefix(t)) {
            *c += v;
        }
    }
    let drive = r.matvec(&colsum)?;
    Ok(theta1.iter().zip(&drive).map(|(th, d)| th - eta * d).collect())
}

/// Coefficients over the history; entries past `active` are zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub horizon: usize,
    pub active: usize,
    pub coeffs: Vec<f64>,
}

impl WeightVector {
    pub fn zeros(horizon: usize) -> Self {
        WeightVector {
            horizon,
            active: 0,
            coeffs: vec![0.0; horizon],
        }
    }

    pub fn from_active(horizon: usize, active: &[f64]) -> Self {
        let mut coeffs = vec![0.0; horizon];
        coeffs[..active.len()].copy_from_slice(active);
        WeightVector {
            horizon,
            active: active.len(),
            coeffs,
        }
    }

    pub fn active_slice(&self) -> &[f64] {
        &self.coeffs[..self.active]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaSolution {
    pub weights: WeightVector,
    /// `‖aᵀW[:t,:t] − M[t,:t]‖²`.
    pub residual: f64,
    pub rank: usize,
    /// `1 − α_t`: share of the target row outside the row space of `W[:t,:t]`.
    pub one_minus_alpha: f64,
}

/// `aᵀ W[:t,:t]` for `a` of length `t`.
pub fn combine_rows(w: &LowerTriangular, a: &[f64]) -> Vec<f64> {
    let t = a.len();
    let mut out = vec![0.0; t];
    for (i, &ai) in a.iter().enumerate() {
        if ai != 0.0 {
            linalg::axpy(ai, w.row_prefix(i), &mut out[..=i]);
        }
    }
    out
}

pub fn step_residual(w: &LowerTriangular, target: &[f64], a: &[f64]) -> f64 {
    combine_rows(w, a)
        .iter()
        .zip(target)
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// Minimum-norm solution of `min ‖aᵀ W[:t,:t] − M[t,:t]‖`, solved from scratch with an SVD.
pub fn solve_ma_weights(
    w: &LowerTriangular,
    m: &MomentumMatrix,
    t: usize,
) -> Result<MaSolution, MomentumError> {
    let horizon = w.dim().min(m.horizon());
    if t == 0 || t > horizon {
        return Err(MomentumError::StepOutOfRange { t, horizon });
    }
    let wt = w.leading_dense(t);
    let target = m.target(t);
    let f = linalg::svd(&wt)?;
    let a = linalg::min_norm_from_svd(&f, target);
    let residual = step_residual(w, target, &a);
    let one_minus_alpha = one_minus_alpha_from_svd(&f, target, linalg::norm_sq(target));
    Ok(MaSolution {
        weights: WeightVector::from_active(w.dim(), &a),
        residual,
        rank: f.rank,
        one_minus_alpha,
    })
}

pub(crate) fn one_minus_alpha_from_svd(f: &linalg::SvdFactorization, target: &[f64], row_norm_sq: f64) -> f64 {
    if row_norm_sq == 0.0 {
        return 0.0;
    }
    let mut proj = 0.0;
    for l in 0..f.rank {
        let c: f64 = target.iter().enumerate().map(|(j, x)| x * f.v.get(j, l)).sum();
        proj += c * c;
    }
    (1.0 - proj / row_norm_sq).clamp(0.0, 1.0)
}

/// Two-coefficient fit `min ‖(u e_t + v ã_{t−1})ᵀ W − M[t,:]‖` with a minimum-norm tie break.
pub fn solve_lightweight(
    prev: &WeightVector,
    w: &LowerTriangular,
    m: &MomentumMatrix,
    t: usize,
) -> Result<(f64, f64), MomentumError> {
    let horizon = w.dim().min(m.horizon());
    if t == 0 || t > horizon {
        return Err(MomentumError::StepOutOfRange { t, horizon });
    }
    let x1 = w.row_prefix(t - 1);
    let mut x2 = vec![0.0; t];
    let prev_len = prev.active.min(t - 1);
    let lead = combine_rows(w, &prev.coeffs[..prev_len]);
    x2[..prev_len].copy_from_slice(&lead);
    lightweight_fit(x1, &x2, m.target(t))
}

pub(crate) fn lightweight_fit(x1: &[f64], x2: &[f64], target: &[f64]) -> Result<(f64, f64), MomentumError> {
    let mut data = Vec::with_capacity(2 * x1.len());
    data.extend_from_slice(x1);
    data.extend_from_slice(x2);
    let sys = DenseMatrix::from_vec(2, x1.len(), data)?;
    let uv = linalg::least_squares_min_norm(&sys, target)?;
    Ok((uv[0], uv[1]))
}

/// `m̃ = R a` over the first `a.active` columns of the history.
pub fn ma_momentum(r: &DenseMatrix, a: &WeightVector) -> Result<Vec<f64>, MomentumError> {
    if a.active > r.cols() {
        return Err(LinalgError::DimensionMismatch {
            op: "ma_momentum",
            detail: format!("{} coefficients for {} history columns", a.active, r.cols()),
        }
        .into());
    }
    let mut out = vec![0.0; r.rows()];
    for i in 0..r.rows() {
        out[i] = linalg::dot(&r.row(i)[..a.active], a.active_slice());
    }
    Ok(out)
}

/// Single-buffer state of the light-weight variant.
#[derive(Debug, Clone, PartialEq)]
pub struct LightweightState {
    pub weights: WeightVector,
    pub buffer: Vec<f64>,
    pub last_uv: (f64, f64),
}

impl LightweightState {
    pub fn new(horizon: usize, dim: usize) -> Self {
        LightweightState {
            weights: WeightVector::zeros(horizon),
            buffer: vec![0.0; dim],
            last_uv: (0.0, 0.0),
        }
    }

    /// `m̃ ← u r_t + v m̃` and `ã ← u e_t + v ã`.
    pub fn step(&mut self, r_t: &[f64], u: f64, v: f64) {
        for (b, r) in self.buffer.iter_mut().zip(r_t) {
            *b = u * r + v * *b;
        }
        let t = self.weights.active;
        for c in &mut self.weights.coeffs[..t] {
            *c *= v;
        }
        self.weights.coeffs[t] = u;
        self.weights.active = t + 1;
        self.last_uv = (u, v);
    }
}

/// Implicit bias `MW − M` and, when weights are given, the corrected bias `AW − M`.
#[derive(Debug, Clone)]
pub struct BiasReport {
    pub implicit: DenseMatrix,
    pub implicit_frob_sq: f64,
    pub corrected: Option<DenseMatrix>,
    pub corrected_frob_sq: Option<f64>,
}

pub fn bias_decomposition(
    w: &LowerTriangular,
    m: &MomentumMatrix,
    a: Option<&DenseMatrix>,
) -> Result<BiasReport, MomentumError> {
    let wd = w.to_dense();
    let md = m.matrix().to_dense();
    let implicit = md.matmul(&wd)?.sub(&md)?;
    let corrected = match a {
        Some(a) => Some(a.matmul(&wd)?.sub(&md)?),
        None => None,
    };
    Ok(BiasReport {
        implicit_frob_sq: implicit.frobenius_sq(),
        corrected_frob_sq: corrected.as_ref().map(|c| c.frobenius_sq()),
        implicit,
        corrected,
    })
}

/// One record of the per-iteration diagnostic series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRecord {
    pub t: usize,
    pub residual: f64,
    pub nullity: usize,
    pub one_minus_alpha: f64,
    pub a_frob_sq: f64,
    pub log_ratio: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MaDiagnostics {
    pub records: Vec<DiagnosticRecord>,
    /// `‖AW − M‖_F² / ‖M‖_F²` over the steps seen so far.
    pub cumulative_relative_error: f64,
}

/// Ratio `log ‖A‖_F² / log(C t²)`, or 0 where the logarithm is undefined.
pub fn log_ratio(a_frob_sq: f64, cohort: usize, t: usize) -> f64 {
    let denom = ((cohort * t * t) as f64).ln();
    if a_frob_sq <= 0.0 || denom <= 0.0 {
        0.0
    } else {
        a_frob_sq.ln() / denom
    }
}

/// Accumulates diagnostic records one step at a time.
#[derive(Debug, Clone, Default)]
pub struct DiagnosticsBuilder {
    out: MaDiagnostics,
    a_frob_sq: f64,
    err_sum: f64,
    m_sum: f64,
}

impl DiagnosticsBuilder {
    pub fn push(&mut self, t: usize, cohort: usize, target: &[f64], a: &[f64], residual: f64, rank: usize, one_minus_alpha: f64) {
        self.a_frob_sq += linalg::norm_sq(a);
        self.err_sum += residual;
        self.m_sum += linalg::norm_sq(target);
        self.out.records.push(DiagnosticRecord {
            t,
            residual,
            nullity: t - rank,
            one_minus_alpha,
            a_frob_sq: self.a_frob_sq,
            log_ratio: log_ratio(self.a_frob_sq, cohort, t),
        });
        self.out.cumulative_relative_error = if self.m_sum > 0.0 { self.err_sum / self.m_sum } else { 0.0 };
    }

    pub fn finish(self) -> MaDiagnostics {
        self.out
    }
}

/// Reference diagnostics for a complete weight matrix `A` (rows `a_t`), using one SVD per step.
pub fn compute_diagnostics(
    w: &LowerTriangular,
    m: &MomentumMatrix,
    a: &DenseMatrix,
    cohort: usize,
) -> Result<MaDiagnostics, MomentumError> {
    let horizon = w.dim().min(m.horizon()).min(a.rows());
    let mut b = DiagnosticsBuilder::default();
    for t in 1..=horizon {
        let target = m.target(t);
        let f = linalg::svd(&w.leading_dense(t))?;
        let at = &a.row(t - 1)[..t];
        let residual = step_residual(w, target, at);
        let oma = one_minus_alpha_from_svd(&f, target, linalg::norm_sq(target));
        b.push(t, cohort, target, at, residual, f.rank, oma);
    }
    Ok(b.finish())
}

/// Offline full-MA solve over a whole staleness matrix, returning `A` and its diagnostics.
pub fn full_ma_offline(
    w: &LowerTriangular,
    m: &MomentumMatrix,
    cohort: usize,
) -> Result<(DenseMatrix, MaDiagnostics), MomentumError> {
    let horizon = w.dim().min(m.horizon());
    let mut solver = OnlineMaSolver::new(horizon, m.beta());
    let mut a = DenseMatrix::zeros(horizon, horizon);
    let mut b = DiagnosticsBuilder::default();
    for t in 1..=horizon {
        let rep = solver.push_row(w.row_prefix(t - 1))?;
        a.row_mut(t - 1)[..t].copy_from_slice(&rep.weights);
        b.push(t, cohort, m.target(t), &rep.weights, rep.residual, rep.rank, rep.one_minus_alpha);
    }
    Ok((a, b.finish()))
}

/// Offline light-weight solve over a whole staleness matrix.
pub fn light_ma_offline(
    w: &LowerTriangular,
    m: &MomentumMatrix,
    cohort: usize,
) -> Result<(DenseMatrix, MaDiagnostics), MomentumError> {
    let horizon = w.dim().min(m.horizon());
    let mut state = LightweightState::new(horizon, 0);
    let mut a = DenseMatrix::zeros(horizon, horizon);
    let mut b = DiagnosticsBuilder::default();
    for t in 1..=horizon {
        let (u, v) = solve_lightweight(&state.weights, w, m, t)?;
        state.step(&[], u, v);
        let at = state.weights.active_slice();
        a.row_mut(t - 1)[..t].copy_from_slice(at);
        let target = m.target(t);
        let residual = step_residual(w, target, at);
        // rank and α are properties of W alone; the light variant reuses nothing from them
        b.push(t, cohort, target, at, residual, t, 0.0);
    }
    Ok((a, b.finish()))
}
