//! Synthetic federated objectives and the all-client oracle quantities used
//! by the convergence bounds.
//!
//! Client `k` holds `F_k(θ) = ½ (θ − c_k)ᵀ Λ (θ − c_k)` with a shared diagonal
//! curvature `Λ`. Full-batch gradient descent on it has a closed form, so
//! local training and the population update are exact.

use crate::linalg;
use crate::momentum::momentum_row;
use crate::rng::{stream, Stream};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("invalid task: {0}")]
    Invalid(String),
    #[error("client {client} diverged at step {step}")]
    Diverged { client: usize, step: usize },
    #[error("population of {0} clients is too large for the all-client oracle")]
    OracleTooLarge(usize),
}

/// Largest population the all-client oracle enumerates.
pub const ORACLE_MAX_CLIENTS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Quadratic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    #[serde(default = "default_kind")]
    pub kind: TaskKind,
    pub dim: usize,
    pub clients: usize,
    /// Standard deviation of client centers around the shared center.
    #[serde(default = "default_heterogeneity")]
    pub heterogeneity: f64,
    /// Smallest curvature; curvatures are log-spaced from 1 down to it.
    #[serde(default = "one")]
    pub min_curvature: f64,
    /// Value of every coordinate of the shared center.
    #[serde(default)]
    pub center: f64,
    /// Value of every coordinate of the initial model.
    #[serde(default = "one")]
    pub init: f64,
}

fn default_kind() -> TaskKind {
    TaskKind::Quadratic
}

fn default_heterogeneity() -> f64 {
    0.1
}

fn one() -> f64 {
    1.0
}

impl TaskSpec {
    pub fn quadratic(dim: usize, clients: usize, heterogeneity: f64) -> Self {
        TaskSpec {
            kind: TaskKind::Quadratic,
            dim,
            clients,
            heterogeneity,
            min_curvature: 1.0,
            center: 0.0,
            init: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        if self.dim == 0 || self.clients == 0 {
            return Err(TaskError::Invalid("dimension and client count must be positive".into()));
        }
        if !(self.heterogeneity >= 0.0) || !(self.min_curvature > 0.0 && self.min_curvature <= 1.0) {
            return Err(TaskError::Invalid(format!(
                "heterogeneity must be non-negative and min_curvature in (0, 1], got {} and {}",
                self.heterogeneity, self.min_curvature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct QuadraticTask {
    dim: usize,
    clients: usize,
    centers: Vec<f64>,
    mean: Vec<f64>,
    curvature: Vec<f64>,
    init: Vec<f64>,
    floor: f64,
}

impl QuadraticTask {
    pub fn new(spec: &TaskSpec, seed: u64) -> Result<Self, TaskError> {
        spec.validate()?;
        let (d, m) = (spec.dim, spec.clients);
        let mut rng = stream(seed, Stream::Task);
        let centers: Vec<f64> = (0..m * d)
            .map(|_| spec.center + spec.heterogeneity * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let curvature = if d == 1 {
            vec![1.0]
        } else {
            let l = spec.min_curvature.ln();
            (0..d).map(|i| (l * i as f64 / (d - 1) as f64).exp()).collect()
        };
        Ok(Self::from_parts(centers, curvature, vec![spec.init; d], m))
    }

    /// Build from explicit centers (row-major, `clients x dim`) and curvature.
    pub fn from_parts(centers: Vec<f64>, curvature: Vec<f64>, init: Vec<f64>, clients: usize) -> Self {
        let dim = curvature.len();
        let mut mean = vec![0.0; dim];
        for k in 0..clients {
            linalg::axpy(1.0 / clients as f64, &centers[k * dim..(k + 1) * dim], &mut mean);
        }
        let mut floor = 0.0;
        for k in 0..clients {
            let c = &centers[k * dim..(k + 1) * dim];
            floor += (0..dim).map(|i| 0.5 * curvature[i] * (c[i] - mean[i]).powi(2)).sum::<f64>();
        }
        floor /= clients as f64;
        QuadraticTask { dim, clients, centers, mean, curvature, init, floor }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn clients(&self) -> usize {
        self.clients
    }

    pub fn center(&self, k: usize) -> &[f64] {
        &self.centers[k * self.dim..(k + 1) * self.dim]
    }

    pub fn optimum(&self) -> &[f64] {
        &self.mean
    }

    pub fn curvature(&self) -> &[f64] {
        &self.curvature
    }

    pub fn initial_model(&self) -> Vec<f64> {
        self.init.clone()
    }

    /// Global objective `(1/m) Σ_k F_k(θ)`.
    pub fn loss(&self, theta: &[f64]) -> f64 {
        self.floor + self.suboptimality(theta)
    }

    /// `f(θ) − f(c̄)`.
    pub fn suboptimality(&self, theta: &[f64]) -> f64 {
        theta
            .iter()
            .zip(&self.mean)
            .zip(&self.curvature)
            .map(|((t, c), l)| 0.5 * l * (t - c) * (t - c))
            .sum()
    }

    pub fn distance_to_optimum(&self, theta: &[f64]) -> f64 {
        theta.iter().zip(&self.mean).map(|(t, c)| (t - c) * (t - c)).sum::<f64>().sqrt()
    }

    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        theta.iter().zip(&self.mean).zip(&self.curvature).map(|((t, c), l)| l * (t - c)).collect()
    }

    /// Per-coordinate contraction of `Q` gradient steps: `1 − (1 − η_l λ_i)^Q`.
    pub fn local_gain(&self, lr: f64, steps: usize) -> Vec<f64> {
        self.curvature.iter().map(|l| 1.0 - (1.0 - lr * l).powi(steps as i32)).collect()
    }

    /// `Δ = θ − θ'` after `Q` full-batch gradient steps on client `k`.
    pub fn client_update(&self, theta: &[f64], client: usize, gain: &[f64]) -> Vec<f64> {
        theta.iter().zip(self.center(client)).zip(gain).map(|((t, c), g)| g * (t - c)).collect()
    }

    /// Population average update `d*(θ) = (1/m) Σ_k Δ_k(θ)`.
    pub fn oracle_population_update(&self, theta: &[f64], gain: &[f64]) -> Result<Vec<f64>, TaskError> {
        if self.clients > ORACLE_MAX_CLIENTS {
            return Err(TaskError::OracleTooLarge(self.clients));
        }
        Ok(theta.iter().zip(&self.mean).zip(gain).map(|((t, c), g)| g * (t - c)).collect())
    }
}

/// `Δ` from `Q` explicit gradient steps, checking for divergence along the way.
pub fn local_train_iterative(task: &QuadraticTask, theta: &[f64], client: usize, lr: f64, steps: usize) -> Result<Vec<f64>, TaskError> {
    let mut x = theta.to_vec();
    for step in 0..steps {
        let c = task.center(client);
        for i in 0..x.len() {
            x[i] -= lr * task.curvature[i] * (x[i] - c[i]);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(TaskError::Diverged { client, step });
        }
    }
    Ok(theta.iter().zip(&x).map(|(a, b)| a - b).collect())
}

/// `θ* = θ₁ − η D* Mᵀ 𝟙`, with `d*_t` evaluated on the supplied model sequence `θ_1..θ_T`.
pub fn ideal_trajectory(
    task: &QuadraticTask,
    models: &[Vec<f64>],
    gain: &[f64],
    beta: f64,
    eta: f64,
) -> Result<Vec<f64>, TaskError> {
    let t_len = models.len();
    let mut out = models.first().cloned().unwrap_or_else(|| task.initial_model());
    // column sums of M: Σ_{t ≥ s} β^{t−s}(1−β) = 1 − β^{T−s+1}
    let weights = momentum_row(beta, t_len);
    let mut colsum = 0.0;
    for s in (0..t_len).rev() {
        colsum += weights[s];
        let d = task.oracle_population_update(&models[s], gain)?;
        linalg::axpy(-eta * colsum, &d, &mut out);
    }
    Ok(out)
}

/// Empirical constants of the bounded-update, dissimilarity and
/// subset-sampling assumptions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub s: f64,
    pub g: f64,
    /// Monte-Carlo estimate, not a certified bound.
    pub rho_estimate: f64,
    pub tau_max: usize,
    pub cohort: usize,
    pub horizon: usize,
    pub eta: f64,
    /// `‖A‖_F²` of the run, when the momentum approximation was used.
    pub a_frob_sq: Option<f64>,
    /// `Σ_i i (1 − α_i)`.
    pub alpha_deficit: Option<f64>,
}

/// Measure `S`, `G` and `ρ̂` along a model sequence. `ρ̂` takes the worst of
/// `subsets` random client subsets of size `subset_size` at every `stride`-th model.
#[allow(clippy::too_many_arguments)]
pub fn measure_bound_inputs(
    task: &QuadraticTask,
    models: &[Vec<f64>],
    gain: &[f64],
    subset_size: usize,
    subsets: usize,
    stride: usize,
    seed: u64,
) -> Result<(f64, f64, f64), TaskError> {
    if models.is_empty() {
        return Err(TaskError::Invalid("no model trace retained".into()));
    }
    let (m, d) = (task.clients, task.dim);
    let mut rng = stream(seed, Stream::Probe);
    let (mut s2, mut g2, mut rho2) = (0.0f64, 0.0f64, 0.0f64);
    let mut errs = vec![0.0; m * d];
    let mut norms = vec![0.0; m];
    for (idx, theta) in models.iter().enumerate() {
        let dstar = task.oracle_population_update(theta, gain)?;
        s2 = s2.max(linalg::norm_sq(&dstar));
        for k in 0..m {
            let e = &mut errs[k * d..(k + 1) * d];
            let dk = task.client_update(theta, k, gain);
            for i in 0..d {
                e[i] = dk[i] - dstar[i];
            }
            norms[k] = linalg::norm_sq(e);
        }
        g2 = g2.max(norms.iter().sum::<f64>() / m as f64);
        if subsets == 0 || idx % stride.max(1) != 0 {
            continue;
        }
        let size = subset_size.clamp(1, m);
        let mut mean = vec![0.0; d];
        for _ in 0..subsets {
            mean.iter_mut().for_each(|x| *x = 0.0);
            let mut spread = 0.0;
            for k in sample(&mut rng, m, size) {
                linalg::axpy(1.0 / size as f64, &errs[k * d..(k + 1) * d], &mut mean);
                spread += norms[k];
            }
            spread /= size as f64;
            rho2 = rho2.max(spread - linalg::norm_sq(&mean));
        }
    }
    Ok((s2.sqrt(), g2.sqrt(), rho2.max(0.0).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundKind {
    Sync,
    Async,
    MaFullRank,
    MaGeneral,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapCheck {
    pub kind: BoundKind,
    pub lhs: f64,
    pub rhs: f64,
    pub satisfied: bool,
}

/// `‖(θ* − θ_final)/T‖²`.
pub fn gap_lhs(ideal: &[f64], last: &[f64], horizon: usize) -> f64 {
    let t = horizon as f64;
    ideal.iter().zip(last).map(|(a, b)| ((a - b) / t).powi(2)).sum()
}

pub fn bound_rhs(kind: BoundKind, b: &BoundInputs) -> f64 {
    let (eta, t, c) = (b.eta, b.horizon as f64, b.cohort as f64);
    let (s2, g2, r2) = (b.s * b.s, b.g * b.g, b.rho_estimate * b.rho_estimate);
    let a = b.a_frob_sq.unwrap_or(0.0);
    match kind {
        BoundKind::Sync => 0.5 * eta * eta * t * g2,
        BoundKind::Async => eta * eta * (2.0 * t * s2 + t * g2 + 2.0 * r2 / c),
        BoundKind::MaFullRank => eta * eta * (t * g2 + 2.0 * r2 / (t * c) * a),
        BoundKind::MaGeneral => {
            let deficit = b.alpha_deficit.unwrap_or(0.0);
            eta * eta * (2.0 * s2 * deficit / t + g2 * t + 2.0 * r2 / (t * c) * a)
        }
    }
}

pub fn bound_gap_check(kind: BoundKind, ideal: &[f64], last: &[f64], inputs: &BoundInputs) -> GapCheck {
    let lhs = gap_lhs(ideal, last, inputs.horizon);
    let rhs = bound_rhs(kind, inputs);
    GapCheck { kind, lhs, rhs, satisfied: lhs <= rhs }
}
