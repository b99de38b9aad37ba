//! Server update rules: FedAvg, FedAvgM and FedAdam.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Fedavg,
    Fedavgm,
    Fedadam,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizerError {
    #[error("non-finite server update at step {step}")]
    Diverged { step: usize },
    #[error("update has {got} entries, model has {expected}")]
    Dimension { expected: usize, got: usize },
}

/// What the first moment is built from.
#[derive(Debug, Clone, Copy)]
pub enum Drive<'a> {
    /// The received aggregate `r_t`; the optimizer runs its own momentum.
    Aggregate(&'a [f64]),
    /// An already formed momentum `m̃_t` (momentum approximation); the
    /// optimizer's first-moment recursion is bypassed. `raw` is still `r_t`,
    /// which FedAdam's second moment consumes.
    Momentum { momentum: &'a [f64], raw: &'a [f64] },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerOptState {
    pub kind: OptimizerKind,
    pub beta: f64,
    pub beta2: f64,
    pub eps: f64,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub steps: usize,
}

impl ServerOptState {
    pub fn new(kind: OptimizerKind, dim: usize, beta: f64, beta2: f64, eps: f64) -> Self {
        let (first, second) = match kind {
            OptimizerKind::Fedavg => (Vec::new(), Vec::new()),
            OptimizerKind::Fedavgm => (vec![0.0; dim], Vec::new()),
            OptimizerKind::Fedadam => (vec![0.0; dim], vec![0.0; dim]),
        };
        ServerOptState { kind, beta, beta2, eps, first, second, steps: 0 }
    }

    /// Momentum parameter the optimizer applies to its drive; FedAvg has none.
    pub fn effective_beta(&self) -> f64 {
        match self.kind {
            OptimizerKind::Fedavg => 0.0,
            _ => self.beta,
        }
    }

    /// Elementwise preconditioner `H` (all ones unless FedAdam).
    pub fn preconditioner(&self, dim: usize) -> Vec<f64> {
        match self.kind {
            OptimizerKind::Fedadam => self.second.iter().map(|v| v.sqrt() + self.eps).collect(),
            _ => vec![1.0; dim],
        }
    }

    /// `θ ← θ − η H⁻¹ m` in place.
    pub fn server_step(&mut self, theta: &mut [f64], drive: Drive<'_>, eta: f64) -> Result<(), OptimizerError> {
        let raw = match drive {
            Drive::Aggregate(r) => r,
            Drive::Momentum { raw, .. } => raw,
        };
        let d = theta.len();
        if raw.len() != d {
            return Err(OptimizerError::Dimension { expected: d, got: raw.len() });
        }
        if let Drive::Momentum { momentum, .. } = drive {
            if momentum.len() != d {
                return Err(OptimizerError::Dimension { expected: d, got: momentum.len() });
            }
        }
        self.steps += 1;
        if self.kind == OptimizerKind::Fedadam {
            let b2 = self.beta2;
            for (v, r) in self.second.iter_mut().zip(raw) {
                *v = b2 * *v + (1.0 - b2) * r * r;
            }
        }
        let step: &[f64] = match (drive, self.kind) {
            (Drive::Momentum { momentum, .. }, _) => momentum,
            (Drive::Aggregate(r), OptimizerKind::Fedavg) => r,
            (Drive::Aggregate(r), _) => {
                let b = self.beta;
                for (m, x) in self.first.iter_mut().zip(r) {
                    *m = b * *m + (1.0 - b) * x;
                }
                &self.first
            }
        };
        if self.kind == OptimizerKind::Fedadam {
            for ((th, m), v) in theta.iter_mut().zip(step).zip(&self.second) {
                *th -= eta * m / (v.sqrt() + self.eps);
            }
        } else {
            for (th, m) in theta.iter_mut().zip(step) {
                *th -= eta * m;
            }
        }
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(OptimizerError::Diverged { step: self.steps });
        }
        Ok(())
    }
}

/// `ema ← decay·ema + (1 − decay)·θ`.
pub fn ema_update(ema: &mut [f64], theta: &[f64], decay: f64) {
    for (e, t) in ema.iter_mut().zip(theta) {
        *e = decay * *e + (1.0 - decay) * t;
    }
}
