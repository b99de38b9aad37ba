//! Staleness bookkeeping: the matrix `W` of down-scaled arrival fractions,
//! the staleness bound and the client delay distributions.
//!
//! Rows and versions are zero based here; row `t` is filled while the server
//! waits for its `t`-th dispatch (counting from zero).

use crate::linalg::LowerTriangular;
use rand::Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StalenessError {
    #[error("arrival at row {row} carries future version {version}")]
    Causality { row: usize, version: usize },
    #[error("row {row} already holds {cohort} arrivals")]
    RowFull { row: usize, cohort: usize },
    #[error("row {row} is outside the horizon {horizon}")]
    OutOfHorizon { row: usize, horizon: usize },
    #[error("invalid delay distribution: {0}")]
    InvalidDistribution(String),
}

/// `e_index` in `R^horizon`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VersionOneHot {
    pub horizon: usize,
    pub index: usize,
}

impl VersionOneHot {
    pub fn dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.horizon];
        v[self.index] = 1.0;
        v
    }
}

/// `(τ + 1)^(−p)`.
pub fn downscale(tau: usize, p: f64) -> f64 {
    if p == 0.0 {
        1.0
    } else {
        ((tau + 1) as f64).powf(-p)
    }
}

/// Keep an update iff its staleness is within the bound.
pub fn apply_staleness_bound(tau: usize, tau_max: usize) -> bool {
    tau <= tau_max
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DelayKind {
    HalfNormal,
    Uniform,
    Exponential,
    Zero,
}

impl DelayKind {
    pub fn name(self) -> &'static str {
        match self {
            DelayKind::HalfNormal => "half-normal",
            DelayKind::Uniform => "uniform",
            DelayKind::Exponential => "exponential",
            DelayKind::Zero => "zero",
        }
    }
}

/// Client delay in whole ticks. `scale` is the half-normal σ or the
/// exponential mean; `cutoff` bounds the uniform distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelayDistribution {
    pub kind: DelayKind,
    #[serde(default = "default_scale")]
    pub scale: f64,
    #[serde(default = "default_cutoff")]
    pub cutoff: usize,
}

fn default_scale() -> f64 {
    5.0
}

fn default_cutoff() -> usize {
    10
}

impl Default for DelayDistribution {
    fn default() -> Self {
        DelayDistribution::half_normal(5.0)
    }
}

impl DelayDistribution {
    pub fn half_normal(scale: f64) -> Self {
        DelayDistribution { kind: DelayKind::HalfNormal, scale, cutoff: default_cutoff() }
    }

    pub fn uniform(cutoff: usize) -> Self {
        DelayDistribution { kind: DelayKind::Uniform, scale: default_scale(), cutoff }
    }

    pub fn exponential(scale: f64) -> Self {
        DelayDistribution { kind: DelayKind::Exponential, scale, cutoff: default_cutoff() }
    }

    pub fn zero() -> Self {
        DelayDistribution { kind: DelayKind::Zero, scale: default_scale(), cutoff: 0 }
    }

    pub fn validate(&self) -> Result<(), StalenessError> {
        match self.kind {
            DelayKind::HalfNormal | DelayKind::Exponential if !(self.scale > 0.0 && self.scale.is_finite()) => Err(
                StalenessError::InvalidDistribution(format!("{} scale must be positive, got {}", self.kind.name(), self.scale)),
            ),
            _ => Ok(()),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let x: f64 = match self.kind {
            DelayKind::Zero => return 0,
            DelayKind::Uniform => return rng.random_range(0..=self.cutoff),
            DelayKind::HalfNormal => Normal::new(0.0, self.scale).expect("validated scale").sample(rng).abs(),
            DelayKind::Exponential => Exp::new(1.0 / self.scale).expect("validated scale").sample(rng),
        };
        x.floor() as usize
    }
}

pub fn sample_delay<R: Rng + ?Sized>(dist: &DelayDistribution, rng: &mut R) -> usize {
    dist.sample(rng)
}

/// Lower-triangular `W` with `W[t,s] = (t−s+1)^(−p) C_{t,s}/C`.
#[derive(Debug, Clone, PartialEq)]
pub struct StalenessMatrix {
    w: LowerTriangular,
    counts: Vec<usize>,
    cohort: usize,
    p: f64,
}

impl StalenessMatrix {
    pub fn new(horizon: usize, cohort: usize, p: f64) -> Self {
        StalenessMatrix {
            w: LowerTriangular::zeros(horizon),
            counts: vec![0; horizon],
            cohort,
            p,
        }
    }

    pub fn identity(horizon: usize) -> Self {
        StalenessMatrix {
            w: LowerTriangular::identity(horizon),
            counts: vec![1; horizon],
            cohort: 1,
            p: 0.0,
        }
    }

    pub fn horizon(&self) -> usize {
        self.w.dim()
    }

    pub fn cohort(&self) -> usize {
        self.cohort
    }

    pub fn exponent(&self) -> f64 {
        self.p
    }

    pub fn matrix(&self) -> &LowerTriangular {
        &self.w
    }

    pub fn into_matrix(self) -> LowerTriangular {
        self.w
    }

    pub fn arrivals(&self, row: usize) -> usize {
        self.counts[row]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        self.w.row_prefix(row)
    }

    /// Add `(t − s + 1)^(−p)/C` at `(t, s)` for one accepted arrival; returns the weight added.
    pub fn record_arrival(&mut self, row: usize, one_hot: VersionOneHot) -> Result<f64, StalenessError> {
        let horizon = self.horizon();
        if row >= horizon {
            return Err(StalenessError::OutOfHorizon { row, horizon });
        }
        if one_hot.index > row {
            return Err(StalenessError::Causality { row, version: one_hot.index });
        }
        if self.counts[row] >= self.cohort {
            return Err(StalenessError::RowFull { row, cohort: self.cohort });
        }
        let weight = downscale(row - one_hot.index, self.p) / self.cohort as f64;
        self.w.add_at(row, one_hot.index, weight);
        self.counts[row] += 1;
        Ok(weight)
    }

    /// Overwrite a whole row, e.g. with a privatized estimate.
    pub fn set_row(&mut self, row: usize, values: &[f64]) -> Result<(), StalenessError> {
        let horizon = self.horizon();
        if row >= horizon {
            return Err(StalenessError::OutOfHorizon { row, horizon });
        }
        let n = values.len().min(row + 1);
        let dst = self.w.row_prefix_mut(row);
        dst.iter_mut().for_each(|x| *x = 0.0);
        dst[..n].copy_from_slice(&values[..n]);
        self.counts[row] = self.cohort;
        Ok(())
    }

    pub fn row_sum(&self, row: usize) -> f64 {
        self.w.row_prefix(row).iter().sum()
    }

    /// `row,col,value` lines for every nonzero entry, with a header.
    pub fn to_csv_triplets(&self) -> String {
        triplets_csv(&self.w)
    }
}

pub fn triplets_csv(w: &LowerTriangular) -> String {
    let mut out = String::from("row,col,value\n");
    for (i, j, v) in w.triplets() {
        let _ = writeln!(out, "{i},{j},{v:e}");
    }
    out
}

/// Parse the `row,col,value` format back into a square lower-triangular matrix.
pub fn parse_triplets_csv(text: &str) -> Result<LowerTriangular, String> {
    let mut entries = Vec::new();
    let mut dim = 0;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.starts_with("row")) {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(format!("line {}: expected row,col,value", n + 1));
        }
        let i: usize = parts[0].trim().parse().map_err(|e| format!("line {}: {e}", n + 1))?;
        let j: usize = parts[1].trim().parse().map_err(|e| format!("line {}: {e}", n + 1))?;
        let v: f64 = parts[2].trim().parse().map_err(|e| format!("line {}: {e}", n + 1))?;
        if j > i {
            return Err(format!("line {}: entry ({i},{j}) is above the diagonal", n + 1));
        }
        dim = dim.max(i + 1);
        entries.push((i, j, v));
    }
    let mut w = LowerTriangular::zeros(dim);
    for (i, j, v) in entries {
        w.set(i, j, v).map_err(|e| e.to_string())?;
    }
    Ok(w)
}
