//! Client-level Gaussian mechanism over the model delta and the version one-hot.
//!
//! A client uploads `clip(Δ, S_Δ) ⊕ γ e_s`, whose norm is at most
//! `S = √(S_Δ² + γ²)`. The server adds `N(0, σ²S²)` to each summed coordinate
//! and rescales: `1/C` for the delta, `1/(Cγ)` for the one-hot part.

use crate::linalg;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest noise multiplier accepted in configs; lets the mechanism be
/// exercised in its vanishing-noise limit.
pub const SIGMA_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrivacyError {
    #[error("invalid privacy parameter: {0}")]
    InvalidParameter(String),
    #[error("payload norm {norm} exceeds the sensitivity bound {bound}")]
    SensitivityViolated { norm: f64, bound: f64 },
    #[error("expected {expected} payloads, got {got}")]
    CohortMismatch { expected: usize, got: usize },
}

/// User-facing settings, as they appear in a run config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpSettings {
    pub clip: f64,
    pub noise_multiplier: f64,
    /// Target noise on the one-hot part, relative to the delta (`ξ`). Defaults
    /// to the value that makes the total sensitivity `1.1·S_Δ`.
    #[serde(default)]
    pub one_hot_noise: Option<f64>,
    /// Project each privatized row of `W` onto the probability simplex (ablation only).
    #[serde(default)]
    pub project_rows: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    pub clip: f64,
    pub sigma: f64,
    pub xi: f64,
    pub gamma: f64,
    pub sensitivity: f64,
}

impl DpConfig {
    pub fn new(clip: f64, sigma: f64, xi: f64) -> Result<Self, PrivacyError> {
        let (gamma, sensitivity) = calibrate_gamma(sigma, xi, clip)?;
        Ok(DpConfig { clip, sigma, xi, gamma, sensitivity })
    }

    pub fn from_settings(s: &DpSettings) -> Result<Self, PrivacyError> {
        let sigma = s.noise_multiplier.max(SIGMA_FLOOR);
        let xi = match s.one_hot_noise {
            Some(x) => x,
            None => xi_for_sensitivity_ratio(sigma, 1.1)?,
        };
        Self::new(s.clip, sigma, xi)
    }

    /// Per-coordinate noise standard deviation `σS` on the summed payloads.
    pub fn noise_std(&self) -> f64 {
        self.sigma * self.sensitivity
    }
}

/// `γ = σ/√(ξ²−σ²)·S_Δ` and `S = √(S_Δ² + γ²)`, so that `σS/γ = ξ`.
pub fn calibrate_gamma(sigma: f64, xi: f64, clip: f64) -> Result<(f64, f64), PrivacyError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(PrivacyError::InvalidParameter(format!("noise multiplier must be positive, got {sigma}")));
    }
    if !(clip > 0.0 && clip.is_finite()) {
        return Err(PrivacyError::InvalidParameter(format!("clip bound must be positive, got {clip}")));
    }
    if !(xi > sigma) {
        return Err(PrivacyError::InvalidParameter(format!(
            "one-hot noise {xi} must exceed the noise multiplier {sigma}"
        )));
    }
    let gamma = if xi.is_infinite() { 0.0 } else { sigma / (xi * xi - sigma * sigma).sqrt() * clip };
    let sensitivity = (clip * clip + gamma * gamma).sqrt();
    Ok((gamma, sensitivity))
}

/// `ξ` giving total sensitivity `ratio·S_Δ`: `γ = S_Δ√(ratio² − 1)`, `ξ = σ·ratio/√(ratio² − 1)`.
pub fn xi_for_sensitivity_ratio(sigma: f64, ratio: f64) -> Result<f64, PrivacyError> {
    if !(ratio > 1.0) {
        return Err(PrivacyError::InvalidParameter(format!("sensitivity ratio must exceed 1, got {ratio}")));
    }
    Ok(sigma * ratio / (ratio * ratio - 1.0).sqrt())
}

/// `Δ · min(1, S/‖Δ‖)`.
pub fn clip(delta: &[f64], bound: f64) -> Vec<f64> {
    let n = linalg::norm(delta);
    if n <= bound || n == 0.0 {
        delta.to_vec()
    } else {
        let s = bound / n;
        delta.iter().map(|x| x * s).collect()
    }
}

/// Clipped delta plus scaled one-hot, optionally multiplied by a staleness factor `≤ 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivatePayload {
    pub delta: Vec<f64>,
    pub version: usize,
    pub one_hot_value: f64,
    pub bound: f64,
}

impl PrivatePayload {
    pub fn new(delta: &[f64], version: usize, scale: f64, cfg: &DpConfig) -> Result<Self, PrivacyError> {
        if !(0.0..=1.0).contains(&scale) {
            return Err(PrivacyError::InvalidParameter(format!("payload scale {scale} is outside [0, 1]")));
        }
        let mut clipped = clip(delta, cfg.clip);
        clipped.iter_mut().for_each(|x| *x *= scale);
        let p = PrivatePayload { delta: clipped, version, one_hot_value: scale * cfg.gamma, bound: cfg.sensitivity };
        let norm = p.norm();
        // rounding in the clip can overshoot by a few ulps
        if norm > cfg.sensitivity * (1.0 + 1e-12) {
            return Err(PrivacyError::SensitivityViolated { norm, bound: cfg.sensitivity });
        }
        Ok(p)
    }

    pub fn norm(&self) -> f64 {
        (linalg::norm_sq(&self.delta) + self.one_hot_value * self.one_hot_value).sqrt()
    }
}

/// Noised aggregate and noised staleness row for one dispatch.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivateRound {
    pub aggregate: Vec<f64>,
    pub row: Vec<f64>,
}

/// Sum `C` payloads, add Gaussian noise of std `σS` per coordinate, then
/// rescale. `row_len` is the number of staleness-row entries to produce.
pub fn privatize_round<R: Rng + ?Sized>(
    payloads: &[PrivatePayload],
    cohort: usize,
    row_len: usize,
    cfg: &DpConfig,
    rng: &mut R,
) -> Result<PrivateRound, PrivacyError> {
    if payloads.len() != cohort {
        return Err(PrivacyError::CohortMismatch { expected: cohort, got: payloads.len() });
    }
    let d = payloads.first().map_or(0, |p| p.delta.len());
    let mut sum = vec![0.0; d];
    let mut row = vec![0.0; row_len];
    for p in payloads {
        if p.norm() > cfg.sensitivity * (1.0 + 1e-12) {
            return Err(PrivacyError::SensitivityViolated { norm: p.norm(), bound: cfg.sensitivity });
        }
        linalg::axpy(1.0, &p.delta, &mut sum);
        if p.version < row_len {
            row[p.version] += p.one_hot_value;
        }
    }
    let std = cfg.noise_std();
    let c = cohort as f64;
    let aggregate = sum
        .iter()
        .map(|x| (x + std * rng.sample::<f64, _>(StandardNormal)) / c)
        .collect();
    let row = row
        .iter()
        .map(|x| (x + std * rng.sample::<f64, _>(StandardNormal)) / (c * cfg.gamma))
        .collect();
    Ok(PrivateRound { aggregate, row })
}

/// Euclidean projection onto `{x ≥ 0, Σx = 1}`.
pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    if v.is_empty() {
        return Vec::new();
    }
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut css = 0.0;
    let mut theta = 0.0;
    for (i, x) in u.iter().enumerate() {
        css += x;
        let t = (css - 1.0) / (i + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn clip_examples() {
        let small = [0.03, 0.04];
        assert_eq!(clip(&small, 0.1), small.to_vec());
        let big = clip(&[0.0, 0.4], 0.1);
        assert!((linalg::norm(&big) - 0.1).abs() < 1e-15);
        assert_eq!(big[0], 0.0);
        assert_eq!(clip(&[0.0, 0.0], 0.1), vec![0.0, 0.0]);
    }

    #[test]
    fn calibrate_examples() {
        let (g, s) = calibrate_gamma(1.0, 2f64.sqrt(), 0.1).unwrap();
        assert!((g - 0.1).abs() < 1e-15);
        assert!((s - 0.1 * 2f64.sqrt()).abs() < 1e-15);
        assert!((1.0 * s / g - 2f64.sqrt()).abs() < 1e-14);

        let xi = xi_for_sensitivity_ratio(1.0, 1.1).unwrap();
        let (g, s) = calibrate_gamma(1.0, xi, 1.0).unwrap();
        assert!((g - 0.21f64.sqrt()).abs() < 1e-12);
        assert!((s - 1.1).abs() < 1e-12);
        assert!((xi - 2.400).abs() < 1e-3);

        let (g, _) = calibrate_gamma(0.5, 1e9, 2.0).unwrap();
        assert!((g - 0.5 * 2.0 / 1e9).abs() < 1e-20);
        assert!(calibrate_gamma(1.0, 1.0, 1.0).is_err());
        assert!(calibrate_gamma(1.0, 0.5, 1.0).is_err());
    }

    #[test]
    fn vanishing_noise_matches_plain_sum() {
        let cfg = DpConfig::new(10.0, SIGMA_FLOOR, 2.4 * SIGMA_FLOOR).unwrap();
        let payloads: Vec<_> = (0..4)
            .map(|k| PrivatePayload::new(&[k as f64 * 0.1, 1.0], k % 2, 1.0, &cfg).unwrap())
            .collect();
        let mut rng = stream(1, Stream::Noise);
        let out = privatize_round(&payloads, 4, 3, &cfg, &mut rng).unwrap();
        assert!((out.aggregate[0] - 0.15).abs() < 1e-6);
        assert!((out.aggregate[1] - 1.0).abs() < 1e-6);
        assert!((out.row[0] - 0.5).abs() < 1e-6 && (out.row[1] - 0.5).abs() < 1e-6 && out.row[2].abs() < 1e-6);
        assert!(privatize_round(&payloads, 5, 3, &cfg, &mut rng).is_err());
    }

    #[test]
    fn simplex_projection() {
        let p = project_to_simplex(&[0.5, -0.2, 0.9]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|x| *x >= 0.0));
        assert_eq!(project_to_simplex(&[0.25, 0.75]), vec![0.25, 0.75]);
    }
}
