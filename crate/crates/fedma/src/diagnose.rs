//! Offline diagnostics of a staleness matrix: numerical nullity, the
//! unreachable fraction `1 − α`, and how well the full and light-weight
//! approximations reproduce the momentum matrix.

use crate::config::DelayTableSpec;
use crate::engine::{simulate_staleness, EngineError, SimConfig};
use crate::linalg::LowerTriangular;
use crate::momentum::{full_ma_offline, light_ma_offline, MomentumError, MomentumMatrix};
use crate::staleness::{DelayDistribution, DelayKind};
use crate::sweep::parallel_map;
use serde::{Deserialize, Serialize};

/// Per-step series written to `diagnostics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseRow {
    pub t: usize,
    pub nullity: usize,
    pub one_minus_alpha: f64,
    pub full_residual: f64,
    pub light_residual: f64,
    pub a_frob_sq: f64,
    pub log_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseSummary {
    pub horizon: usize,
    pub beta: f64,
    pub cohort: usize,
    /// `‖AW − M‖_F² / ‖M‖_F²` for the full solve.
    pub full_error: f64,
    pub light_error: f64,
    pub max_nullity: usize,
    pub final_nullity: usize,
    pub mean_one_minus_alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnosis {
    pub rows: Vec<DiagnoseRow>,
    pub summary: DiagnoseSummary,
}

impl Diagnosis {
    pub fn jsonl(&self) -> String {
        self.rows.iter().map(|r| serde_json::to_string(r).expect("row serializes") + "\n").collect()
    }
}

pub fn diagnose_matrix(w: &LowerTriangular, beta: f64, cohort: usize) -> Result<Diagnosis, MomentumError> {
    let m = MomentumMatrix::new(beta, w.dim())?;
    let (_, full) = full_ma_offline(w, &m, cohort)?;
    let (_, light) = light_ma_offline(w, &m, cohort)?;
    let rows: Vec<DiagnoseRow> = full
        .records
        .iter()
        .zip(&light.records)
        .map(|(f, l)| DiagnoseRow {
            t: f.t,
            nullity: f.nullity,
            one_minus_alpha: f.one_minus_alpha,
            full_residual: f.residual,
            light_residual: l.residual,
            a_frob_sq: f.a_frob_sq,
            log_ratio: f.log_ratio,
        })
        .collect();
    let n = rows.len().max(1) as f64;
    let summary = DiagnoseSummary {
        horizon: w.dim(),
        beta,
        cohort,
        full_error: full.cumulative_relative_error,
        light_error: light.cumulative_relative_error,
        max_nullity: rows.iter().map(|r| r.nullity).max().unwrap_or(0),
        final_nullity: rows.last().map_or(0, |r| r.nullity),
        mean_one_minus_alpha: rows.iter().map(|r| r.one_minus_alpha).sum::<f64>() / n,
    };
    Ok(Diagnosis { rows, summary })
}

/// Simulate `W` from a config's arrival process and diagnose it.
pub fn diagnose_config(cfg: &SimConfig) -> Result<Diagnosis, EngineError> {
    let (w, _) = simulate_staleness(cfg)?;
    Ok(diagnose_matrix(w.matrix(), cfg.beta, cfg.effective_cohort())?)
}

/// Delay distribution of one table row. The uniform cutoff is twice the
/// scale, giving it the same mean as the exponential.
pub fn table_distribution(kind: DelayKind, scale: f64) -> DelayDistribution {
    match kind {
        DelayKind::HalfNormal => DelayDistribution::half_normal(scale),
        DelayKind::Uniform => DelayDistribution::uniform((2.0 * scale).round() as usize),
        DelayKind::Exponential => DelayDistribution::exponential(scale),
        DelayKind::Zero => DelayDistribution::zero(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableCandidate {
    pub p: f64,
    pub full_error: f64,
    pub light_error: f64,
    pub max_nullity: usize,
}

/// One distribution's row: the exponent with the smallest full-MA error and
/// every candidate that was tried.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayTableRow {
    pub kind: DelayKind,
    pub delay: DelayDistribution,
    pub p: f64,
    pub full_error: f64,
    pub light_error: f64,
    pub candidates: Vec<TableCandidate>,
}

/// Least-squares errors for each delay distribution, with `p` tuned per row.
/// Candidates run on up to `jobs` threads; results do not depend on `jobs`.
pub fn delay_table(base: &SimConfig, spec: &DelayTableSpec, jobs: usize) -> Result<Vec<DelayTableRow>, EngineError> {
    let points: Vec<(usize, f64)> = (0..spec.kinds.len()).flat_map(|k| spec.p_grid.iter().map(move |&p| (k, p))).collect();
    let configs: Vec<SimConfig> = points
        .iter()
        .map(|&(k, p)| {
            let mut c = base.clone();
            c.delay = table_distribution(spec.kinds[k], spec.scale);
            c.p = p;
            c
        })
        .collect();
    let results = parallel_map(&configs, jobs, diagnose_config);
    let mut rows: Vec<DelayTableRow> = Vec::with_capacity(spec.kinds.len());
    for (k, &kind) in spec.kinds.iter().enumerate() {
        let mut candidates = Vec::new();
        for ((kk, p), res) in points.iter().zip(&results) {
            if *kk != k {
                continue;
            }
            let d = res.as_ref().map_err(|e| EngineError::Config(e.to_string()))?;
            candidates.push(TableCandidate {
                p: *p,
                full_error: d.summary.full_error,
                light_error: d.summary.light_error,
                max_nullity: d.summary.max_nullity,
            });
        }
        let best = candidates
            .iter()
            .min_by(|a, b| a.full_error.total_cmp(&b.full_error))
            .expect("non-empty p grid")
            .clone();
        rows.push(DelayTableRow {
            kind,
            delay: table_distribution(kind, spec.scale),
            p: best.p,
            full_error: best.full_error,
            light_error: best.light_error,
            candidates,
        });
    }
    Ok(rows)
}
