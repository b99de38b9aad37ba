//! Discrete-time FedBuff simulator.
//!
//! Time advances in ticks. Every tick the server samples `K` clients on its
//! current model version, and a client with delay `δ` comes due `δ` ticks
//! later. Due updates are consumed in seeded-shuffled order: updates staler
//! than `τ_max` are dropped, the rest fill the buffer, and each `C`-th
//! acceptance dispatches a server step. Surplus due updates go straight into
//! the next iteration's buffer, so one tick may see several dispatches.
//! Staleness is counted in server iterations.

use crate::linalg::{self, LowerTriangular};
use crate::momentum::{self, DiagnosticsBuilder, LightweightState, MaDiagnostics, MomentumMatrix, OnlineMaSolver, SolvePath};
use crate::optimizers::{ema_update, Drive, OptimizerKind, ServerOptState};
use crate::privacy::{self, DpConfig, DpSettings, PrivatePayload};
use crate::rng::{stream, Stream};
use crate::staleness::{apply_staleness_bound, downscale, DelayDistribution, StalenessMatrix, VersionOneHot};
use crate::tasks::{QuadraticTask, TaskError, TaskSpec};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use std::collections::BinaryHeap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Momentum(#[from] momentum::MomentumError),
    #[error(transparent)]
    Privacy(#[from] privacy::PrivacyError),
    #[error(transparent)]
    Staleness(#[from] crate::staleness::StalenessError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    FedbuffMomentum,
    MaFull,
    MaLight,
    WeightPrediction,
    Sync,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::FedbuffMomentum,
        Method::MaFull,
        Method::MaLight,
        Method::WeightPrediction,
        Method::Sync,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::FedbuffMomentum => "fedbuff-momentum",
            Method::MaFull => "ma-full",
            Method::MaLight => "ma-light",
            Method::WeightPrediction => "weight-prediction",
            Method::Sync => "sync",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    /// Exactly `K` distinct clients per tick.
    Fixed,
    /// Every client joins independently with probability `K/m`.
    Poisson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub task: TaskSpec,
    pub method: Method,
    /// Clients sampled per tick (`K`). Ignored when `sampling_rate` is set.
    #[serde(default)]
    pub sampled: usize,
    /// Alternative to `sampled`: `K = round(q m)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling_rate: Option<f64>,
    #[serde(default = "default_sampling")]
    pub sampling: Sampling,
    pub cohort: usize,
    pub horizon: usize,
    pub server_lr: f64,
    pub local_lr: f64,
    #[serde(default = "default_local_steps")]
    pub local_steps: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    /// Exponent of the staleness down-scaling `(τ+1)^(−p)`.
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default = "default_tau_max")]
    pub tau_max: usize,
    #[serde(default)]
    pub delay: DelayDistribution,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dp: Option<DpSettings>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_ema")]
    pub ema_decay: f64,
    /// Decay of the update average used for weight prediction.
    #[serde(default = "default_wp_decay")]
    pub wp_decay: f64,
    /// Keep every received aggregate so the light-weight buffer can be cross-checked.
    #[serde(default)]
    pub retain_history: bool,
    /// Keep the model at every server step (needed for the bound checks).
    #[serde(default)]
    pub record_models: bool,
    /// Suboptimality level for the iterations-to-threshold summary.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

fn default_sampling() -> Sampling {
    Sampling::Fixed
}
fn default_local_steps() -> usize {
    1
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Fedavgm
}
fn default_beta() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.99
}
fn default_adam_eps() -> f64 {
    1e-3
}
fn default_p() -> f64 {
    1.0
}
fn default_tau_max() -> usize {
    20
}
fn default_ema() -> f64 {
    0.99
}
fn default_wp_decay() -> f64 {
    0.9
}

impl SimConfig {
    /// A small runnable config, handy for tests and examples.
    pub fn example(method: Method) -> Self {
        SimConfig {
            task: TaskSpec::quadratic(8, 100, 0.1),
            method,
            sampled: 20,
            sampling_rate: None,
            sampling: Sampling::Fixed,
            cohort: 10,
            horizon: 50,
            server_lr: 1.0,
            local_lr: 0.1,
            local_steps: 1,
            optimizer: OptimizerKind::Fedavgm,
            beta: 0.9,
            beta2: 0.99,
            adam_eps: 1e-3,
            p: 1.0,
            tau_max: 20,
            delay: DelayDistribution::half_normal(5.0),
            dp: None,
            seed: 0,
            ema_decay: 0.99,
            wp_decay: 0.9,
            retain_history: false,
            record_models: false,
            threshold: None,
        }
    }

    /// Clients sampled per tick.
    pub fn clients_per_tick(&self) -> usize {
        match self.sampling_rate {
            Some(q) => (q * self.task.clients as f64).round() as usize,
            None => self.sampled,
        }
    }

    /// Cohort actually used: synchronous training waits for every sampled client.
    pub fn effective_cohort(&self) -> usize {
        if self.method == Method::Sync {
            self.clients_per_tick()
        } else {
            self.cohort
        }
    }

    pub fn effective_delay(&self) -> DelayDistribution {
        if self.method == Method::Sync {
            DelayDistribution::zero()
        } else {
            self.delay
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        self.task.validate()?;
        self.delay.validate()?;
        let err = |m: String| Err(EngineError::Config(m));
        let k = self.clients_per_tick();
        let c = self.effective_cohort();
        if let Some(q) = self.sampling_rate {
            if !(q > 0.0 && q <= 1.0) {
                return err(format!("sampling_rate must lie in (0, 1], got {q}"));
            }
        }
        if c == 0 || c > k || k > self.task.clients {
            return err(format!(
                "need 0 < cohort <= sampled <= clients, got C={c}, K={k}, m={}",
                self.task.clients
            ));
        }
        if self.horizon == 0 {
            return err("horizon must be at least 1".into());
        }
        if !(self.server_lr > 0.0 && self.server_lr.is_finite()) || !(self.local_lr > 0.0 && self.local_lr.is_finite()) {
            return err(format!(
                "learning rates must be positive, got server {} and local {}",
                self.server_lr, self.local_lr
            ));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return err(format!("ema_decay must lie in [0, 1), got {}", self.ema_decay));
        }
        if !(0.0..1.0).contains(&self.wp_decay) {
            return err(format!("wp_decay must lie in [0, 1), got {}", self.wp_decay));
        }
        if !(self.beta < 1.0 && self.beta > -1.0) {
            return err(format!("beta must lie in (-1, 1), got {}", self.beta));
        }
        if matches!(self.method, Method::MaFull | Method::MaLight) && self.beta < 0.0 && self.optimizer != OptimizerKind::Fedavg {
            return err("momentum approximation needs beta in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return err("beta2 must lie in [0, 1) and adam_eps must be positive".into());
        }
        if !(self.p >= 0.0 && self.p.is_finite()) {
            return err(format!("p must be non-negative, got {}", self.p));
        }
        if let Some(dp) = &self.dp {
            DpConfig::from_settings(dp)?;
        }
        Ok(())
    }
}

/// Counts of client updates by fate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrivalCounters {
    pub enqueued: u64,
    pub accepted: u64,
    pub dropped: u64,
    pub pending_at_end: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub loss: f64,
    pub suboptimality: f64,
    pub ema_suboptimality: f64,
    pub distance_to_optimum: f64,
    pub update_norm: f64,
    pub tick: usize,
    /// Ticks since the previous dispatch.
    pub buffer_wait: usize,
    /// Due updates carried into the next iteration.
    pub spillover: u64,
    pub drops: u64,
    pub mean_staleness: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ma_residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ma_rank: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ma_path: Option<SolvePath>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub light_uv: Option<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub light_consistency: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub iterations: usize,
    pub ticks: usize,
    pub final_loss: f64,
    pub final_suboptimality: f64,
    pub final_ema_suboptimality: f64,
    pub best_suboptimality: f64,
    pub best_iteration: usize,
    pub final_distance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations_to_threshold: Option<usize>,
    pub cohort: usize,
    pub counters: ArrivalCounters,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cumulative_relative_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a_frob_sq: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub svd_fallbacks: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dp: Option<DpConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diverged: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub final_model: Vec<f64>,
    pub ema_model: Vec<f64>,
    pub metrics: Vec<IterationMetrics>,
    pub summary: RunSummary,
    /// `W` as consumed by the server (noised under DP).
    pub staleness: LowerTriangular,
    /// Rows `a_t` of `A` for the momentum-approximation methods.
    pub weights: Option<LowerTriangular>,
    pub diagnostics: Option<MaDiagnostics>,
    /// `θ_1..θ_T`: the model each server step started from.
    pub models: Option<Vec<Vec<f64>>>,
    /// Received aggregates `r_1..r_T`, when retained.
    pub history: Option<Vec<Vec<f64>>>,
}

impl RunResult {
    pub fn metrics_jsonl(&self) -> String {
        let mut s = String::new();
        for m in &self.metrics {
            s.push_str(&serde_json::to_string(m).expect("metrics serialize"));
            s.push('\n');
        }
        s
    }
}

/// What the server hands to its update rule at one dispatch. These
/// aggregates are the only inputs the momentum-approximation solvers see.
#[derive(Debug, Clone, Copy)]
pub struct DispatchView<'a> {
    pub iteration: usize,
    pub aggregate: &'a [f64],
    pub staleness_row: &'a [f64],
}

struct Pending<P> {
    due: usize,
    key: u64,
    version: usize,
    payload: P,
}

impl<P> PartialEq for Pending<P> {
    fn eq(&self, other: &Self) -> bool {
        (self.due, self.key) == (other.due, other.key)
    }
}
impl<P> Eq for Pending<P> {}
impl<P> PartialOrd for Pending<P> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl<P> Ord for Pending<P> {
    // reversed so the max-heap pops the earliest due update first
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (other.due, other.key).cmp(&(self.due, self.key))
    }
}

/// Per-iteration protocol facts handed to [`Handler::dispatch`].
#[derive(Debug, Clone, Copy, Default)]
struct RowFacts {
    tick: usize,
    /// Ticks since the previous dispatch.
    wait: usize,
    drops: u64,
    /// Updates already due that were left for the next iteration.
    spillover: u64,
}

/// Per-run participant behavior plugged into the shared protocol loop.
trait Handler {
    type Payload;
    fn make_payload(&mut self, client: usize, version: usize, delay: usize, tick: usize) -> Result<Self::Payload, EngineError>;
    fn accept(&mut self, payload: Self::Payload, version: usize, row: usize, w: &mut StalenessMatrix) -> Result<(), EngineError>;
    /// Returns false to stop early.
    fn dispatch(&mut self, row: usize, facts: RowFacts, w: &mut StalenessMatrix) -> Result<bool, EngineError>;
}

struct ProtocolOutcome {
    w: StalenessMatrix,
    counters: ArrivalCounters,
    ticks: usize,
}

fn run_protocol<H: Handler>(cfg: &SimConfig, handler: &mut H) -> Result<ProtocolOutcome, EngineError> {
    let horizon = cfg.horizon;
    let cohort = cfg.effective_cohort();
    let delay = cfg.effective_delay();
    let m = cfg.task.clients;
    let k = cfg.clients_per_tick();
    let mut w = StalenessMatrix::new(horizon, cohort, cfg.p);
    let mut rng_sampling = stream(cfg.seed, Stream::Sampling);
    let mut rng_delays = stream(cfg.seed, Stream::Delays);
    let mut rng_shuffle = stream(cfg.seed, Stream::Shuffles);
    let binomial = match cfg.sampling {
        Sampling::Poisson => Some(Binomial::new(m as u64, k as f64 / m as f64).map_err(|e| EngineError::Config(e.to_string()))?),
        Sampling::Fixed => None,
    };
    let mut pending: BinaryHeap<Pending<H::Payload>> = BinaryHeap::new();
    let mut counters = ArrivalCounters::default();
    let (mut version, mut in_row, mut tick, mut last_dispatch) = (0usize, 0usize, 0usize, 0usize);
    let mut row_drops = 0u64;
    'outer: loop {
        let n = match &binomial {
            Some(b) => (b.sample(&mut rng_sampling) as usize).min(m),
            None => k,
        };
        for client in sample(&mut rng_sampling, m, n) {
            let d = delay.sample(&mut rng_delays);
            let payload = handler.make_payload(client, version, d, tick)?;
            pending.push(Pending { due: tick + d, key: rng_shuffle.random(), version, payload });
            counters.enqueued += 1;
        }
        while pending.peek().is_some_and(|p| p.due <= tick) {
            let p = pending.pop().expect("peeked");
            if !apply_staleness_bound(version - p.version, cfg.tau_max) {
                counters.dropped += 1;
                row_drops += 1;
                continue;
            }
            handler.accept(p.payload, p.version, version, &mut w)?;
            counters.accepted += 1;
            in_row += 1;
            if in_row == cohort {
                let spillover = pending.iter().filter(|p| p.due <= tick).count() as u64;
                let facts = RowFacts { tick, wait: tick - last_dispatch, drops: row_drops, spillover };
                let keep_going = handler.dispatch(version, facts, &mut w)?;
                row_drops = 0;
                last_dispatch = tick;
                in_row = 0;
                version += 1;
                if !keep_going || version == horizon {
                    break 'outer;
                }
            }
        }
        tick += 1;
    }
    counters.pending_at_end = pending.len() as u64;
    Ok(ProtocolOutcome { w, counters, ticks: tick + 1 })
}

struct ArrivalOnly;

impl Handler for ArrivalOnly {
    type Payload = ();
    fn make_payload(&mut self, _: usize, _: usize, _: usize, _: usize) -> Result<(), EngineError> {
        Ok(())
    }
    fn accept(&mut self, _: (), version: usize, row: usize, w: &mut StalenessMatrix) -> Result<(), EngineError> {
        w.record_arrival(row, VersionOneHot { horizon: w.horizon(), index: version })?;
        Ok(())
    }
    fn dispatch(&mut self, _: usize, _: RowFacts, _: &mut StalenessMatrix) -> Result<bool, EngineError> {
        Ok(true)
    }
}

/// Simulate only the arrival process and return `W` (no training, no privacy noise).
pub fn simulate_staleness(cfg: &SimConfig) -> Result<(StalenessMatrix, ArrivalCounters), EngineError> {
    cfg.delay.validate()?;
    let k = cfg.clients_per_tick();
    let c = cfg.effective_cohort();
    if c == 0 || c > k || k > cfg.task.clients || cfg.horizon == 0 {
        return Err(EngineError::Config(format!("need 0 < C <= K <= m and T >= 1, got C={c}, K={k}, m={}", cfg.task.clients)));
    }
    let out = run_protocol(cfg, &mut ArrivalOnly)?;
    Ok((out.w, out.counters))
}

enum Drift {
    Sgd(ServerOptState),
    Full {
        opt: ServerOptState,
        solver: OnlineMaSolver,
        history: Vec<Vec<f64>>,
    },
    Light {
        opt: ServerOptState,
        state: LightweightState,
        history: Option<Vec<Vec<f64>>>,
    },
}

impl Drift {
    fn opt(&self) -> &ServerOptState {
        match self {
            Drift::Sgd(o) | Drift::Full { opt: o, .. } | Drift::Light { opt: o, .. } => o,
        }
    }
}

struct Trainer<'a, F: FnMut(&DispatchView<'_>)> {
    cfg: &'a SimConfig,
    task: &'a QuadraticTask,
    gain: Vec<f64>,
    theta: Vec<f64>,
    ema: Vec<f64>,
    drift: Drift,
    dp: Option<DpConfig>,
    rng_noise: ChaCha8Rng,
    momentum: MomentumMatrix,
    cohort: usize,
    agg: Vec<f64>,
    payloads: Vec<PrivatePayload>,
    staleness_sum: usize,
    // weight prediction
    update_avg: Vec<f64>,
    // outputs
    metrics: Vec<IterationMetrics>,
    weights: Option<LowerTriangular>,
    diag: DiagnosticsBuilder,
    models: Option<Vec<Vec<f64>>>,
    diverged: Option<String>,
    best: (f64, usize),
    reached: Option<usize>,
    observer: F,
}

impl<F: FnMut(&DispatchView<'_>)> Trainer<'_, F> {
    /// Staleness a client with this delay should expect: its delay times the
    /// observed iterations per tick (`K/C` before any dispatch).
    fn predicted_staleness(&self, delay: usize, tick: usize) -> f64 {
        let rate = if tick == 0 || self.metrics.is_empty() {
            self.cfg.clients_per_tick() as f64 / self.cohort as f64
        } else {
            self.metrics.len() as f64 / tick as f64
        };
        (delay as f64 * rate).round()
    }
}

impl<F: FnMut(&DispatchView<'_>)> Handler for Trainer<'_, F> {
    type Payload = Vec<f64>;

    fn make_payload(&mut self, client: usize, _version: usize, delay: usize, tick: usize) -> Result<Vec<f64>, EngineError> {
        let start: Vec<f64> = if self.cfg.method == Method::WeightPrediction && delay > 0 {
            let tau = self.predicted_staleness(delay, tick);
            let h = self.drift.opt().preconditioner(self.theta.len());
            predicted_start(&self.theta, tau, self.cfg.server_lr, &self.update_avg, &h)
        } else {
            self.theta.clone()
        };
        let delta = self.task.client_update(&start, client, &self.gain);
        if delta.iter().any(|x| !x.is_finite()) {
            return Err(TaskError::Diverged { client, step: self.cfg.local_steps }.into());
        }
        Ok(delta)
    }

    fn accept(&mut self, delta: Vec<f64>, version: usize, row: usize, w: &mut StalenessMatrix) -> Result<(), EngineError> {
        let tau = row - version;
        self.staleness_sum += tau;
        match &self.dp {
            Some(cfg) => {
                let scale = downscale(tau, self.cfg.p);
                self.payloads.push(PrivatePayload::new(&delta, version, scale, cfg)?);
            }
            None => {
                let weight = w.record_arrival(row, VersionOneHot { horizon: w.horizon(), index: version })?;
                linalg::axpy(weight, &delta, &mut self.agg);
            }
        }
        Ok(())
    }

    fn dispatch(&mut self, row: usize, facts: RowFacts, w: &mut StalenessMatrix) -> Result<bool, EngineError> {
        let t = row + 1;
        if let Some(cfg) = &self.dp {
            let round = privacy::privatize_round(&self.payloads, self.cohort, t, cfg, &mut self.rng_noise)?;
            self.payloads.clear();
            self.agg = round.aggregate;
            let noised = match &self.cfg.dp {
                Some(s) if s.project_rows => privacy::project_to_simplex(&round.row),
                _ => round.row,
            };
            w.set_row(row, &noised)?;
        }
        if let Some(models) = &mut self.models {
            models.push(self.theta.clone());
        }
        let r = std::mem::replace(&mut self.agg, vec![0.0; self.theta.len()]);
        let w_row = w.row(row).to_vec();
        (self.observer)(&DispatchView { iteration: t, aggregate: &r, staleness_row: &w_row });

        let mut metric_extra = (None, None, None, None, None);
        let step = match &mut self.drift {
            Drift::Sgd(opt) => opt.server_step(&mut self.theta, Drive::Aggregate(&r), self.cfg.server_lr),
            Drift::Full { opt, solver, history } => {
                let rep = solver.push_row(&w_row)?;
                history.push(r.clone());
                let mut m = vec![0.0; r.len()];
                for (a, col) in rep.weights.iter().zip(history.iter()) {
                    if *a != 0.0 {
                        linalg::axpy(*a, col, &mut m);
                    }
                }
                if let Some(wts) = &mut self.weights {
                    wts.row_prefix_mut(row).copy_from_slice(&rep.weights);
                }
                self.diag.push(t, self.cohort, self.momentum.target(t), &rep.weights, rep.residual, rep.rank, rep.one_minus_alpha);
                metric_extra = (Some(rep.residual), Some(rep.rank), Some(rep.path), None, None);
                opt.server_step(&mut self.theta, Drive::Momentum { momentum: &m, raw: &r }, self.cfg.server_lr)
            }
            Drift::Light { opt, state, history } => {
                let (u, v) = momentum::solve_lightweight(&state.weights, w.matrix(), &self.momentum, t)?;
                state.step(&r, u, v);
                let a = state.weights.active_slice();
                let residual = momentum::step_residual(w.matrix(), self.momentum.target(t), a);
                if let Some(wts) = &mut self.weights {
                    wts.row_prefix_mut(row).copy_from_slice(a);
                }
                let consistency = history.as_mut().map(|h| {
                    h.push(r.clone());
                    let mut full = vec![0.0; r.len()];
                    for (c, col) in a.iter().zip(h.iter()) {
                        linalg::axpy(*c, col, &mut full);
                    }
                    let diff: f64 = full.iter().zip(&state.buffer).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                    diff / linalg::norm(&full).max(f64::MIN_POSITIVE)
                });
                metric_extra = (Some(residual), None, None, Some((u, v)), consistency);
                let buffer = state.buffer.clone();
                opt.server_step(&mut self.theta, Drive::Momentum { momentum: &buffer, raw: &r }, self.cfg.server_lr)
            }
        };
        if self.cfg.method == Method::WeightPrediction {
            update_historical_ema(&mut self.update_avg, &r, self.cfg.wp_decay);
        }
        let ok = match step {
            Ok(()) => true,
            Err(e) => {
                self.diverged = Some(e.to_string());
                false
            }
        };
        ema_update(&mut self.ema, &self.theta, self.cfg.ema_decay);
        let sub = if ok { self.task.suboptimality(&self.theta) } else { f64::INFINITY };
        if sub < self.best.0 {
            self.best = (sub, t);
        }
        if let (Some(th), None) = (self.cfg.threshold, self.reached) {
            if sub <= th {
                self.reached = Some(t);
            }
        }
        let (ma_residual, ma_rank, ma_path, light_uv, light_consistency) = metric_extra;
        let mean_staleness = self.staleness_sum as f64 / self.cohort as f64;
        self.staleness_sum = 0;
        self.metrics.push(IterationMetrics {
            iteration: t,
            loss: if ok { self.task.loss(&self.theta) } else { f64::INFINITY },
            suboptimality: sub,
            ema_suboptimality: if ok { self.task.suboptimality(&self.ema) } else { f64::INFINITY },
            distance_to_optimum: if ok { self.task.distance_to_optimum(&self.theta) } else { f64::INFINITY },
            update_norm: linalg::norm(&r),
            tick: facts.tick,
            buffer_wait: facts.wait,
            spillover: facts.spillover,
            drops: facts.drops,
            mean_staleness,
            ma_residual,
            ma_rank,
            ma_path,
            light_uv,
            light_consistency,
        });
        Ok(ok)
    }
}

/// Starting point of a weight-prediction client expecting staleness `tau`:
/// `θ − τ η H⁻¹ x_h`, with `x_h` the running average of received updates.
pub fn predicted_start(theta: &[f64], tau: f64, eta: f64, x_h: &[f64], precond: &[f64]) -> Vec<f64> {
    let step = tau * eta;
    theta.iter().zip(x_h).zip(precond).map(|((t, x), h)| t - step * x / h).collect()
}

/// `x_h ← α x_h + (1 − α) r`.
pub fn update_historical_ema(x_h: &mut [f64], r: &[f64], alpha: f64) {
    ema_update(x_h, r, alpha);
}

/// Run one simulation.
pub fn run(cfg: &SimConfig) -> Result<RunResult, EngineError> {
    run_with_observer(cfg, |_| {})
}

/// Run one simulation, showing every dispatch's aggregates to `observer`.
pub fn run_with_observer<F: FnMut(&DispatchView<'_>)>(cfg: &SimConfig, observer: F) -> Result<RunResult, EngineError> {
    cfg.validate()?;
    let task = QuadraticTask::new(&cfg.task, cfg.seed)?;
    run_on_task(cfg, &task, observer)
}

/// Run on an explicitly constructed task.
pub fn run_on_task<F: FnMut(&DispatchView<'_>)>(cfg: &SimConfig, task: &QuadraticTask, observer: F) -> Result<RunResult, EngineError> {
    cfg.validate()?;
    if task.clients() != cfg.task.clients {
        return Err(EngineError::Config("task population differs from the config".into()));
    }
    let d = task.dim();
    let cohort = cfg.effective_cohort();
    let opt = ServerOptState::new(cfg.optimizer, d, cfg.beta, cfg.beta2, cfg.adam_eps);
    let ma_beta = opt.effective_beta();
    let horizon = cfg.horizon;
    let momentum = MomentumMatrix::new(ma_beta.max(0.0), if matches!(cfg.method, Method::MaFull | Method::MaLight) { horizon } else { 1 })?;
    let drift = match cfg.method {
        Method::MaFull => Drift::Full {
            opt,
            solver: OnlineMaSolver::new(horizon, ma_beta),
            history: Vec::with_capacity(horizon),
        },
        Method::MaLight => Drift::Light {
            opt,
            state: LightweightState::new(horizon, d),
            history: cfg.retain_history.then(Vec::new),
        },
        _ => Drift::Sgd(opt),
    };
    let dp = cfg.dp.as_ref().map(DpConfig::from_settings).transpose()?;
    let theta = task.initial_model();
    let mut trainer = Trainer {
        cfg,
        task,
        gain: task.local_gain(cfg.local_lr, cfg.local_steps),
        ema: theta.clone(),
        theta,
        drift,
        dp,
        rng_noise: stream(cfg.seed, Stream::Noise),
        momentum,
        cohort,
        agg: vec![0.0; d],
        payloads: Vec::new(),
        staleness_sum: 0,
        update_avg: vec![0.0; d],
        metrics: Vec::with_capacity(horizon),
        weights: matches!(cfg.method, Method::MaFull | Method::MaLight).then(|| LowerTriangular::zeros(horizon)),
        diag: DiagnosticsBuilder::default(),
        models: cfg.record_models.then(Vec::new),
        diverged: None,
        best: (f64::INFINITY, 0),
        reached: None,
        observer,
    };
    let outcome = run_protocol(cfg, &mut trainer)?;
    let diagnostics = matches!(cfg.method, Method::MaFull).then(|| std::mem::take(&mut trainer.diag).finish());
    let (svd_fallbacks, history) = match trainer.drift {
        Drift::Full { solver, history, .. } => (Some(solver.svd_steps()), Some(history)),
        Drift::Light { history, .. } => (None, history),
        Drift::Sgd(_) => (None, None),
    };
    let last = trainer.metrics.last();
    let summary = RunSummary {
        method: cfg.method,
        iterations: trainer.metrics.len(),
        ticks: outcome.ticks,
        final_loss: last.map_or(f64::NAN, |m| m.loss),
        final_suboptimality: last.map_or(f64::NAN, |m| m.suboptimality),
        final_ema_suboptimality: last.map_or(f64::NAN, |m| m.ema_suboptimality),
        best_suboptimality: trainer.best.0,
        best_iteration: trainer.best.1,
        final_distance: last.map_or(f64::NAN, |m| m.distance_to_optimum),
        iterations_to_threshold: trainer.reached,
        cohort,
        counters: outcome.counters,
        cumulative_relative_error: diagnostics.as_ref().map(|d| d.cumulative_relative_error),
        a_frob_sq: diagnostics.as_ref().and_then(|d| d.records.last().map(|r| r.a_frob_sq)),
        svd_fallbacks,
        dp: trainer.dp,
        diverged: trainer.diverged.clone(),
    };
    Ok(RunResult {
        final_model: trainer.theta,
        ema_model: trainer.ema,
        metrics: trainer.metrics,
        summary,
        staleness: outcome.w.into_matrix(),
        weights: trainer.weights,
        diagnostics,
        models: trainer.models,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::staleness::DelayKind;

    fn homogeneous(method: Method) -> SimConfig {
        let mut c = SimConfig::example(method);
        c.task = TaskSpec { min_curvature: 0.1, init: 2.0, center: 0.5, ..TaskSpec::quadratic(6, 40, 0.0) };
        c.sampled = 10;
        c.cohort = 10;
        c.horizon = 60;
        c.server_lr = 0.7;
        c.local_lr = 0.3;
        c.record_models = true;
        c
    }

    #[test]
    fn sync_matches_textbook_fedavgm() {
        let cfg = homogeneous(Method::Sync);
        let r = run(&cfg).unwrap();
        // every client has the same center, so the aggregate is one local step from θ
        let lambda: Vec<f64> = (0..6).map(|i| 0.1f64.powf(i as f64 / 5.0)).collect();
        let mut theta = vec![2.0; 6];
        let mut m = vec![0.0; 6];
        let models = r.models.as_ref().unwrap();
        for t in 0..cfg.horizon {
            for (a, b) in models[t].iter().zip(&theta) {
                assert!((a - b).abs() < 1e-12, "iteration {}", t + 1);
            }
            for i in 0..6 {
                let delta = cfg.local_lr * lambda[i] * (theta[i] - 0.5);
                m[i] = 0.9 * m[i] + 0.1 * delta;
                theta[i] -= cfg.server_lr * m[i];
            }
        }
        for (a, b) in r.final_model.iter().zip(&theta) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_delay_momentum_approximation_is_sync() {
        let mut base = SimConfig::example(Method::Sync);
        base.record_models = true;
        let sync = run(&base).unwrap();
        for method in [Method::MaFull, Method::MaLight, Method::FedbuffMomentum] {
            let mut c = base.clone();
            c.method = method;
            c.delay = DelayDistribution::zero();
            c.cohort = c.sampled;
            let r = run(&c).unwrap();
            for (a, b) in r.models.unwrap().iter().zip(sync.models.as_ref().unwrap()) {
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() < 1e-10, "{}", method.name());
                }
            }
        }
    }

    #[test]
    fn arrivals_are_conserved_and_rows_hold_exactly_c() {
        for kind in [DelayKind::HalfNormal, DelayKind::Uniform, DelayKind::Exponential] {
            let mut c = SimConfig::example(Method::FedbuffMomentum);
            c.delay = DelayDistribution { kind, scale: 6.0, cutoff: 30 };
            c.tau_max = 5;
            c.p = 0.0;
            let (w, n) = simulate_staleness(&c).unwrap();
            assert_eq!(n.enqueued, n.accepted + n.dropped + n.pending_at_end);
            assert!(n.dropped > 0);
            for t in 0..c.horizon {
                assert_eq!(w.arrivals(t), c.cohort);
                assert!((w.row_sum(t) - 1.0).abs() < 1e-12);
            }
            assert_eq!(n.accepted, (c.horizon * c.cohort) as u64);
        }
    }

    #[test]
    fn staleness_never_exceeds_the_bound() {
        let mut c = SimConfig::example(Method::FedbuffMomentum);
        c.delay = DelayDistribution::exponential(8.0);
        c.tau_max = 3;
        let (w, _) = simulate_staleness(&c).unwrap();
        for t in 0..c.horizon {
            for (s, x) in w.row(t).iter().enumerate() {
                if t - s > 3 {
                    assert_eq!(*x, 0.0);
                }
            }
        }
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        for method in Method::ALL {
            let c = SimConfig::example(method);
            assert_eq!(run(&c).unwrap().metrics_jsonl(), run(&c).unwrap().metrics_jsonl());
        }
        let mut c = SimConfig::example(Method::MaFull);
        let a = run(&c).unwrap().metrics_jsonl();
        c.seed = 1;
        assert_ne!(a, run(&c).unwrap().metrics_jsonl());
    }

    #[test]
    fn poisson_sampling_runs_and_conserves() {
        let mut c = SimConfig::example(Method::MaFull);
        c.sampling = Sampling::Poisson;
        let r = run(&c).unwrap();
        let n = r.summary.counters;
        assert_eq!(r.summary.iterations, c.horizon);
        assert_eq!(n.enqueued, n.accepted + n.dropped + n.pending_at_end);
    }

    #[test]
    fn divergence_stops_the_run_with_a_flag() {
        let mut c = SimConfig::example(Method::FedbuffMomentum);
        c.server_lr = 1e200;
        c.task.init = 1e200;
        let r = run(&c).unwrap();
        assert!(r.summary.diverged.is_some());
        assert!(r.summary.iterations < c.horizon);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad: [fn(&mut SimConfig); 6] = [
            |c| c.cohort = c.sampled + 1,
            |c| c.horizon = 0,
            |c| c.server_lr = 0.0,
            |c| c.ema_decay = 1.0,
            |c| c.sampled = c.task.clients + 1,
            |c| c.beta = -0.5,
        ];
        for f in bad {
            let mut c = SimConfig::example(Method::MaFull);
            f(&mut c);
            assert!(matches!(run(&c), Err(EngineError::Config(_))));
        }
    }

    #[test]
    fn weight_prediction_start() {
        let theta = [1.0, -2.0];
        let g = [0.5, 0.25];
        assert_eq!(predicted_start(&theta, 0.0, 0.3, &g, &[1.0, 1.0]), theta.to_vec());
        assert_eq!(predicted_start(&theta, 3.0, 0.3, &[0.0, 0.0], &[1.0, 1.0]), theta.to_vec());
        let p = predicted_start(&theta, 3.0, 0.2, &g, &[1.0, 1.0]);
        assert!((p[0] - 0.7).abs() < 1e-15 && (p[1] + 2.15).abs() < 1e-15);
        let h = predicted_start(&theta, 1.0, 1.0, &g, &[2.0, 0.5]);
        assert_eq!(h, vec![0.75, -2.5]);
    }

    #[test]
    fn historical_average() {
        let mut x = vec![5.0];
        update_historical_ema(&mut x, &[2.0], 0.0);
        assert_eq!(x, vec![2.0]);
        let mut x = vec![0.0];
        for r in [1.0, 2.0, 4.0] {
            update_historical_ema(&mut x, &[r], 0.5);
        }
        // 0.5 → 0.5·0.5 + 0.5·2 = 1.25 → 0.5·1.25 + 0.5·4
        assert_eq!(x, vec![2.625]);
        let mut x = vec![0.0];
        for _ in 0..5000 {
            update_historical_ema(&mut x, &[3.0], 0.999);
        }
        assert!((x[0] - 3.0).abs() < 0.03);
    }

    #[test]
    fn weight_prediction_without_delay_is_fedbuff() {
        let mut c = SimConfig::example(Method::WeightPrediction);
        c.delay = DelayDistribution::zero();
        let wp = run(&c).unwrap();
        c.method = Method::FedbuffMomentum;
        let fb = run(&c).unwrap();
        assert_eq!(wp.final_model, fb.final_model);
    }

    #[test]
    fn private_runs_report_the_mechanism() {
        let mut c = SimConfig::example(Method::MaFull);
        c.dp = Some(DpSettings { clip: 1.0, noise_multiplier: 0.5, one_hot_noise: None, project_rows: false });
        let r = run(&c).unwrap();
        let dp = r.summary.dp.unwrap();
        assert!((dp.sensitivity - 1.1).abs() < 1e-12);
        assert_eq!(r.summary.iterations, c.horizon);
    }

    #[test]
    fn observer_sees_every_dispatch() {
        let c = SimConfig::example(Method::MaLight);
        let mut seen = Vec::new();
        run_with_observer(&c, |v| seen.push((v.iteration, v.staleness_row.len()))).unwrap();
        assert_eq!(seen, (1..=c.horizon).map(|t| (t, t)).collect::<Vec<_>>());
    }
}
