//! Grid sweeps on a bounded worker pool.
//!
//! Every grid point is an ordinary [`SimConfig`], identified by the SHA-256 of
//! its JSON form. Finished runs are written to `runs/<hash>.json` under the
//! output directory, so an interrupted sweep picks up where it stopped. Runs
//! execute in any order; the aggregate table is assembled afterwards in grid
//! order, which keeps `sweep.csv` independent of scheduling.

use crate::config::ExperimentSpec;
use crate::engine::{run, Method, RunSummary, SimConfig};
use crate::staleness::DelayDistribution;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use thiserror::Error;

/// Grids larger than this need an explicit override.
pub const MAX_RUNS_WITHOUT_FORCE: u64 = 100_000;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("sweep has {runs} runs, more than {limit}; pass --force-large-sweep to run it anyway")]
    TooLarge { runs: u64, limit: u64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SweepError + '_ {
    move |source| SweepError::Io { path: path.to_path_buf(), source }
}

/// Stable identifier of a run configuration.
pub fn content_hash(cfg: &SimConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

fn with_kind(delay: DelayDistribution, kind: crate::staleness::DelayKind) -> DelayDistribution {
    DelayDistribution { kind, ..delay }
}

/// Cartesian product of the axes in a fixed nesting order (seed outermost,
/// method innermost). Empty axes keep the template value.
pub fn expand(spec: &ExperimentSpec) -> Vec<SimConfig> {
    let base = &spec.base;
    let a = &spec.axes;
    fn or<T: Clone>(v: &[T], d: T) -> Vec<T> {
        if v.is_empty() {
            vec![d]
        } else {
            v.to_vec()
        }
    }
    let mut out = Vec::new();
    for seed in or(&a.seed, base.seed) {
        for kind in or(&a.delay_kind, base.delay.kind) {
            for cohort in or(&a.cohort, base.cohort) {
                for p in or(&a.p, base.p) {
                    for beta in or(&a.beta, base.beta) {
                        for method in or(&a.method, base.method) {
                            let mut c = base.clone();
                            c.seed = seed;
                            c.delay = with_kind(base.delay, kind);
                            c.cohort = cohort;
                            c.p = p;
                            c.beta = beta;
                            c.method = method;
                            out.push(c);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Stored outcome of one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub hash: String,
    pub config: SimConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<RunSummary>,
    /// Suboptimality after each server step; non-finite values stored as null.
    #[serde(default)]
    pub suboptimality: Vec<Option<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunRecord {
    pub fn execute(cfg: &SimConfig) -> Self {
        let hash = content_hash(cfg);
        match run(cfg) {
            Ok(r) => RunRecord {
                hash,
                config: cfg.clone(),
                suboptimality: r.metrics.iter().map(|m| m.suboptimality.is_finite().then_some(m.suboptimality)).collect(),
                summary: Some(r.summary),
                error: None,
            },
            Err(e) => RunRecord { hash, config: cfg.clone(), summary: None, suboptimality: Vec::new(), error: Some(e.to_string()) },
        }
    }

    pub fn is_complete(&self) -> bool {
        self.summary.is_some() && self.error.is_none()
    }

    /// First iteration (1-based) at which the suboptimality is at most `target`.
    pub fn iterations_to_reach(&self, target: f64) -> Option<usize> {
        self.suboptimality.iter().position(|s| s.is_some_and(|s| s <= target)).map(|i| i + 1)
    }
}

/// One line of `sweep.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub index: usize,
    pub hash: String,
    pub method: String,
    pub beta: f64,
    pub p: f64,
    pub cohort: usize,
    pub seed: u64,
    pub delay_kind: String,
    pub status: String,
    pub iterations: Option<usize>,
    pub final_suboptimality: Option<f64>,
    pub best_suboptimality: Option<f64>,
    pub best_iteration: Option<usize>,
    pub final_loss: Option<f64>,
    pub iterations_to_threshold: Option<usize>,
    /// Baseline iterations to its own best, over this run's iterations to reach that value.
    pub speedup: Option<f64>,
    pub error: String,
}

/// Speedup of every record against the `fedbuff-momentum` run that shares
/// all of its other settings. Baselines score 1; runs without a baseline or
/// that never reach the baseline's best get `None`.
pub fn speedups(records: &[RunRecord]) -> Vec<Option<f64>> {
    let by_hash: HashMap<&str, &RunRecord> = records.iter().map(|r| (r.hash.as_str(), r)).collect();
    records
        .iter()
        .map(|r| {
            let mut key = r.config.clone();
            key.method = Method::FedbuffMomentum;
            let base = by_hash.get(content_hash(&key).as_str())?;
            let bs = base.summary.as_ref().filter(|_| base.is_complete())?;
            if !bs.best_suboptimality.is_finite() || bs.best_iteration == 0 {
                return None;
            }
            let reached = r.iterations_to_reach(bs.best_suboptimality)?;
            Some(bs.best_iteration as f64 / reached as f64)
        })
        .collect()
}

pub fn rows(records: &[RunRecord]) -> Vec<SweepRow> {
    let speed = speedups(records);
    records
        .iter()
        .zip(speed)
        .enumerate()
        .map(|(index, (r, speedup))| {
            let s = r.summary.as_ref();
            let finite = |x: f64| x.is_finite().then_some(x);
            SweepRow {
                index,
                hash: r.hash.clone(),
                method: r.config.method.name().to_string(),
                beta: r.config.beta,
                p: r.config.p,
                cohort: r.config.cohort,
                seed: r.config.seed,
                delay_kind: r.config.delay.kind.name().to_string(),
                status: match (&r.error, s.and_then(|s| s.diverged.as_ref())) {
                    (Some(_), _) => "failed".into(),
                    (None, Some(_)) => "diverged".into(),
                    (None, None) => "ok".into(),
                },
                iterations: s.map(|s| s.iterations),
                final_suboptimality: s.and_then(|s| finite(s.final_suboptimality)),
                best_suboptimality: s.and_then(|s| finite(s.best_suboptimality)),
                best_iteration: s.map(|s| s.best_iteration),
                final_loss: s.and_then(|s| finite(s.final_loss)),
                iterations_to_threshold: s.and_then(|s| s.iterations_to_threshold),
                speedup,
                error: r.error.clone().unwrap_or_default(),
            }
        })
        .collect()
}

pub fn write_csv(rows: &[SweepRow], path: &Path) -> Result<(), SweepError> {
    let csv_err = |source| SweepError::Csv { path: path.to_path_buf(), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_csv(path: &Path) -> Result<Vec<SweepRow>, SweepError> {
    let csv_err = |source| SweepError::Csv { path: path.to_path_buf(), source };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().collect::<Result<Vec<SweepRow>, _>>().map_err(csv_err)
}

#[derive(Debug, Clone, Default)]
pub struct SweepOptions {
    pub jobs: usize,
    pub force_large: bool,
    /// Where `runs/` and `sweep.csv` go; without it nothing is written.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub records: Vec<RunRecord>,
    pub rows: Vec<SweepRow>,
    pub executed: usize,
    pub reused: usize,
}

/// Grid size, or an error if it exceeds the limit and no override was given.
pub fn check_size(spec: &ExperimentSpec, force: bool) -> Result<u64, SweepError> {
    let runs = spec.axes.size();
    if runs > MAX_RUNS_WITHOUT_FORCE && !force {
        return Err(SweepError::TooLarge { runs, limit: MAX_RUNS_WITHOUT_FORCE });
    }
    Ok(runs)
}

fn load_record(path: &Path, hash: &str) -> Option<RunRecord> {
    let text = std::fs::read_to_string(path).ok()?;
    let rec: RunRecord = serde_json::from_str(&text).ok()?;
    (rec.hash == hash && content_hash(&rec.config) == hash && rec.is_complete()).then_some(rec)
}

fn store_record(dir: &Path, rec: &RunRecord) -> Result<(), SweepError> {
    let path = dir.join(format!("{}.json", rec.hash));
    let tmp = dir.join(format!("{}.json.tmp", rec.hash));
    let text = serde_json::to_string(rec).expect("record serializes");
    std::fs::write(&tmp, text).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, &path).map_err(io_err(&path))
}

/// Run every grid point, reusing completed records found on disk. A failing
/// run becomes a `failed` row; it does not stop the sweep.
pub fn run_sweep(spec: &ExperimentSpec, opts: &SweepOptions) -> Result<SweepOutcome, SweepError> {
    check_size(spec, opts.force_large)?;
    let configs = expand(spec);
    let runs_dir = opts.out_dir.as_ref().map(|d| d.join("runs"));
    if let Some(dir) = &runs_dir {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let hashes: Vec<String> = configs.iter().map(content_hash).collect();
    let mut slots: Vec<Option<RunRecord>> = hashes
        .iter()
        .map(|h| runs_dir.as_ref().and_then(|d| load_record(&d.join(format!("{h}.json")), h)))
        .collect();
    let reused = slots.iter().filter(|s| s.is_some()).count();
    let todo: Vec<usize> = (0..configs.len()).filter(|&i| slots[i].is_none()).collect();

    let jobs = opts.jobs.max(1);
    let fresh = parallel_map(&todo, jobs, |&i| {
        let rec = RunRecord::execute(&configs[i]);
        let stored = runs_dir.as_ref().map_or(Ok(()), |dir| store_record(dir, &rec));
        (rec, stored)
    });
    for (&i, (rec, stored)) in todo.iter().zip(fresh) {
        stored?;
        slots[i] = Some(rec);
    }
    let records: Vec<RunRecord> = slots.into_iter().map(|r| r.expect("every slot filled")).collect();
    let rows = rows(&records);
    if let Some(dir) = &opts.out_dir {
        write_csv(&rows, &dir.join("sweep.csv"))?;
    }
    Ok(SweepOutcome { records, rows, executed: todo.len(), reused })
}

/// `f` over `items` on a bounded pool, results in input order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let out: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1).min(items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let r = f(item);
                out.lock().expect("no poisoning")[i] = Some(r);
            });
        }
    });
    out.into_inner().expect("no poisoning").into_iter().map(|r| r.expect("every item mapped")).collect()
}

/// Per-setting aggregate over seeds, as written by the `report` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub beta: f64,
    pub p: f64,
    pub cohort: usize,
    pub delay_kind: String,
    pub runs: usize,
    pub ok: usize,
    pub median_final_suboptimality: Option<f64>,
    pub median_best_suboptimality: Option<f64>,
    pub median_speedup: Option<f64>,
}

pub fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Group sweep rows by every axis except the seed, in order of first appearance.
pub fn report(rows: &[SweepRow]) -> Vec<ReportRow> {
    let mut order: Vec<(String, u64, u64, usize, String)> = Vec::new();
    let mut groups: HashMap<(String, u64, u64, usize, String), Vec<&SweepRow>> = HashMap::new();
    for r in rows {
        let key = (r.method.clone(), r.beta.to_bits(), r.p.to_bits(), r.cohort, r.delay_kind.clone());
        let g = groups.entry(key.clone()).or_default();
        if g.is_empty() {
            order.push(key);
        }
        g.push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let collect = |f: fn(&SweepRow) -> Option<f64>| median(g.iter().filter_map(|r| f(r)).collect());
            ReportRow {
                method: key.0.clone(),
                beta: f64::from_bits(key.1),
                p: f64::from_bits(key.2),
                cohort: key.3,
                delay_kind: key.4.clone(),
                runs: g.len(),
                ok: g.iter().filter(|r| r.status == "ok").count(),
                median_final_suboptimality: collect(|r| r.final_suboptimality),
                median_best_suboptimality: collect(|r| r.best_suboptimality),
                median_speedup: collect(|r| r.speedup),
            }
        })
        .collect()
}
