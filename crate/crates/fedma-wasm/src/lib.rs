//! Browser bindings for the demo page in `www/`. Every export takes and
//! returns JSON so the page needs no generated type definitions; the plain
//! Rust functions underneath are what the native tests call.

use fedma::diagnose::diagnose_config;
use fedma::engine::{run, Method, SimConfig};
use fedma::privacy::{calibrate_gamma, xi_for_sensitivity_ratio};
use fedma::staleness::DelayDistribution;
use fedma::tasks::TaskSpec;
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

/// Keeps a single click well under a second in the browser.
pub const MAX_HORIZON: usize = 1000;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrivalRequest {
    pub sampled: usize,
    pub cohort: usize,
    pub horizon: usize,
    pub delay: DelayDistribution,
    pub p: f64,
    pub tau_max: usize,
    pub beta: f64,
    pub seed: u64,
}

impl ArrivalRequest {
    fn sim(&self, method: Method) -> Result<SimConfig, String> {
        if self.horizon == 0 || self.horizon > MAX_HORIZON {
            return Err(format!("horizon must lie in 1..={MAX_HORIZON}"));
        }
        let mut c = SimConfig::example(method);
        c.task = TaskSpec { min_curvature: 0.01, center: 0.0, init: 3.0, ..TaskSpec::quadratic(20, self.sampled.max(200), 1e-3) };
        c.sampled = self.sampled;
        c.cohort = self.cohort;
        c.horizon = self.horizon;
        c.delay = self.delay;
        c.p = self.p;
        c.tau_max = self.tau_max;
        c.beta = self.beta;
        c.seed = self.seed;
        c.validate().map_err(|e| e.to_string())?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StalenessReport {
    pub full_error: f64,
    pub light_error: f64,
    pub max_nullity: usize,
    pub mean_one_minus_alpha: f64,
    pub nullity: Vec<usize>,
    pub full_residual: Vec<f64>,
    pub light_residual: Vec<f64>,
}

/// Simulate the arrival process alone and fit both approximations to it.
pub fn staleness_report(req: &ArrivalRequest) -> Result<StalenessReport, String> {
    let d = diagnose_config(&req.sim(Method::MaFull)?).map_err(|e| e.to_string())?;
    Ok(StalenessReport {
        full_error: d.summary.full_error,
        light_error: d.summary.light_error,
        max_nullity: d.summary.max_nullity,
        mean_one_minus_alpha: d.summary.mean_one_minus_alpha,
        nullity: d.rows.iter().map(|r| r.nullity).collect(),
        full_residual: d.rows.iter().map(|r| r.full_residual).collect(),
        light_residual: d.rows.iter().map(|r| r.light_residual).collect(),
    })
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareRequest {
    #[serde(flatten)]
    pub arrivals: ArrivalRequest,
    pub server_lr: f64,
    pub methods: Vec<Method>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Curve {
    pub method: Method,
    pub suboptimality: Vec<f64>,
    pub final_suboptimality: f64,
    pub diverged: bool,
}

/// Train every requested method on the same arrivals and return the curves.
pub fn compare_methods(req: &CompareRequest) -> Result<Vec<Curve>, String> {
    if req.methods.is_empty() {
        return Err("pick at least one method".into());
    }
    req.methods
        .iter()
        .map(|&m| {
            let mut c = req.arrivals.sim(m)?;
            c.server_lr = req.server_lr;
            c.validate().map_err(|e| e.to_string())?;
            let r = run(&c).map_err(|e| e.to_string())?;
            Ok(Curve {
                method: m,
                suboptimality: r.metrics.iter().map(|x| x.suboptimality).collect(),
                final_suboptimality: r.summary.final_suboptimality,
                diverged: r.summary.diverged.is_some(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct Calibration {
    pub one_hot_noise: f64,
    pub one_hot_scale: f64,
    pub sensitivity: f64,
    pub noise_std: f64,
}

/// One-hot scale and total sensitivity giving `S = ratio · clip`.
pub fn dp_calibration(sigma: f64, ratio: f64, clip: f64) -> Result<Calibration, String> {
    let xi = xi_for_sensitivity_ratio(sigma, ratio).map_err(|e| e.to_string())?;
    let (gamma, s) = calibrate_gamma(sigma, xi, clip).map_err(|e| e.to_string())?;
    Ok(Calibration { one_hot_noise: xi, one_hot_scale: gamma, sensitivity: s, noise_std: sigma * s })
}

fn js<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

fn parse<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T, String> {
    serde_json::from_str(text).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn staleness(request: &str) -> Result<String, JsError> {
    js(parse(request).and_then(|r| staleness_report(&r)))
}

#[wasm_bindgen]
pub fn compare(request: &str) -> Result<String, JsError> {
    js(parse(request).and_then(|r| compare_methods(&r)))
}

#[wasm_bindgen]
pub fn calibrate(sigma: f64, ratio: f64, clip: f64) -> Result<String, JsError> {
    js(dp_calibration(sigma, ratio, clip))
}
