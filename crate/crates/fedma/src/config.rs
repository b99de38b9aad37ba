//! JSON configuration files for the command-line tool.
//!
//! Three documents are understood: a [`RunConfig`] for a single simulation, an
//! [`ExperimentSpec`] describing a grid, and a [`DiagnoseSpec`] for offline
//! analysis of a staleness matrix. Parse errors carry the file, line and
//! column. Only the seed and the output directory can be overridden from the
//! environment.

use crate::engine::{EngineError, Method, SimConfig};
use crate::staleness::DelayKind;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Environment variable overriding the seed of any loaded config.
pub const SEED_ENV: &str = "FEDMA_SEED";
/// Environment variable overriding the output directory.
pub const OUT_ENV: &str = "FEDMA_OUT";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{origin}:{line}:{column}: {message}")]
    Parse {
        origin: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{origin}: {message}")]
    Invalid { origin: String, message: String },
    #[error("{name}: cannot parse {value:?}")]
    Env { name: &'static str, value: String },
}

impl ConfigError {
    fn invalid(origin: &str, message: impl Into<String>) -> Self {
        ConfigError::Invalid { origin: origin.to_string(), message: message.into() }
    }
}

/// Deserialize `text`, reporting failures against `origin` with line and column.
pub fn parse_json<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T, ConfigError> {
    serde_json::from_str(text).map_err(|e| {
        let message = e.to_string();
        // serde appends " at line L column C"; the prefix already says where
        let message = match message.rfind(" at line ") {
            Some(i) => message[..i].to_string(),
            None => message,
        };
        ConfigError::Parse { origin: origin.to_string(), line: e.line(), column: e.column(), message }
    })
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })
}

/// Seed and output directory taken from the environment, if set.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EnvOverrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl EnvOverrides {
    pub fn from_env() -> Result<Self, ConfigError> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    /// Same as [`EnvOverrides::from_env`] with an injectable lookup.
    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        let seed = match get(SEED_ENV) {
            Some(v) => Some(v.trim().parse().map_err(|_| ConfigError::Env { name: SEED_ENV, value: v })?),
            None => None,
        };
        let out = get(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
        Ok(EnvOverrides { seed, out })
    }
}

fn validate_sim(sim: &SimConfig, origin: &str) -> Result<(), ConfigError> {
    sim.validate().map_err(|e| match e {
        EngineError::Config(m) => ConfigError::invalid(origin, m),
        other => ConfigError::invalid(origin, other.to_string()),
    })
}

/// A single simulation plus what to write besides metrics and summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub sim: SimConfig,
    /// Also write `W` (and `A` for the momentum-approximation methods) as CSV triplets.
    #[serde(default)]
    pub dump_matrices: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = parse_json(text, origin)?;
        validate_sim(&cfg.sim, origin)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&read(path)?, &path.display().to_string())
    }

    pub fn apply(&mut self, env: &EnvOverrides) {
        if let Some(seed) = env.seed {
            self.sim.seed = seed;
        }
        if let Some(out) = &env.out {
            self.out_dir = Some(out.clone());
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Values to sweep. An empty list keeps the template's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxes {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub method: Vec<Method>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub beta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub p: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cohort: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seed: Vec<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub delay_kind: Vec<DelayKind>,
}

impl SweepAxes {
    /// Number of grid points, saturating rather than overflowing.
    pub fn size(&self) -> u64 {
        [
            self.method.len(),
            self.beta.len(),
            self.p.len(),
            self.cohort.len(),
            self.seed.len(),
            self.delay_kind.len(),
        ]
        .iter()
        .fold(1u64, |acc, &n| acc.saturating_mul(n.max(1) as u64))
    }
}

/// A template run and the axes to vary it along.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub base: SimConfig,
    #[serde(default)]
    pub axes: SweepAxes,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Worker threads; the `--jobs` flag wins over this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
}

impl ExperimentSpec {
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let spec: ExperimentSpec = parse_json(text, origin)?;
        if let Some(b) = spec.axes.beta.iter().find(|b| !(-1.0..1.0).contains(*b)) {
            return Err(ConfigError::invalid(origin, format!("beta values must lie in [-1, 1), got {b}")));
        }
        if let Some(p) = spec.axes.p.iter().find(|p| !(**p >= 0.0 && p.is_finite())) {
            return Err(ConfigError::invalid(origin, format!("p values must be non-negative, got {p}")));
        }
        if spec.jobs == Some(0) {
            return Err(ConfigError::invalid(origin, "jobs must be at least 1"));
        }
        validate_sim(&spec.base, origin)?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&read(path)?, &path.display().to_string())
    }

    /// The seed override replaces the template seed and any seed axis.
    pub fn apply(&mut self, env: &EnvOverrides) {
        if let Some(seed) = env.seed {
            self.base.seed = seed;
            self.axes.seed.clear();
        }
        if let Some(out) = &env.out {
            self.out_dir = Some(out.clone());
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }
}

/// Three-distribution least-squares report settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelayTableSpec {
    #[serde(default = "default_kinds")]
    pub kinds: Vec<DelayKind>,
    /// Half-normal σ and exponential mean; the uniform cutoff is twice this.
    #[serde(default = "default_table_scale")]
    pub scale: f64,
    /// Candidate exponents; each row keeps the one with the smallest full-MA error.
    #[serde(default = "default_p_grid")]
    pub p_grid: Vec<f64>,
}

fn default_kinds() -> Vec<DelayKind> {
    vec![DelayKind::HalfNormal, DelayKind::Uniform, DelayKind::Exponential]
}
fn default_table_scale() -> f64 {
    10.0
}
fn default_p_grid() -> Vec<f64> {
    vec![0.5, 1.0, 1.5, 2.0]
}

impl Default for DelayTableSpec {
    fn default() -> Self {
        DelayTableSpec { kinds: default_kinds(), scale: default_table_scale(), p_grid: default_p_grid() }
    }
}

/// Offline analysis of a staleness matrix, either simulated or loaded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseSpec {
    /// Simulate `W` from this config's arrival process (no training).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimConfig>,
    /// Or read `W` from a `row,col,value` CSV.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<PathBuf>,
    /// Momentum of the target when `W` is loaded from a file.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Cohort size for the `‖A‖_F²` growth ratio when `W` is loaded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cohort: Option<usize>,
    /// Also produce the three-distribution table, using `sim` as the template.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay_table: Option<DelayTableSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

fn default_beta() -> f64 {
    0.9
}

impl DiagnoseSpec {
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let spec: DiagnoseSpec = parse_json(text, origin)?;
        match (&spec.sim, &spec.matrix) {
            (Some(sim), None) => validate_sim(sim, origin)?,
            (None, Some(_)) => {
                if spec.delay_table.is_some() {
                    return Err(ConfigError::invalid(origin, "delay_table needs a `sim` template"));
                }
            }
            _ => return Err(ConfigError::invalid(origin, "give exactly one of `sim` and `matrix`")),
        }
        if !(0.0..1.0).contains(&spec.beta) {
            return Err(ConfigError::invalid(origin, format!("beta must lie in [0, 1), got {}", spec.beta)));
        }
        if let Some(t) = &spec.delay_table {
            if t.kinds.is_empty() || t.p_grid.is_empty() || !(t.scale > 0.0) {
                return Err(ConfigError::invalid(origin, "delay_table needs kinds, a p grid and a positive scale"));
            }
        }
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&read(path)?, &path.display().to_string())
    }

    pub fn apply(&mut self, env: &EnvOverrides) {
        if let (Some(seed), Some(sim)) = (env.seed, self.sim.as_mut()) {
            sim.seed = seed;
        }
        if let Some(out) = &env.out {
            self.out_dir = Some(out.clone());
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }
}
