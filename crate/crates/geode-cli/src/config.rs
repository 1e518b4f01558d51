//! Run configuration: a TOML document whose keys mirror the sampler
//! hyperparameters plus file paths and benchmark options. Unknown keys are
//! rejected. Precedence is CLI flag > config file > built-in default.

use std::path::{Path, PathBuf};

use geode::Hyperparams;
use serde::{Deserialize, Serialize};

use crate::{CliError, Result};

fn d_half() -> f64 {
    0.5
}
fn d_tau() -> f64 {
    0.05
}
fn d_one() -> f64 {
    1.0
}
fn d_c0() -> f64 {
    -1.0
}
fn d_c1() -> f64 {
    -0.005
}
fn d_tol() -> f64 {
    1e-4
}
fn d_upper() -> usize {
    10
}
fn d_depth() -> usize {
    6
}
fn d_iters() -> usize {
    1000
}
fn d_burn_in() -> usize {
    500
}
fn d_thin() -> usize {
    1
}
fn d_bench_dims() -> Vec<usize> {
    vec![500, 1000, 2000, 4000]
}
fn d_bench_n() -> usize {
    1000
}
fn d_bench_iters() -> usize {
    20
}
fn d_bench_reps() -> usize {
    3
}

/// Everything a run may configure. All fields are optional in the file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Training or input data path (commands may override with a flag).
    pub data: Option<PathBuf>,
    /// Output path (model file, table, or report).
    pub out: Option<PathBuf>,

    // Sampler hyperparameters; defaults match `Hyperparams::default`.
    #[serde(default = "d_half")]
    pub a_sigma: f64,
    #[serde(default = "d_half")]
    pub b_sigma: f64,
    #[serde(default = "d_tau")]
    pub a_tau: f64,
    #[serde(default = "d_one")]
    pub a_stop: f64,
    #[serde(default = "d_one")]
    pub b_branch: f64,
    #[serde(default = "d_c0")]
    pub c0: f64,
    #[serde(default = "d_c1")]
    pub c1: f64,
    #[serde(default = "d_tol")]
    pub tol: f64,
    #[serde(default = "d_upper")]
    pub d_upper: usize,
    #[serde(default = "d_depth")]
    pub max_depth: usize,
    #[serde(default)]
    pub min_cell_size: Option<usize>,
    #[serde(default = "d_iters")]
    pub iters: usize,
    #[serde(default = "d_burn_in")]
    pub burn_in: usize,
    #[serde(default = "d_thin")]
    pub thin: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub threads: Option<usize>,

    // Benchmark options.
    #[serde(default = "d_bench_dims")]
    pub bench_dims: Vec<usize>,
    #[serde(default = "d_bench_n")]
    pub bench_n: usize,
    #[serde(default = "d_bench_iters")]
    pub bench_iters: usize,
    #[serde(default = "d_bench_reps")]
    pub bench_reps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config is valid")
    }
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_toml(text: &str) -> std::result::Result<Self, String> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.iters == 0 {
            return Err("iters must be ≥ 1".into());
        }
        if self.thin == 0 {
            return Err("thin must be ≥ 1".into());
        }
        if self.burn_in >= self.iters {
            return Err(format!(
                "burn_in ({}) must be below iters ({})",
                self.burn_in, self.iters
            ));
        }
        if self.d_upper == 0 {
            return Err("d_upper must be ≥ 1".into());
        }
        if self.bench_dims.is_empty() {
            return Err("bench_dims must be non-empty".into());
        }
        self.to_hyper().validate().map_err(|e| e.to_string())
    }

    /// The sampler view of this configuration.
    pub fn to_hyper(&self) -> Hyperparams {
        Hyperparams {
            a_sigma: self.a_sigma,
            b_sigma: self.b_sigma,
            a_tau: self.a_tau,
            a_stop: self.a_stop,
            b_branch: self.b_branch,
            c0: self.c0,
            c1: self.c1,
            tol: self.tol,
            d_upper: self.d_upper,
            max_depth: self.max_depth,
            min_cell_size: self.min_cell_size,
            iters: self.iters,
            burn_in: self.burn_in,
            thin: self.thin,
            seed: self.seed,
        }
    }
}
