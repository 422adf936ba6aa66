//! Flat run configuration: a TOML file of `key = value` pairs, overridden
//! by `--key value` flags. Every key has a default and unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use ismoe::engine::{IsmoeConfig, PartitionScheme, Weighting};
use ismoe::hyperopt::{InitBounds, OptimConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::CliError;

pub const WORKERS_ENV: &str = "ISMOE_WORKERS";

/// Keys whose single-value overrides are read as one-element lists.
const LIST_KEYS: &[&str] = &["sweep_j", "sweep_k", "sweep_b"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // data and outputs
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub predictions: PathBuf,
    pub report: PathBuf,
    pub sweep_output: PathBuf,
    pub out_dir: PathBuf,
    /// Write wall-clock timings into reports; off gives byte-identical reports.
    pub report_timings: bool,

    // model
    pub j: usize,
    pub k: usize,
    /// Minibatch size; absent means the full training set.
    pub b: Option<usize>,
    pub sa_enabled: bool,
    pub shared_hyper: bool,
    pub ard: bool,
    pub n_sweeps: usize,
    pub alpha: f64,
    /// NIW mean concentration.
    pub prior_lambda: f64,
    /// NIW degrees of freedom; absent means D + 2.
    pub prior_nu: Option<f64>,
    pub weighting: Weighting,
    pub partition_scheme: PartitionScheme,
    pub seed: u64,
    /// Absent means ISMOE_WORKERS, then the available hardware threads.
    pub n_workers: Option<usize>,

    // optimizer
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub n_restarts: usize,
    pub amplitude_bounds: [f64; 2],
    pub inv_lengthscale_bounds: [f64; 2],
    pub noise_bounds: [f64; 2],

    // exact GP baseline
    pub max_exact_n: usize,
    pub allow_large: bool,

    // sweep
    pub sweep_j: Vec<usize>,
    pub sweep_k: Vec<usize>,
    pub sweep_b: Vec<usize>,
    pub n_repeats: usize,

    // generators
    pub n_train: usize,
    pub n_test: usize,
    /// Absent means 15 for stationary data and 0.2 for GMM data.
    pub gamma: Option<f64>,
    pub amplitude: f64,
    pub noise_var: f64,
    pub input_dim: usize,
    pub n_components: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let optim = OptimConfig::default();
        RunConfig {
            train: None,
            test: None,
            predictions: PathBuf::from("predictions.csv"),
            report: PathBuf::from("report.json"),
            sweep_output: PathBuf::from("sweep.csv"),
            out_dir: PathBuf::from("."),
            report_timings: true,
            j: 10,
            k: 10,
            b: None,
            sa_enabled: true,
            shared_hyper: true,
            ard: false,
            n_sweeps: 2,
            alpha: 2.0,
            prior_lambda: 1.0,
            prior_nu: None,
            weighting: Weighting::Importance,
            partition_scheme: PartitionScheme::Gmm,
            seed: 0,
            n_workers: None,
            max_iterations: optim.max_iterations,
            gradient_tolerance: optim.gradient_tolerance,
            n_restarts: optim.n_restarts,
            amplitude_bounds: [0.01, 100.0],
            inv_lengthscale_bounds: [0.1, 1000.0],
            noise_bounds: [1e-4, 10.0],
            max_exact_n: 5000,
            allow_large: false,
            sweep_j: vec![1, 5, 10],
            sweep_k: vec![10],
            sweep_b: vec![],
            n_repeats: 1,
            n_train: 1000,
            n_test: 100,
            gamma: None,
            amplitude: 1.0,
            noise_var: 1.0,
            input_dim: 2,
            n_components: 4,
        }
    }
}

/// Parses one override value: as a TOML value, then as a comma-separated
/// list, then as a plain string.
fn parse_value(raw: &str) -> Value {
    if let Ok(t) = format!("v = {raw}").parse::<Table>() {
        if let Some(v) = t.get("v") {
            return v.clone();
        }
    }
    if let Ok(t) = format!("v = [{raw}]").parse::<Table>() {
        if let Some(Value::Array(a)) = t.get("v") {
            return Value::Array(a.clone());
        }
    }
    Value::String(raw.to_string())
}

/// Turns `--key value` / `--key=value` pairs into a table. Dashes in
/// keys become underscores.
pub fn parse_overrides(args: &[String]) -> Result<Table, CliError> {
    let mut table = Table::new();
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        let Some(stripped) = arg.strip_prefix("--") else {
            return Err(CliError::Config(format!("expected --key, found {arg:?}")));
        };
        let (key, raw) = match stripped.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = args
                    .get(i + 1)
                    .ok_or_else(|| CliError::Config(format!("--{stripped} needs a value")))?;
                i += 1;
                (stripped.to_string(), v.clone())
            }
        };
        if key.is_empty() {
            return Err(CliError::Config("empty option name".into()));
        }
        table.insert(key.replace('-', "_"), parse_value(&raw));
        i += 1;
    }
    Ok(table)
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<RunConfig, CliError> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        RunConfig::from_table(table)
    }

    pub fn from_table(mut table: Table) -> Result<RunConfig, CliError> {
        for key in LIST_KEYS {
            if let Some(v) = table.get_mut(*key) {
                if !v.is_array() {
                    *v = Value::Array(vec![v.clone()]);
                }
            }
        }
        Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))
    }

    /// Reads an optional config file and applies overrides on top of it.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Io {
                    path: p.display().to_string(),
                    source: e,
                })?;
                text.parse::<Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for (k, v) in parse_overrides(overrides)? {
            table.insert(k, v);
        }
        RunConfig::from_table(table)
    }

    pub fn workers(&self) -> Result<usize, CliError> {
        if let Some(n) = self.n_workers {
            return Ok(n);
        }
        match std::env::var(WORKERS_ENV) {
            Ok(v) => v
                .trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| CliError::Config(format!("{WORKERS_ENV} must be a positive integer, got {v:?}"))),
            Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
        }
    }

    pub fn optim(&self) -> Result<OptimConfig, CliError> {
        let log_pair = |name: &str, [lo, hi]: [f64; 2]| {
            if lo > 0.0 && hi > lo && hi.is_finite() {
                Ok((lo.ln(), hi.ln()))
            } else {
                Err(CliError::Config(format!(
                    "{name} must satisfy 0 < lower < upper, got [{lo}, {hi}]"
                )))
            }
        };
        Ok(OptimConfig {
            max_iterations: self.max_iterations,
            gradient_tolerance: self.gradient_tolerance,
            n_restarts: self.n_restarts,
            init_log_bounds: InitBounds {
                log_amplitude: log_pair("amplitude_bounds", self.amplitude_bounds)?,
                log_inv_lengthscale: log_pair("inv_lengthscale_bounds", self.inv_lengthscale_bounds)?,
                log_noise: log_pair("noise_bounds", self.noise_bounds)?,
            },
            likelihood_power: 1.0,
            seed: self.seed,
        })
    }

    /// Engine configuration for a training set of `n` points.
    pub fn ismoe(&self, n: usize) -> Result<IsmoeConfig, CliError> {
        let mut c = IsmoeConfig::new(self.j, self.k, self.b.unwrap_or(n));
        c.sa_enabled = self.sa_enabled;
        c.shared_hyper = self.shared_hyper;
        c.ard = self.ard;
        c.n_sweeps = self.n_sweeps;
        c.alpha = self.alpha;
        c.prior_lambda = self.prior_lambda;
        c.prior_nu = self.prior_nu;
        c.seed = self.seed;
        c.n_workers = self.workers()?;
        c.weighting = self.weighting;
        c.partition_scheme = self.partition_scheme;
        c.optim = self.optim()?;
        c.validate(n)?;
        Ok(c)
    }
}
