//! The subcommands. Each one validates its whole configuration and loads
//! its inputs before any computation, and writes nothing on failure.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ismoe::data::{Dataset, GeneratorParams};
use ismoe::engine::{derive_seed, fit_exact_gp, run, IsmoeConfig, PartitionScheme, PredictiveResult, Weighting};
use ismoe::gp::gp_predict;
use ismoe::metrics::EvalReport;
use log::info;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

/// 97.5% standard normal quantile.
const Z_95: f64 = 1.959964;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum GeneratorKind {
    Stationary,
    Nonstationary,
    Gmm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum AblationMode {
    IsSa,
    IsNosa,
    UnifSa,
    UnifNosa,
    Gmm,
    RandomPartition,
}

impl AblationMode {
    fn apply(self, config: &mut RunConfig) {
        match self {
            AblationMode::IsSa | AblationMode::IsNosa | AblationMode::UnifSa | AblationMode::UnifNosa => {
                config.weighting = match self {
                    AblationMode::IsSa | AblationMode::IsNosa => Weighting::Importance,
                    _ => Weighting::Uniform,
                };
                config.sa_enabled = matches!(self, AblationMode::IsSa | AblationMode::UnifSa);
            }
            AblationMode::Gmm => config.partition_scheme = PartitionScheme::Gmm,
            AblationMode::RandomPartition => config.partition_scheme = PartitionScheme::Random,
        }
    }
}

/// JSON report written by `fit-predict`, `baseline-gp` and `ablate`.
#[derive(Debug, Serialize)]
pub struct RunReport {
    pub command: String,
    pub mode: Option<AblationMode>,
    pub exact_gp_equivalent: bool,
    pub n_train: usize,
    pub n_test: usize,
    pub j: usize,
    pub k: usize,
    pub b: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub eval: EvalReport,
    pub normalized_weights: Vec<f64>,
    pub failure_count: usize,
    pub failures: Vec<String>,
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn require_path(p: &Option<PathBuf>, key: &str) -> Result<PathBuf, CliError> {
    p.clone()
        .ok_or_else(|| CliError::Config(format!("`{key}` (path to a CSV file) is required")))
}

fn check_parent_dir(path: &Path) -> Result<(), CliError> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => return Ok(()),
    };
    if parent.is_dir() {
        Ok(())
    } else {
        Err(io_err(
            parent,
            std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
        ))
    }
}

fn load_train_test(config: &RunConfig) -> Result<(Dataset, Dataset), CliError> {
    let train = Dataset::load(&require_path(&config.train, "train")?)?;
    let test = Dataset::load(&require_path(&config.test, "test")?)?;
    if train.dim() != test.dim() {
        return Err(ismoe::Error::InputShape(format!(
            "train has {} input columns, test has {}",
            train.dim(),
            test.dim()
        ))
        .into());
    }
    Ok((train, test))
}

fn write_predictions(path: &Path, pred: &PredictiveResult) -> Result<(), CliError> {
    let mut out = String::from("index,mean,variance,lower,upper\n");
    for (i, (m, v)) in pred.mean.iter().zip(pred.variance.iter()).enumerate() {
        let half = Z_95 * v.sqrt();
        out.push_str(&format!("{i},{m:?},{v:?},{:?},{:?}\n", m - half, m + half));
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Config(format!("cannot serialize report: {e}")))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn timing(config: &RunConfig, secs: f64) -> f64 {
    if config.report_timings {
        secs
    } else {
        0.0
    }
}

/// Writes `train.csv`, `test.csv` and `meta.json` into `out_dir`.
pub fn cmd_generate(kind: GeneratorKind, config: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let dir = &config.out_dir;
    if !dir.is_dir() {
        return Err(io_err(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
        ));
    }
    let params = match kind {
        GeneratorKind::Stationary => GeneratorParams::Stationary {
            n_train: config.n_train,
            n_test: config.n_test,
            gamma: config.gamma.unwrap_or(15.0),
            amplitude: config.amplitude,
            noise_var: config.noise_var,
            seed: config.seed,
        },
        GeneratorKind::Nonstationary => GeneratorParams::Nonstationary {
            n_train: config.n_train,
            n_test: config.n_test,
            noise_var: config.noise_var,
            seed: config.seed,
        },
        GeneratorKind::Gmm => GeneratorParams::Gmm {
            n_train: config.n_train,
            n_test: config.n_test,
            input_dim: config.input_dim,
            n_components: config.n_components,
            gamma: config.gamma.unwrap_or(0.2),
            noise_var: config.noise_var,
            seed: config.seed,
        },
    };
    let (train, test) = params.generate()?;
    let paths = [dir.join("train.csv"), dir.join("test.csv"), dir.join("meta.json")];
    train.save(&paths[0])?;
    test.save(&paths[1])?;
    write_json(&paths[2], &params)?;
    Ok(paths.to_vec())
}

fn run_ismoe(
    command: &str,
    mode: Option<AblationMode>,
    config: &RunConfig,
) -> Result<RunReport, CliError> {
    let (train, test) = load_train_test(config)?;
    let engine: IsmoeConfig = config.ismoe(train.len())?;
    check_parent_dir(&config.predictions)?;
    check_parent_dir(&config.report)?;
    info!("{command}: N = {}, M = {}, J = {}, K = {}, B = {}", train.len(), test.len(), engine.j, engine.k, engine.b);

    let start = Instant::now();
    let out = run(&train, &engine, test.inputs())?;
    let secs = start.elapsed().as_secs_f64();
    let eval = EvalReport::evaluate(&out.prediction, test.outputs(), timing(config, secs))?;
    write_predictions(&config.predictions, &out.prediction)?;
    let report = RunReport {
        command: command.to_string(),
        mode,
        exact_gp_equivalent: engine.is_exact_gp_equivalent(train.len()),
        n_train: train.len(),
        n_test: test.len(),
        j: engine.j,
        k: engine.k,
        b: engine.b,
        seed: engine.seed,
        eval,
        normalized_weights: out.prediction.normalized_weights.clone(),
        failure_count: out.diagnostics.failures.len(),
        failures: out
            .diagnostics
            .failures
            .iter()
            .map(|(j, e)| format!("sample {j}: {e}"))
            .collect(),
    };
    write_json(&config.report, &report)?;
    Ok(report)
}

pub fn cmd_fit_predict(config: &RunConfig) -> Result<RunReport, CliError> {
    run_ismoe("fit-predict", None, config)
}

pub fn cmd_ablate(mode: AblationMode, config: &RunConfig) -> Result<RunReport, CliError> {
    let mut config = config.clone();
    mode.apply(&mut config);
    run_ismoe("ablate", Some(mode), &config)
}

pub fn cmd_baseline_gp(config: &RunConfig) -> Result<RunReport, CliError> {
    let (train, test) = load_train_test(config)?;
    let n = train.len();
    if n > config.max_exact_n && !config.allow_large {
        return Err(ismoe::Error::Size(format!(
            "exact GP on {n} points needs O(N^3) = {:.1e} operations and O(N^2) memory; \
             the limit is max_exact_n = {} (set allow_large = true to override)",
            (n as f64).powi(3),
            config.max_exact_n
        ))
        .into());
    }
    let optim = config.optim()?;
    optim.validate()?;
    check_parent_dir(&config.predictions)?;
    check_parent_dir(&config.report)?;

    let start = Instant::now();
    let model = fit_exact_gp(&train, &optim, config.ard)?;
    let (mean, variance) = gp_predict(&model, test.inputs())?;
    let secs = start.elapsed().as_secs_f64();
    let pred = PredictiveResult {
        mean,
        variance,
        per_sample_means: None,
        per_sample_variances: None,
        normalized_weights: vec![1.0],
    };
    let eval = EvalReport::evaluate(&pred, test.outputs(), timing(config, secs))?;
    write_predictions(&config.predictions, &pred)?;
    let report = RunReport {
        command: "baseline-gp".into(),
        mode: None,
        exact_gp_equivalent: true,
        n_train: n,
        n_test: test.len(),
        j: 1,
        k: 1,
        b: n,
        seed: config.seed,
        eval,
        normalized_weights: vec![1.0],
        failure_count: 0,
        failures: vec![],
    };
    write_json(&config.report, &report)?;
    Ok(report)
}

#[derive(Debug, Serialize)]
pub struct SweepRow {
    #[serde(rename = "J")]
    pub j: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "B")]
    pub b: usize,
    pub repeat: usize,
    pub seed: u64,
    pub status: &'static str,
    pub test_log_likelihood: Option<f64>,
    pub mse: Option<f64>,
    pub ess: Option<f64>,
    pub runtime_seconds: Option<f64>,
    pub error: String,
}

/// Runs every (J, K, B, repeat) combination and writes one CSV row each.
/// Failed runs are recorded with `status = error`.
pub fn cmd_sweep(config: &RunConfig) -> Result<Vec<SweepRow>, CliError> {
    let (train, test) = load_train_test(config)?;
    let n = train.len();
    let bs: Vec<usize> = if config.sweep_b.is_empty() {
        vec![config.b.unwrap_or(n)]
    } else {
        config.sweep_b.clone()
    };
    if config.sweep_j.is_empty() || config.sweep_k.is_empty() || config.n_repeats == 0 {
        return Err(CliError::Config(
            "sweep grid is empty (sweep_j, sweep_k and n_repeats must be non-empty)".into(),
        ));
    }
    // validates everything that does not vary across the grid
    let mut base = config.clone();
    base.j = 1;
    base.k = 1;
    base.b = Some(n);
    base.ismoe(n)?;
    check_parent_dir(&config.sweep_output)?;

    let mut rows = Vec::new();
    for &j in &config.sweep_j {
        for &k in &config.sweep_k {
            for &b in &bs {
                for repeat in 0..config.n_repeats {
                    let mut c = config.clone();
                    c.j = j;
                    c.k = k;
                    c.b = Some(b);
                    c.seed = derive_seed(&[config.seed, repeat as u64]);
                    let start = Instant::now();
                    let result = c
                        .ismoe(n)
                        .and_then(|e| Ok(run(&train, &e, test.inputs())?))
                        .and_then(|out| {
                            Ok(EvalReport::evaluate(&out.prediction, test.outputs(), 0.0)?)
                        });
                    let secs = timing(config, start.elapsed().as_secs_f64());
                    rows.push(match result {
                        Ok(r) => SweepRow {
                            j,
                            k,
                            b,
                            repeat,
                            seed: c.seed,
                            status: "ok",
                            test_log_likelihood: Some(r.test_log_likelihood),
                            mse: Some(r.mse),
                            ess: Some(r.ess),
                            runtime_seconds: Some(secs),
                            error: String::new(),
                        },
                        Err(e) => SweepRow {
                            j,
                            k,
                            b,
                            repeat,
                            seed: c.seed,
                            status: "error",
                            test_log_likelihood: None,
                            mse: None,
                            ess: None,
                            runtime_seconds: Some(secs),
                            error: e.to_string(),
                        },
                    });
                }
            }
        }
    }
    let path = &config.sweep_output;
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for row in &rows {
        w.serialize(row)
            .map_err(|e| io_err(path, std::io::Error::other(e.to_string())))?;
    }
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(rows)
}

/// Flushes and reports where files went, for the binary.
pub fn announce(paths: &[&Path]) {
    let mut out = std::io::stdout().lock();
    for p in paths {
        let _ = writeln!(out, "wrote {}", p.display());
    }
}
