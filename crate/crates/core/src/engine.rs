//! The importance-sampled mixture of GP experts.
//!
//! Each of the `J` importance samples is computed independently: pick a
//! minibatch, draw a partition of its inputs from the Gaussian mixture,
//! fit one GP per non-empty cluster, and record the (possibly SA-scaled)
//! sum of expert log marginal likelihoods as the unnormalized log weight.
//! The only step that sees more than one sample is the final weight
//! normalization and prediction averaging.

use std::time::Instant;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gp::{gp_fit, gp_predict, GPModel, KernelHyperparams};
use crate::hyperopt::{optimize_shared, optimize_single, OptimConfig};
use crate::linalg::logsumexp;
use crate::partition::{
    sample_partition, sample_random_partition, ClusterPredictor, MixturePrior, NiwPrior, Partition,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Self-normalized importance weights.
    Importance,
    /// Every surviving sample weighted equally.
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionScheme {
    /// Collapsed Gaussian mixture sampler over the inputs.
    Gmm,
    /// Independent uniform labels.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsmoeConfig {
    /// Number of importance samples.
    pub j: usize,
    /// Number of experts per sample.
    pub k: usize,
    /// Minibatch size; equal to N disables minibatching.
    pub b: usize,
    pub sa_enabled: bool,
    pub shared_hyper: bool,
    pub ard: bool,
    pub n_sweeps: usize,
    pub alpha: f64,
    /// NIW mean concentration.
    pub prior_lambda: f64,
    /// NIW degrees of freedom; `None` means D + 2.
    pub prior_nu: Option<f64>,
    pub seed: u64,
    pub n_workers: usize,
    pub weighting: Weighting,
    pub partition_scheme: PartitionScheme,
    /// Optimizer settings; `likelihood_power` and `seed` are set per expert.
    pub optim: OptimConfig,
}

impl IsmoeConfig {
    pub fn new(j: usize, k: usize, b: usize) -> Self {
        IsmoeConfig {
            j,
            k,
            b,
            sa_enabled: true,
            shared_hyper: true,
            ard: false,
            n_sweeps: 2,
            alpha: MixturePrior::DEFAULT_ALPHA,
            prior_lambda: 1.0,
            prior_nu: None,
            seed: 0,
            n_workers: 1,
            weighting: Weighting::Importance,
            partition_scheme: PartitionScheme::Gmm,
            optim: OptimConfig::default(),
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.j == 0 {
            return bad("J must be at least 1".into());
        }
        if self.k == 0 {
            return bad("K must be at least 1".into());
        }
        if self.b == 0 || self.b > n {
            return bad(format!("B must be in [1, N = {n}], got {}", self.b));
        }
        if self.n_workers == 0 {
            return bad("n_workers must be at least 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.prior_lambda > 0.0 && self.prior_lambda.is_finite()) {
            return bad(format!("prior_lambda must be positive, got {}", self.prior_lambda));
        }
        self.optim.validate()
    }

    /// `N / B` under the stochastic approximation, otherwise 1.
    pub fn likelihood_power(&self, n: usize) -> f64 {
        if self.sa_enabled && self.b < n {
            n as f64 / self.b as f64
        } else {
            1.0
        }
    }

    /// The data-scaled NIW prior with this config's overrides applied.
    pub fn niw_prior(&self, x: &DMatrix<f64>) -> Result<NiwPrior> {
        let base = NiwPrior::from_data(x)?;
        NiwPrior::new(
            base.mu0,
            self.prior_lambda,
            base.psi,
            self.prior_nu.unwrap_or(base.nu),
        )
    }

    /// True when the run reduces to a single exact GP over all the data.
    pub fn is_exact_gp_equivalent(&self, n: usize) -> bool {
        self.k == 1 && self.j == 1 && self.b == n
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based seed derivation; depends only on the inputs.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED_0F15_40E5_u64, |acc, &p| splitmix(acc ^ splitmix(p)))
}

const STREAM_MINIBATCH: u64 = 1;
const STREAM_PARTITION: u64 = 2;
const STREAM_OPTIM: u64 = 3;

/// Seed for sample `index` on its `attempt`-th try.
pub fn sample_seed(config: &IsmoeConfig, index: usize, attempt: usize) -> u64 {
    derive_seed(&[config.seed, index as u64, attempt as u64])
}

/// Optimizer settings used for expert `expert` of a sample seeded by
/// `sample_seed` (for shared hyperparameters `expert` is ignored).
pub fn expert_optim(config: &IsmoeConfig, n: usize, sample_seed: u64, expert: usize) -> OptimConfig {
    OptimConfig {
        likelihood_power: config.likelihood_power(n),
        seed: derive_seed(&[sample_seed, STREAM_OPTIM, expert as u64]),
        ..config.optim.clone()
    }
}

/// Data-scaled starting hyperparameters: amplitude at the output variance,
/// noise at a tenth of it, inverse lengthscale at the inverse input variance.
pub fn initial_hyperparams(x: &DMatrix<f64>, y: &DVector<f64>, ard: bool) -> Result<KernelHyperparams> {
    let n = y.len();
    let var_y = if n > 1 { y.variance() } else { 0.0 };
    let amp = if var_y > 1e-12 { var_y } else { 1.0 };
    let col_var: Vec<f64> = x
        .column_iter()
        .map(|c| {
            let v = if c.len() > 1 { c.variance() } else { 0.0 };
            if v > 1e-12 {
                1.0 / v
            } else {
                1.0
            }
        })
        .collect();
    if ard {
        KernelHyperparams::ard(amp, &col_var, 0.1 * amp)
    } else {
        let mean_inv = col_var.iter().sum::<f64>() / col_var.len().max(1) as f64;
        KernelHyperparams::isotropic(amp, mean_inv, 0.1 * amp)
    }
}

/// One importance sample.
#[derive(Clone, Debug)]
pub struct ImportanceSample {
    pub index: usize,
    /// Rows of the dataset used by this sample, ascending.
    pub minibatch_indices: Vec<usize>,
    pub partition: Partition,
    /// One model per cluster, `None` for empty clusters.
    pub experts: Vec<Option<GPModel>>,
    pub hypers: Vec<KernelHyperparams>,
    pub log_weight_unnorm: f64,
    pub prior: MixturePrior,
    pub seed: u64,
}

fn draw_sample_once(
    dataset: &Dataset,
    config: &IsmoeConfig,
    niw: &NiwPrior,
    index_: usize,
    seed: u64,
) -> Result<ImportanceSample> {
    let n = dataset.len();
    let minibatch: Vec<usize> = if config.b == n {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, STREAM_MINIBATCH]));
        let mut idx = index::sample(&mut rng, n, config.b).into_vec();
        idx.sort_unstable();
        idx
    };
    let mb = dataset.select(&minibatch)?;
    let prior = MixturePrior::new(config.alpha, config.k, niw.clone())?;
    let part_seed = derive_seed(&[seed, STREAM_PARTITION]);
    let partition = match config.partition_scheme {
        PartitionScheme::Gmm => sample_partition(mb.inputs(), &prior, config.n_sweeps, part_seed)?,
        PartitionScheme::Random => sample_random_partition(mb.len(), config.k, part_seed)?,
    };

    let blocks: Vec<(DMatrix<f64>, DVector<f64>)> = (0..config.k)
        .map(|k| {
            let m = partition.members(k);
            (mb.inputs().select_rows(&m), mb.outputs().select_rows(&m))
        })
        .collect();
    let init = initial_hyperparams(mb.inputs(), mb.outputs(), config.ard)?;

    let hypers: Vec<KernelHyperparams> = if config.shared_hyper {
        let (h, _) = optimize_shared(&blocks, &init, &expert_optim(config, n, seed, 0))?;
        vec![h; config.k]
    } else {
        blocks
            .par_iter()
            .enumerate()
            .map(|(k, (x, y))| {
                if x.nrows() == 0 {
                    Ok(init.clone())
                } else {
                    optimize_single(x, y, &init, &expert_optim(config, n, seed, k)).map(|r| r.0)
                }
            })
            .collect::<Result<Vec<_>>>()?
    };

    let experts: Vec<Option<GPModel>> = blocks
        .iter()
        .zip(&hypers)
        .map(|((x, y), h)| {
            if x.nrows() == 0 {
                Ok(None)
            } else {
                gp_fit(x, y, h).map(Some)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let total: f64 = experts.iter().flatten().map(|m| m.log_marginal()).sum();
    let log_weight_unnorm = config.likelihood_power(n) * total;
    if !log_weight_unnorm.is_finite() {
        return Err(Error::NumericalOther(format!(
            "non-finite log weight {log_weight_unnorm}"
        )));
    }
    Ok(ImportanceSample {
        index: index_,
        minibatch_indices: minibatch,
        partition,
        experts,
        hypers,
        log_weight_unnorm,
        prior,
        seed,
    })
}

fn draw_sample_with_prior(
    dataset: &Dataset,
    config: &IsmoeConfig,
    niw: &NiwPrior,
    sample_index: usize,
) -> Result<ImportanceSample> {
    match draw_sample_once(dataset, config, niw, sample_index, sample_seed(config, sample_index, 0)) {
        Ok(s) => Ok(s),
        Err(first) => {
            warn!("importance sample {sample_index} failed ({first}), retrying with a new seed");
            draw_sample_once(dataset, config, niw, sample_index, sample_seed(config, sample_index, 1))
                .map_err(|e| Error::SampleFailure {
                    index: sample_index,
                    reason: e.to_string(),
                })
        }
    }
}

/// Draws importance sample `sample_index`. Deterministic in
/// `(config.seed, sample_index)`.
pub fn draw_sample(dataset: &Dataset, config: &IsmoeConfig, sample_index: usize) -> Result<ImportanceSample> {
    config.validate(dataset.len())?;
    let niw = config.niw_prior(dataset.inputs())?;
    draw_sample_with_prior(dataset, config, &niw, sample_index)
}

/// `w_j = exp(lw_j - logsumexp(lw))`.
pub fn normalize_log_weights(log_weights: &[f64]) -> Result<Vec<f64>> {
    if log_weights.is_empty() {
        return Err(Error::InvalidArgument("no log weights to normalize".into()));
    }
    if log_weights.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("log weights must be finite".into()));
    }
    let z = logsumexp(log_weights);
    Ok(log_weights.iter().map(|lw| (lw - z).exp()).collect())
}

/// `1 / Σ w²`.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// Mean and variance of a Gaussian mixture. Zero-weight components are
/// skipped, so a single unit weight returns that component exactly.
pub fn moment_match(weights: &[f64], means: &[f64], variances: &[f64]) -> (f64, f64) {
    let mean: f64 = weights
        .iter()
        .zip(means)
        .filter(|(w, _)| **w > 0.0)
        .map(|(w, m)| w * m)
        .sum();
    let var: f64 = weights
        .iter()
        .zip(means.iter().zip(variances))
        .filter(|(w, _)| **w > 0.0)
        .map(|(w, (m, v))| w * (v + (m - mean) * (m - mean)))
        .sum();
    (mean, var)
}

/// Predictive mean and variance of one importance sample.
pub fn sample_predict(
    sample: &ImportanceSample,
    xstar: &DMatrix<f64>,
    dataset: &Dataset,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if xstar.ncols() != dataset.dim() {
        return Err(Error::InputShape(format!(
            "test inputs have {} columns, data has {}",
            xstar.ncols(),
            dataset.dim()
        )));
    }
    let mb_x = dataset.inputs().select_rows(&sample.minibatch_indices);
    let membership = ClusterPredictor::new(&sample.partition, &mb_x, &sample.prior)?;
    let m = xstar.nrows();
    let k = sample.experts.len();
    let mut means = DMatrix::zeros(m, k);
    let mut vars = DMatrix::zeros(m, k);
    for (c, expert) in sample.experts.iter().enumerate() {
        if let Some(model) = expert {
            let (mu, var) = gp_predict(model, xstar)?;
            means.set_column(c, &mu);
            vars.set_column(c, &var);
        }
    }
    let rows = crate::gp::rows_of(xstar);
    let mut mean = DVector::zeros(m);
    let mut var = DVector::zeros(m);
    for (i, row) in rows.iter().enumerate() {
        let p = membership.nonempty_probs(row);
        let mi: Vec<f64> = means.row(i).iter().copied().collect();
        let vi: Vec<f64> = vars.row(i).iter().copied().collect();
        let (a, b) = moment_match(&p, &mi, &vi);
        mean[i] = a;
        var[i] = b;
    }
    Ok((mean, var))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveResult {
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
    /// J×M, rows of failed samples left at zero.
    pub per_sample_means: Option<DMatrix<f64>>,
    pub per_sample_variances: Option<DMatrix<f64>>,
    /// Length J; failed samples carry weight zero.
    pub normalized_weights: Vec<f64>,
}

impl PredictiveResult {
    pub fn ess(&self) -> f64 {
        effective_sample_size(&self.normalized_weights)
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunDiagnostics {
    pub failures: Vec<(usize, String)>,
    pub ess: f64,
    /// Points at which results from different samples were combined.
    pub aggregation_barriers: usize,
    pub sample_seconds: Vec<f64>,
    pub runtime_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    /// Surviving samples, in index order.
    pub samples: Vec<ImportanceSample>,
    pub prediction: PredictiveResult,
    pub diagnostics: RunDiagnostics,
}

/// Combines per-sample predictions with the given weights.
pub fn combine_samples(
    weights: &[f64],
    means: &DMatrix<f64>,
    variances: &DMatrix<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let m = means.ncols();
    let mut mean = DVector::zeros(m);
    let mut var = DVector::zeros(m);
    for i in 0..m {
        let mu: Vec<f64> = means.column(i).iter().copied().collect();
        let v: Vec<f64> = variances.column(i).iter().copied().collect();
        let (a, b) = moment_match(weights, &mu, &v);
        mean[i] = a;
        var[i] = b;
    }
    (mean, var)
}

type SampleOutcome = (Result<(ImportanceSample, DVector<f64>, DVector<f64>)>, f64);

/// Runs the full algorithm and predicts at `xstar`.
pub fn run(dataset: &Dataset, config: &IsmoeConfig, xstar: &DMatrix<f64>) -> Result<RunOutput> {
    let start = Instant::now();
    let n = dataset.len();
    config.validate(n)?;
    if xstar.ncols() != dataset.dim() {
        return Err(Error::InputShape(format!(
            "test inputs have {} columns, data has {}",
            xstar.ncols(),
            dataset.dim()
        )));
    }
    let niw = config.niw_prior(dataset.inputs())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.n_workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;

    let outcomes: Vec<SampleOutcome> = pool.install(|| {
        (0..config.j)
            .into_par_iter()
            .map(|j| {
                let t = Instant::now();
                let r = draw_sample_with_prior(dataset, config, &niw, j).and_then(|s| {
                    let (mu, var) = sample_predict(&s, xstar, dataset)?;
                    Ok((s, mu, var))
                });
                (r, t.elapsed().as_secs_f64())
            })
            .collect()
    });

    // the single aggregation point
    let mut diagnostics = RunDiagnostics {
        aggregation_barriers: 1,
        ..RunDiagnostics::default()
    };
    let m = xstar.nrows();
    let mut means = DMatrix::zeros(config.j, m);
    let mut vars = DMatrix::zeros(config.j, m);
    let mut samples = Vec::new();
    let mut alive = Vec::new();
    for (j, (outcome, secs)) in outcomes.into_iter().enumerate() {
        diagnostics.sample_seconds.push(secs);
        match outcome {
            Ok((s, mu, var)) => {
                means.set_row(j, &mu.transpose());
                vars.set_row(j, &var.transpose());
                alive.push(j);
                samples.push(s);
            }
            Err(e) => diagnostics.failures.push((j, e.to_string())),
        }
    }
    let failed = diagnostics.failures.len();
    if 2 * failed > config.j || samples.is_empty() {
        return Err(Error::TooManyFailures {
            failed,
            total: config.j,
        });
    }
    let survivor_weights = match config.weighting {
        Weighting::Importance => {
            let lw: Vec<f64> = samples.iter().map(|s| s.log_weight_unnorm).collect();
            normalize_log_weights(&lw)?
        }
        Weighting::Uniform => vec![1.0 / samples.len() as f64; samples.len()],
    };
    let mut weights = vec![0.0; config.j];
    for (&j, w) in alive.iter().zip(&survivor_weights) {
        weights[j] = *w;
    }
    let (mean, variance) = combine_samples(&weights, &means, &vars);
    diagnostics.ess = effective_sample_size(&survivor_weights);
    diagnostics.runtime_seconds = start.elapsed().as_secs_f64();
    Ok(RunOutput {
        samples,
        prediction: PredictiveResult {
            mean,
            variance,
            per_sample_means: Some(means),
            per_sample_variances: Some(vars),
            normalized_weights: weights,
        },
        diagnostics,
    })
}

/// Exact GP on the whole dataset with the same initialization and
/// optimizer settings an expert would get.
pub fn fit_exact_gp(dataset: &Dataset, optim: &OptimConfig, ard: bool) -> Result<GPModel> {
    let x = dataset.inputs();
    let y = dataset.outputs();
    let init = initial_hyperparams(x, y, ard)?;
    let (h, _) = optimize_single(x, y, &init, optim)?;
    gp_fit(x, y, &h)
}
