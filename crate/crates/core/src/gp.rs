//! Exact Gaussian process regression with a squared-exponential kernel.
//!
//! The kernel is `k(x, x') = ν · exp(-Σ_d γ_d (x_d - x'_d)²)` where `γ` is an
//! inverse lengthscale (one shared value, or one per input dimension for
//! ARD). All hyperparameters live in log space.

use std::f64::consts::PI;

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Jitter schedule, relative to the amplitude `ν`.
const JITTER_START: f64 = 1e-8;
const JITTER_MAX: f64 = 1e-2;
const JITTER_GROWTH: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelHyperparams {
    /// log ν
    pub log_amplitude: f64,
    /// log γ, length 1 (isotropic) or D (ARD)
    pub log_inv_lengthscale: Vec<f64>,
    /// log σ²
    pub log_noise: f64,
}

impl KernelHyperparams {
    pub fn isotropic(amplitude: f64, inv_lengthscale: f64, noise: f64) -> Result<Self> {
        Self::from_natural(amplitude, &[inv_lengthscale], noise)
    }

    pub fn ard(amplitude: f64, inv_lengthscales: &[f64], noise: f64) -> Result<Self> {
        Self::from_natural(amplitude, inv_lengthscales, noise)
    }

    fn from_natural(amplitude: f64, inv_lengthscales: &[f64], noise: f64) -> Result<Self> {
        let h = KernelHyperparams {
            log_amplitude: amplitude.ln(),
            log_inv_lengthscale: inv_lengthscales.iter().map(|g| g.ln()).collect(),
            log_noise: noise.ln(),
        };
        h.check_finite()?;
        Ok(h)
    }

    pub fn amplitude(&self) -> f64 {
        self.log_amplitude.exp()
    }

    pub fn noise(&self) -> f64 {
        self.log_noise.exp()
    }

    pub fn inv_lengthscales(&self) -> Vec<f64> {
        self.log_inv_lengthscale.iter().map(|v| v.exp()).collect()
    }

    pub fn is_ard(&self) -> bool {
        self.log_inv_lengthscale.len() > 1
    }

    /// Number of scalar hyperparameters, i.e. the gradient length.
    pub fn n_params(&self) -> usize {
        self.log_inv_lengthscale.len() + 2
    }

    /// Flattened as `[log ν, log γ..., log σ²]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        v.push(self.log_amplitude);
        v.extend_from_slice(&self.log_inv_lengthscale);
        v.push(self.log_noise);
        v
    }

    pub fn from_vec(params: &[f64]) -> Result<Self> {
        if params.len() < 3 {
            return Err(Error::InputShape(format!(
                "hyperparameter vector needs at least 3 entries, got {}",
                params.len()
            )));
        }
        let n = params.len();
        Ok(KernelHyperparams {
            log_amplitude: params[0],
            log_inv_lengthscale: params[1..n - 1].to_vec(),
            log_noise: params[n - 1],
        })
    }

    fn check_finite(&self) -> Result<()> {
        let ok = self.to_vec().iter().all(|v| v.is_finite())
            && self.amplitude() > 0.0
            && self.noise() > 0.0
            && self.inv_lengthscales().iter().all(|&g| g > 0.0)
            && !self.log_inv_lengthscale.is_empty();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "hyperparameters must be finite and positive: {self:?}"
            )))
        }
    }

    /// Checks the field invariants against an input dimension.
    pub fn validate(&self, dim: usize) -> Result<()> {
        self.check_finite()?;
        let len = self.log_inv_lengthscale.len();
        if len != 1 && len != dim {
            return Err(Error::InputShape(format!(
                "{len} inverse lengthscales for {dim}-dimensional inputs"
            )));
        }
        Ok(())
    }
}

fn weighted_sq_dist(a: &[f64], b: &[f64], gammas: &[f64]) -> f64 {
    if gammas.len() == 1 {
        let g = gammas[0];
        g * a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
    } else {
        a.iter()
            .zip(b)
            .zip(gammas)
            .map(|((x, y), g)| g * (x - y) * (x - y))
            .sum()
    }
}

pub fn kernel_value(x1: &[f64], x2: &[f64], hyper: &KernelHyperparams) -> Result<f64> {
    if x1.len() != x2.len() {
        return Err(Error::InputShape(format!(
            "points of dimension {} and {}",
            x1.len(),
            x2.len()
        )));
    }
    hyper.validate(x1.len())?;
    let gammas = hyper.inv_lengthscales();
    Ok(hyper.amplitude() * (-weighted_sq_dist(x1, x2, &gammas)).exp())
}

/// Rows of a matrix as contiguous vectors.
pub(crate) fn rows_of(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    x.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn kernel_matrix(
    x1: &DMatrix<f64>,
    x2: &DMatrix<f64>,
    hyper: &KernelHyperparams,
) -> Result<DMatrix<f64>> {
    if x1.ncols() != x2.ncols() {
        return Err(Error::InputShape(format!(
            "kernel inputs with {} and {} columns",
            x1.ncols(),
            x2.ncols()
        )));
    }
    hyper.validate(x1.ncols())?;
    let gammas = hyper.inv_lengthscales();
    let nu = hyper.amplitude();
    let r1 = rows_of(x1);
    let r2 = rows_of(x2);
    Ok(DMatrix::from_fn(r1.len(), r2.len(), |i, j| {
        nu * (-weighted_sq_dist(&r1[i], &r2[j], &gammas)).exp()
    }))
}

fn kernel_matrix_sym(rows: &[Vec<f64>], hyper: &KernelHyperparams) -> DMatrix<f64> {
    let n = rows.len();
    let gammas = hyper.inv_lengthscales();
    let nu = hyper.amplitude();
    let mut k = DMatrix::zeros(n, n);
    for j in 0..n {
        k[(j, j)] = nu;
        for i in j + 1..n {
            let v = nu * (-weighted_sq_dist(&rows[i], &rows[j], &gammas)).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cholesky of `K + σ²I + jitter·I` with the escalation schedule applied.
struct Factor {
    kf: DMatrix<f64>,
    chol: DMatrix<f64>,
    jitter: f64,
    escalations: usize,
}

fn factorize(rows: &[Vec<f64>], hyper: &KernelHyperparams) -> Result<Factor> {
    let kf = kernel_matrix_sym(rows, hyper);
    let nu = hyper.amplitude();
    let noise = hyper.noise();
    let mut rel = JITTER_START;
    let mut escalations = 0;
    loop {
        let jitter = rel * nu;
        let mut k = kf.clone();
        for i in 0..k.nrows() {
            k[(i, i)] += noise + jitter;
        }
        if let Some(chol) = linalg::cholesky_lower(&k) {
            if escalations > 0 {
                debug!("cholesky succeeded after {escalations} jitter escalations (jitter {jitter:e})");
            }
            return Ok(Factor {
                kf,
                chol,
                jitter,
                escalations,
            });
        }
        if rel * JITTER_GROWTH > JITTER_MAX * (1.0 + 1e-9) {
            return Err(Error::Numerical { jitter });
        }
        rel *= JITTER_GROWTH;
        escalations += 1;
        debug!("cholesky failed, escalating jitter to {:e}", rel * nu);
    }
}

fn check_data(x: &DMatrix<f64>, y: &DVector<f64>, hyper: &KernelHyperparams) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::InvalidArgument("GP needs at least one point".into()));
    }
    if x.nrows() != y.len() {
        return Err(Error::InputShape(format!(
            "{} input rows but {} targets",
            x.nrows(),
            y.len()
        )));
    }
    hyper.validate(x.ncols())
}

fn log_marginal_from(chol: &DMatrix<f64>, y: &DVector<f64>, alpha: &DVector<f64>) -> f64 {
    let n = y.len() as f64;
    let log_det_half: f64 = chol.diagonal().iter().map(|d| d.ln()).sum();
    -0.5 * y.dot(alpha) - log_det_half - 0.5 * n * (2.0 * PI).ln()
}

/// Log marginal likelihood `log N(y | 0, K + σ²I)` and its gradient with
/// respect to `[log ν, log γ..., log σ²]`.
pub fn log_marginal_likelihood(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    hyper: &KernelHyperparams,
) -> Result<(f64, Vec<f64>)> {
    check_data(x, y, hyper)?;
    let rows = rows_of(x);
    let f = factorize(&rows, hyper)?;
    let alpha = linalg::cholesky_solve(&f.chol, y);
    let value = log_marginal_from(&f.chol, y, &alpha);

    let n = rows.len();
    let linv = linalg::lower_triangular_inverse(&f.chol);
    let kinv = linv.transpose() * &linv;
    let gammas = hyper.inv_lengthscales();
    let dim = x.ncols();
    let n_len = gammas.len();

    let mut g_amp = 0.0;
    let mut g_len = vec![0.0; n_len];
    let mut trace_w = 0.0;
    for j in 0..n {
        for i in j..n {
            let w = alpha[i] * alpha[j] - kinv[(i, j)];
            let scale = if i == j { 1.0 } else { 2.0 };
            let kij = f.kf[(i, j)];
            g_amp += scale * w * kij;
            if i == j {
                trace_w += w;
                continue;
            }
            let wk = scale * w * kij;
            if n_len == 1 {
                let d2: f64 = (0..dim).map(|d| (rows[i][d] - rows[j][d]).powi(2)).sum();
                g_len[0] -= wk * gammas[0] * d2;
            } else {
                for d in 0..dim {
                    let diff = rows[i][d] - rows[j][d];
                    g_len[d] -= wk * gammas[d] * diff * diff;
                }
            }
        }
    }
    // jitter scales with ν, so it moves with log ν too
    g_amp += f.jitter * trace_w;

    let mut grad = Vec::with_capacity(n_len + 2);
    grad.push(0.5 * g_amp);
    grad.extend(g_len.iter().map(|g| 0.5 * g));
    grad.push(0.5 * hyper.noise() * trace_w);
    Ok((value, grad))
}

/// A GP conditioned on training data with its factorization cached.
#[derive(Clone, Debug)]
pub struct GPModel {
    inputs: DMatrix<f64>,
    targets: DVector<f64>,
    hyper: KernelHyperparams,
    chol: DMatrix<f64>,
    alpha: DVector<f64>,
    log_marginal: f64,
    jitter: f64,
    jitter_escalations: usize,
}

impl GPModel {
    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn targets(&self) -> &DVector<f64> {
        &self.targets
    }

    pub fn hyper(&self) -> &KernelHyperparams {
        &self.hyper
    }

    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn log_marginal(&self) -> f64 {
        self.log_marginal
    }

    /// Diagonal jitter that was added on top of the noise.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn jitter_escalations(&self) -> usize {
        self.jitter_escalations
    }

    pub fn n_points(&self) -> usize {
        self.targets.len()
    }
}

pub fn gp_fit(x: &DMatrix<f64>, y: &DVector<f64>, hyper: &KernelHyperparams) -> Result<GPModel> {
    check_data(x, y, hyper)?;
    let rows = rows_of(x);
    let f = factorize(&rows, hyper)?;
    let alpha = linalg::cholesky_solve(&f.chol, y);
    let log_marginal = log_marginal_from(&f.chol, y, &alpha);
    Ok(GPModel {
        inputs: x.clone(),
        targets: y.clone(),
        hyper: hyper.clone(),
        chol: f.chol,
        alpha,
        log_marginal,
        jitter: f.jitter,
        jitter_escalations: f.escalations,
    })
}

/// Predictive mean and variance of noisy outputs at `xstar`.
pub fn gp_predict(model: &GPModel, xstar: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    if xstar.ncols() != model.inputs.ncols() {
        return Err(Error::InputShape(format!(
            "test inputs have {} columns, model was trained on {}",
            xstar.ncols(),
            model.inputs.ncols()
        )));
    }
    let kstar = kernel_matrix(&model.inputs, xstar, &model.hyper)?;
    let mean = kstar.tr_mul(&model.alpha);
    let mut v = kstar;
    model.chol.solve_lower_triangular_mut(&mut v);
    let prior = model.hyper.amplitude() + model.hyper.noise();
    let var = DVector::from_iterator(
        xstar.nrows(),
        v.column_iter()
            .map(|c| (prior - c.norm_squared()).max(model.jitter)),
    );
    Ok((mean, var))
}
