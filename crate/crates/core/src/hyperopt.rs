//! Maximum-likelihood fitting of kernel hyperparameters.
//!
//! The objective is `likelihood_power · log p(y | X, θ)` (summed over blocks
//! for the shared case) with a flat prior in log space. It is maximized by
//! L-BFGS with a strong-Wolfe line search from the given initial point plus
//! `n_restarts` random starts.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{log_marginal_likelihood, KernelHyperparams};

/// Log-parameters outside this box are treated as infeasible by the line search.
const LOG_PARAM_LIMIT: f64 = 30.0;
const HISTORY: usize = 10;
const WOLFE_C1: f64 = 1e-4;
const WOLFE_C2: f64 = 0.9;
const MAX_LINE_SEARCH: usize = 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitBounds {
    pub log_amplitude: (f64, f64),
    pub log_inv_lengthscale: (f64, f64),
    pub log_noise: (f64, f64),
}

impl Default for InitBounds {
    fn default() -> Self {
        InitBounds {
            log_amplitude: (0.01f64.ln(), 100f64.ln()),
            log_inv_lengthscale: (0.1f64.ln(), 1000f64.ln()),
            log_noise: (1e-4f64.ln(), 10f64.ln()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub n_restarts: usize,
    pub init_log_bounds: InitBounds,
    /// Exponent on the likelihood; `N/B` under the stochastic approximation.
    pub likelihood_power: f64,
    /// Seed for the random restart schedule.
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            max_iterations: 200,
            gradient_tolerance: 1e-6,
            n_restarts: 2,
            init_log_bounds: InitBounds::default(),
            likelihood_power: 1.0,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.likelihood_power >= 1.0 && self.likelihood_power.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "likelihood_power must be >= 1, got {}",
                self.likelihood_power
            )));
        }
        if self.gradient_tolerance.is_nan() || self.gradient_tolerance <= 0.0 {
            return Err(Error::InvalidArgument(
                "gradient_tolerance must be positive".into(),
            ));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument(
                "max_iterations must be positive".into(),
            ));
        }
        let b = &self.init_log_bounds;
        for (name, (lo, hi)) in [
            ("amplitude", b.log_amplitude),
            ("inv_lengthscale", b.log_inv_lengthscale),
            ("noise", b.log_noise),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::InvalidArgument(format!(
                    "init bounds for {name} must be finite with lower < upper, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    /// The initial point followed by `n_restarts` log-uniform draws.
    pub fn start_points(&self, init: &KernelHyperparams) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let b = &self.init_log_bounds;
        let mut starts = vec![init.to_vec()];
        for _ in 0..self.n_restarts {
            let mut p = Vec::with_capacity(init.n_params());
            p.push(rng.random_range(b.log_amplitude.0..b.log_amplitude.1));
            for _ in 0..init.log_inv_lengthscale.len() {
                p.push(rng.random_range(b.log_inv_lengthscale.0..b.log_inv_lengthscale.1));
            }
            p.push(rng.random_range(b.log_noise.0..b.log_noise.1));
            starts.push(p);
        }
        starts
    }
}

/// Outcome of one local ascent.
#[derive(Clone, Debug)]
pub struct LocalOptimum {
    pub params: Vec<f64>,
    pub value: f64,
    pub initial_value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

struct Point {
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Minimizes `phi` (value and gradient). Evaluations that error, are not
/// finite, or leave the feasible box are treated as `+∞`.
struct Minimizer<'a, F> {
    phi: &'a F,
    evaluations: usize,
}

impl<'a, F> Minimizer<'a, F>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    fn eval(&mut self, x: &[f64]) -> Option<Point> {
        self.evaluations += 1;
        if x.iter().any(|v| !v.is_finite() || v.abs() > LOG_PARAM_LIMIT) {
            return None;
        }
        match (self.phi)(x) {
            Ok((f, g)) if f.is_finite() && g.iter().all(|v| v.is_finite()) => Some(Point {
                x: x.to_vec(),
                f,
                g,
            }),
            _ => None,
        }
    }

    fn step_to(&mut self, base: &Point, d: &[f64], alpha: f64) -> Option<Point> {
        let x: Vec<f64> = base.x.iter().zip(d).map(|(x, d)| x + alpha * d).collect();
        self.eval(&x)
    }

    /// Strong-Wolfe line search; returns the accepted point.
    fn line_search(&mut self, base: &Point, d: &[f64], alpha_init: f64) -> Option<Point> {
        let dphi0 = dot(&base.g, d);
        let sufficient = |p: &Point, a: f64| p.f <= base.f + WOLFE_C1 * a * dphi0;
        let curvature = |p: &Point| dot(&p.g, d).abs() <= -WOLFE_C2 * dphi0;

        let mut lo_alpha = 0.0;
        let mut lo: Option<Point> = None;
        let mut alpha = alpha_init;
        let mut hi_alpha;
        let mut iters = 0;
        loop {
            iters += 1;
            if iters > MAX_LINE_SEARCH {
                return lo;
            }
            match self.step_to(base, d, alpha) {
                None => {
                    hi_alpha = alpha;
                    break;
                }
                Some(p) => {
                    let prev_f = lo.as_ref().map_or(base.f, |q| q.f);
                    if !sufficient(&p, alpha) || (lo.is_some() && p.f >= prev_f) {
                        hi_alpha = alpha;
                        break;
                    }
                    if curvature(&p) {
                        return Some(p);
                    }
                    if dot(&p.g, d) >= 0.0 {
                        // minimum bracketed between alpha and the previous point
                        hi_alpha = lo_alpha;
                        lo_alpha = alpha;
                        lo = Some(p);
                        break;
                    }
                    lo_alpha = alpha;
                    lo = Some(p);
                    alpha *= 2.0;
                }
            }
        }

        // zoom
        for _ in 0..MAX_LINE_SEARCH {
            let width = hi_alpha - lo_alpha;
            if width.abs() < 1e-14 * lo_alpha.abs().max(1.0) {
                break;
            }
            let trial = lo_alpha + 0.5 * width;
            match self.step_to(base, d, trial) {
                None => hi_alpha = trial,
                Some(p) => {
                    let lo_f = lo.as_ref().map_or(base.f, |q| q.f);
                    if !sufficient(&p, trial) || p.f >= lo_f {
                        hi_alpha = trial;
                    } else {
                        if curvature(&p) {
                            return Some(p);
                        }
                        if dot(&p.g, d) * (hi_alpha - lo_alpha) >= 0.0 {
                            hi_alpha = lo_alpha;
                        }
                        lo_alpha = trial;
                        lo = Some(p);
                    }
                }
            }
        }
        lo
    }
}

/// L-BFGS minimization of `phi` from `x0`.
fn lbfgs_minimize<F>(
    phi: &F,
    x0: &[f64],
    max_iterations: usize,
    gradient_tolerance: f64,
) -> std::result::Result<LocalOptimum, String>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut m = Minimizer { phi, evaluations: 0 };
    let mut cur = match phi(x0) {
        Ok((f, g)) if f.is_finite() && g.iter().all(|v| v.is_finite()) => Point {
            x: x0.to_vec(),
            f,
            g,
        },
        Ok((f, _)) => return Err(format!("non-finite objective {f} at start")),
        Err(e) => return Err(e.to_string()),
    };
    m.evaluations = 1;
    let initial_value = cur.f;
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < max_iterations {
        if inf_norm(&cur.g) <= gradient_tolerance * cur.f.abs().max(1.0) {
            converged = true;
            break;
        }
        iterations += 1;

        // two-loop recursion
        let mut q = cur.g.clone();
        let k = s_hist.len();
        let mut a = vec![0.0; k];
        for i in (0..k).rev() {
            let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
            a[i] = rho * dot(&s_hist[i], &q);
            for (qj, yj) in q.iter_mut().zip(&y_hist[i]) {
                *qj -= a[i] * yj;
            }
        }
        let (h0, alpha0) = if k > 0 {
            let sy = dot(&s_hist[k - 1], &y_hist[k - 1]);
            let yy = dot(&y_hist[k - 1], &y_hist[k - 1]);
            (sy / yy, 1.0)
        } else {
            (1.0, 1.0 / dot(&cur.g, &cur.g).sqrt())
        };
        for v in q.iter_mut() {
            *v *= h0;
        }
        for i in 0..k {
            let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
            let b = rho * dot(&y_hist[i], &q);
            for (qj, sj) in q.iter_mut().zip(&s_hist[i]) {
                *qj += sj * (a[i] - b);
            }
        }
        let mut d: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut alpha_init = alpha0;
        if dot(&d, &cur.g) >= 0.0 {
            s_hist.clear();
            y_hist.clear();
            d = cur.g.iter().map(|v| -v).collect();
            alpha_init = 1.0 / dot(&cur.g, &cur.g).sqrt();
        }

        let Some(next) = m.line_search(&cur, &d, alpha_init) else {
            break;
        };
        let s: Vec<f64> = next.x.iter().zip(&cur.x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = next.g.iter().zip(&cur.g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        let f_change = cur.f - next.f;
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if s_hist.len() == HISTORY {
                s_hist.remove(0);
                y_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(y);
        }
        cur = next;
        if f_change <= 1e-15 * cur.f.abs().max(1.0) {
            converged = inf_norm(&cur.g) <= gradient_tolerance * cur.f.abs().max(1.0);
            break;
        }
    }

    Ok(LocalOptimum {
        params: cur.x,
        value: cur.f,
        initial_value,
        iterations,
        evaluations: m.evaluations,
        converged,
    })
}

/// Maximizes `objective` from each start in turn and keeps the best.
/// Ties go to the earliest start.
pub fn maximize_with_restarts<F>(
    objective: F,
    starts: &[Vec<f64>],
    config: &OptimConfig,
) -> Result<LocalOptimum>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let phi = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (v, g) = objective(x)?;
        Ok((-v, g.into_iter().map(|gi| -gi).collect()))
    };
    let mut best: Option<LocalOptimum> = None;
    let mut failures = Vec::new();
    for (i, start) in starts.iter().enumerate() {
        match lbfgs_minimize(&phi, start, config.max_iterations, config.gradient_tolerance) {
            Ok(mut opt) => {
                opt.value = -opt.value;
                opt.initial_value = -opt.initial_value;
                if best.as_ref().is_none_or(|b| opt.value > b.value) {
                    best = Some(opt);
                }
            }
            Err(msg) => failures.push(format!("start {i}: {msg}")),
        }
    }
    best.ok_or(Error::OptimizationFailed(failures))
}

fn check_init_dim(init: &KernelHyperparams, dim: usize) -> Result<()> {
    init.validate(dim)
}

/// Fits hyperparameters of a single GP. With fewer than two points the
/// initial hyperparameters are returned unchanged.
pub fn optimize_single(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    init: &KernelHyperparams,
    config: &OptimConfig,
) -> Result<(KernelHyperparams, f64)> {
    config.validate()?;
    check_init_dim(init, x.ncols())?;
    if x.nrows() != y.len() {
        return Err(Error::InputShape(format!(
            "{} input rows but {} targets",
            x.nrows(),
            y.len()
        )));
    }
    let power = config.likelihood_power;
    match x.nrows() {
        0 => return Ok((init.clone(), 0.0)),
        1 => {
            let (v, _) = log_marginal_likelihood(x, y, init)?;
            return Ok((init.clone(), power * v));
        }
        _ => {}
    }
    let objective = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
        let h = KernelHyperparams::from_vec(p)?;
        let (v, g) = log_marginal_likelihood(x, y, &h)?;
        Ok((power * v, g.into_iter().map(|gi| power * gi).collect()))
    };
    let best = maximize_with_restarts(objective, &config.start_points(init), config)?;
    Ok((KernelHyperparams::from_vec(&best.params)?, best.value))
}

/// Fits one hyperparameter set shared by several independent GP blocks.
/// Empty blocks contribute nothing to the objective.
pub fn optimize_shared(
    blocks: &[(DMatrix<f64>, DVector<f64>)],
    init: &KernelHyperparams,
    config: &OptimConfig,
) -> Result<(KernelHyperparams, f64)> {
    config.validate()?;
    let nonempty: Vec<&(DMatrix<f64>, DVector<f64>)> =
        blocks.iter().filter(|(x, _)| x.nrows() > 0).collect();
    if nonempty.is_empty() {
        return Err(Error::InvalidArgument(
            "shared optimization needs at least one non-empty block".into(),
        ));
    }
    let dim = nonempty[0].0.ncols();
    for (x, y) in &nonempty {
        if x.ncols() != dim || x.nrows() != y.len() {
            return Err(Error::InputShape("inconsistent block shapes".into()));
        }
    }
    check_init_dim(init, dim)?;
    let power = config.likelihood_power;
    let objective = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
        let h = KernelHyperparams::from_vec(p)?;
        let mut total = 0.0;
        let mut grad = vec![0.0; p.len()];
        for (x, y) in &nonempty {
            let (v, g) = log_marginal_likelihood(x, y, &h)?;
            total += v;
            for (acc, gi) in grad.iter_mut().zip(g) {
                *acc += gi;
            }
        }
        Ok((power * total, grad.into_iter().map(|g| power * g).collect()))
    };
    let n_total: usize = nonempty.iter().map(|(x, _)| x.nrows()).sum();
    if n_total < 2 {
        let (v, _) = objective(&init.to_vec())?;
        return Ok((init.clone(), v));
    }
    let best = maximize_with_restarts(objective, &config.start_points(init), config)?;
    Ok((KernelHyperparams::from_vec(&best.params)?, best.value))
}
