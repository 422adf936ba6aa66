//! Finite Dirichlet mixture of Gaussians over the inputs, with the component
//! means and covariances integrated out under a Normal-Inverse-Wishart prior.
//!
//! Partitions are drawn by one sequential collapsed assignment pass over a
//! random permutation of the points, followed by `n_sweeps` collapsed Gibbs
//! sweeps. The mixing weights are never materialized.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, logsumexp};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NiwPrior {
    pub mu0: DVector<f64>,
    pub lambda: f64,
    pub psi: DMatrix<f64>,
    pub nu: f64,
}

impl NiwPrior {
    pub fn new(mu0: DVector<f64>, lambda: f64, psi: DMatrix<f64>, nu: f64) -> Result<Self> {
        let p = NiwPrior {
            mu0,
            lambda,
            psi,
            nu,
        };
        p.validate()?;
        Ok(p)
    }

    /// Weakly informative prior scaled to the data: empirical mean and
    /// (diagonally loaded) covariance, `λ = 1`, `ν = D + 2`.
    pub fn from_data(x: &DMatrix<f64>) -> Result<Self> {
        let (n, d) = x.shape();
        if n == 0 || d == 0 {
            return Err(Error::InvalidArgument(
                "cannot build a prior from empty data".into(),
            ));
        }
        let mean = DVector::from_iterator(d, x.column_iter().map(|c| c.mean()));
        let mut cov = DMatrix::zeros(d, d);
        for row in x.row_iter() {
            let c = row.transpose() - &mean;
            cov += &c * c.transpose();
        }
        cov /= n as f64;
        let load = 1e-6 * cov.trace() / d as f64;
        let load = if load > 0.0 { load } else { 1e-6 };
        for i in 0..d {
            cov[(i, i)] += load;
        }
        NiwPrior::new(mean, 1.0, cov, d as f64 + 2.0)
    }

    pub fn dim(&self) -> usize {
        self.mu0.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 || self.psi.shape() != (d, d) {
            return Err(Error::InputShape(format!(
                "NIW scale matrix {:?} for mean of length {d}",
                self.psi.shape()
            )));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument("NIW lambda must be positive".into()));
        }
        if !(self.nu > d as f64 - 1.0 && self.nu.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "NIW degrees of freedom {} must exceed D - 1 = {}",
                self.nu,
                d as f64 - 1.0
            )));
        }
        if (&self.psi - self.psi.transpose()).amax() > 1e-12 * self.psi.amax().max(1.0) {
            return Err(Error::InvalidArgument("NIW scale matrix not symmetric".into()));
        }
        if linalg::cholesky_lower(&self.psi).is_none() {
            return Err(Error::InvalidArgument(
                "NIW scale matrix not positive definite".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixturePrior {
    /// Symmetric Dirichlet concentration.
    pub alpha: f64,
    /// Number of components.
    pub k: usize,
    pub niw: NiwPrior,
}

impl MixturePrior {
    pub const DEFAULT_ALPHA: f64 = 2.0;

    pub fn new(alpha: f64, k: usize, niw: NiwPrior) -> Result<Self> {
        let p = MixturePrior { alpha, k, niw };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument("Dirichlet alpha must be positive".into()));
        }
        if self.k == 0 {
            return Err(Error::InvalidArgument("need at least one component".into()));
        }
        self.niw.validate()
    }
}

/// Cluster index per point, with cluster sizes. Empty clusters are allowed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    assignments: Vec<usize>,
    counts: Vec<usize>,
}

impl Partition {
    pub fn new(assignments: Vec<usize>, k: usize) -> Result<Self> {
        let mut counts = vec![0; k];
        for &z in &assignments {
            if z >= k {
                return Err(Error::InvalidArgument(format!(
                    "assignment {z} out of range for {k} clusters"
                )));
            }
            counts[z] += 1;
        }
        Ok(Partition {
            assignments,
            counts,
        })
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn n_clusters(&self) -> usize {
        self.counts.len()
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    /// Point indices belonging to cluster `k`, in ascending order.
    pub fn members(&self, k: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter_map(|(i, &z)| (z == k).then_some(i))
            .collect()
    }
}

/// Sufficient statistics of one cluster: size, sum, and centered scatter.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterStats {
    count: usize,
    sum: DVector<f64>,
    scatter: DMatrix<f64>,
}

impl ClusterStats {
    pub fn empty(dim: usize) -> Self {
        ClusterStats {
            count: 0,
            sum: DVector::zeros(dim),
            scatter: DMatrix::zeros(dim, dim),
        }
    }

    pub fn from_points<'a>(dim: usize, points: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let mut s = ClusterStats::empty(dim);
        for p in points {
            s.add(p);
        }
        s
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn sum(&self) -> &DVector<f64> {
        &self.sum
    }

    pub fn scatter(&self) -> &DMatrix<f64> {
        &self.scatter
    }

    pub fn mean(&self) -> Option<DVector<f64>> {
        (self.count > 0).then(|| &self.sum / self.count as f64)
    }

    pub fn add(&mut self, x: &[f64]) {
        let x = DVector::from_column_slice(x);
        if self.count > 0 {
            let n = self.count as f64;
            let delta = &x - &self.sum / n;
            self.scatter += &delta * delta.transpose() * (n / (n + 1.0));
        }
        self.sum += &x;
        self.count += 1;
    }

    pub fn remove(&mut self, x: &[f64]) {
        assert!(self.count > 0, "removing from an empty cluster");
        if self.count == 1 {
            *self = ClusterStats::empty(self.sum.len());
            return;
        }
        let x = DVector::from_column_slice(x);
        let remaining = (self.count - 1) as f64;
        self.sum -= &x;
        let delta = &x - &self.sum / remaining;
        self.scatter -= &delta * delta.transpose() * (remaining / self.count as f64);
        self.count -= 1;
    }
}

/// Multivariate Student-t posterior predictive of one cluster.
#[derive(Clone, Debug)]
pub struct StudentT {
    loc: DVector<f64>,
    chol: DMatrix<f64>,
    dof: f64,
    log_norm: f64,
}

impl StudentT {
    pub fn from_stats(stats: &ClusterStats, prior: &NiwPrior) -> Result<Self> {
        let d = prior.dim();
        if stats.sum.len() != d {
            return Err(Error::InputShape(format!(
                "cluster statistics of dimension {} for a {d}-dimensional prior",
                stats.sum.len()
            )));
        }
        let n = stats.count as f64;
        let lambda_n = prior.lambda + n;
        let nu_n = prior.nu + n;
        let loc = (&prior.mu0 * prior.lambda + &stats.sum) / lambda_n;
        let mut psi_n = &prior.psi + &stats.scatter;
        if stats.count > 0 {
            let diff = &stats.sum / n - &prior.mu0;
            psi_n += &diff * diff.transpose() * (prior.lambda * n / lambda_n);
        }
        let dof = nu_n - d as f64 + 1.0;
        let scale = psi_n * ((lambda_n + 1.0) / (lambda_n * dof));
        let chol = linalg::cholesky_lower(&scale).ok_or_else(|| {
            Error::NumericalOther("NIW posterior scale matrix is not positive definite".into())
        })?;
        let df = d as f64;
        let half_log_det: f64 = chol.diagonal().iter().map(|v| v.ln()).sum();
        let log_norm = libm::lgamma(0.5 * (dof + df))
            - libm::lgamma(0.5 * dof)
            - 0.5 * df * (dof * PI).ln()
            - half_log_det;
        Ok(StudentT {
            loc,
            chol,
            dof,
            log_norm,
        })
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let diff = DVector::from_column_slice(x) - &self.loc;
        let z = linalg::forward_solve(&self.chol, &diff);
        let d = x.len() as f64;
        self.log_norm - 0.5 * (self.dof + d) * (z.norm_squared() / self.dof).ln_1p()
    }

    pub fn dof(&self) -> f64 {
        self.dof
    }
}

/// Log posterior predictive density of `x` for a cluster with statistics
/// `stats` (the prior predictive when the cluster is empty).
pub fn niw_log_predictive(x: &[f64], stats: &ClusterStats, prior: &NiwPrior) -> Result<f64> {
    if x.len() != prior.dim() {
        return Err(Error::InputShape(format!(
            "point of dimension {} for a {}-dimensional prior",
            x.len(),
            prior.dim()
        )));
    }
    Ok(StudentT::from_stats(stats, prior)?.log_density(x))
}

/// Per-cluster statistics with lazily refreshed predictive densities.
struct ClusterState<'a> {
    prior: &'a MixturePrior,
    stats: Vec<ClusterStats>,
    predictive: Vec<Option<StudentT>>,
}

impl<'a> ClusterState<'a> {
    fn new(prior: &'a MixturePrior) -> Self {
        let d = prior.niw.dim();
        ClusterState {
            prior,
            stats: vec![ClusterStats::empty(d); prior.k],
            predictive: vec![None; prior.k],
        }
    }

    fn add(&mut self, k: usize, x: &[f64]) {
        self.stats[k].add(x);
        self.predictive[k] = None;
    }

    fn remove(&mut self, k: usize, x: &[f64]) {
        self.stats[k].remove(x);
        self.predictive[k] = None;
    }

    fn log_weights(&mut self, x: &[f64], out: &mut [f64]) -> Result<()> {
        for (k, o) in out.iter_mut().enumerate().take(self.prior.k) {
            if self.predictive[k].is_none() {
                self.predictive[k] = Some(StudentT::from_stats(&self.stats[k], &self.prior.niw)?);
            }
            let t = self.predictive[k].as_ref().expect("just filled");
            *o = (self.stats[k].count as f64 + self.prior.alpha).ln() + t.log_density(x);
        }
        Ok(())
    }
}

fn sample_log_categorical(log_w: &[f64], rng: &mut impl Rng) -> usize {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (k, wk) in w.iter().enumerate() {
        if u < *wk {
            return k;
        }
        u -= wk;
    }
    w.iter().rposition(|&v| v > 0.0).unwrap_or(0)
}

fn check_inputs(x: &DMatrix<f64>, prior: &MixturePrior) -> Result<()> {
    prior.validate()?;
    if x.ncols() != prior.niw.dim() {
        return Err(Error::InputShape(format!(
            "{}-dimensional inputs for a {}-dimensional prior",
            x.ncols(),
            prior.niw.dim()
        )));
    }
    Ok(())
}

/// Draws an approximate sample from `P(Z | X)`.
pub fn sample_partition(
    x: &DMatrix<f64>,
    prior: &MixturePrior,
    n_sweeps: usize,
    seed: u64,
) -> Result<Partition> {
    check_inputs(x, prior)?;
    let n = x.nrows();
    if n == 0 {
        return Err(Error::InvalidArgument("cannot partition zero points".into()));
    }
    if prior.k == 1 {
        return Partition::new(vec![0; n], 1);
    }
    let rows = crate::gp::rows_of(x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let mut state = ClusterState::new(prior);
    let mut z = vec![0usize; n];
    let mut log_w = vec![0.0; prior.k];
    for &i in &order {
        state.log_weights(&rows[i], &mut log_w)?;
        let k = sample_log_categorical(&log_w, &mut rng);
        z[i] = k;
        state.add(k, &rows[i]);
    }
    for _ in 0..n_sweeps {
        for &i in &order {
            state.remove(z[i], &rows[i]);
            state.log_weights(&rows[i], &mut log_w)?;
            let k = sample_log_categorical(&log_w, &mut rng);
            z[i] = k;
            state.add(k, &rows[i]);
        }
    }
    Partition::new(z, prior.k)
}

/// Independent uniform cluster labels; the structure-free baseline.
pub fn sample_random_partition(n: usize, k: usize, seed: u64) -> Result<Partition> {
    if k == 0 {
        return Err(Error::InvalidArgument("need at least one component".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Partition::new((0..n).map(|_| rng.random_range(0..k)).collect(), k)
}

/// Membership model for new points given a partition of training inputs.
#[derive(Clone, Debug)]
pub struct ClusterPredictor {
    log_prior: Vec<f64>,
    predictive: Vec<StudentT>,
    counts: Vec<usize>,
}

impl ClusterPredictor {
    pub fn new(partition: &Partition, x: &DMatrix<f64>, prior: &MixturePrior) -> Result<Self> {
        check_inputs(x, prior)?;
        if partition.len() != x.nrows() || partition.n_clusters() != prior.k {
            return Err(Error::InputShape(format!(
                "partition of {} points into {} clusters vs {} inputs and K = {}",
                partition.len(),
                partition.n_clusters(),
                x.nrows(),
                prior.k
            )));
        }
        let d = x.ncols();
        let rows = crate::gp::rows_of(x);
        let mut stats = vec![ClusterStats::empty(d); prior.k];
        for (row, &z) in rows.iter().zip(partition.assignments()) {
            stats[z].add(row);
        }
        let predictive = stats
            .iter()
            .map(|s| StudentT::from_stats(s, &prior.niw))
            .collect::<Result<Vec<_>>>()?;
        Ok(ClusterPredictor {
            log_prior: partition
                .counts()
                .iter()
                .map(|&c| (c as f64 + prior.alpha).ln())
                .collect(),
            predictive,
            counts: partition.counts().to_vec(),
        })
    }

    /// Normalized log membership probabilities over all K clusters.
    pub fn log_probs(&self, xstar: &[f64]) -> Vec<f64> {
        let raw: Vec<f64> = self
            .log_prior
            .iter()
            .zip(&self.predictive)
            .map(|(lp, t)| lp + t.log_density(xstar))
            .collect();
        let z = logsumexp(&raw);
        raw.into_iter().map(|v| v - z).collect()
    }

    /// Membership probabilities restricted to non-empty clusters and
    /// renormalized; empty clusters get exactly zero.
    pub fn nonempty_probs(&self, xstar: &[f64]) -> Vec<f64> {
        let raw: Vec<f64> = self
            .log_prior
            .iter()
            .zip(&self.predictive)
            .zip(&self.counts)
            .map(|((lp, t), &c)| {
                if c > 0 {
                    lp + t.log_density(xstar)
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let z = logsumexp(&raw);
        raw.into_iter().map(|v| (v - z).exp()).collect()
    }
}

/// `log P(z* = k | x*, X, Z)` for every cluster, normalized.
pub fn cluster_assign_log_probs(
    xstar: &[f64],
    partition: &Partition,
    x: &DMatrix<f64>,
    prior: &MixturePrior,
) -> Result<Vec<f64>> {
    if xstar.len() != x.ncols() {
        return Err(Error::InputShape(format!(
            "test point of dimension {} for {}-dimensional inputs",
            xstar.len(),
            x.ncols()
        )));
    }
    Ok(ClusterPredictor::new(partition, x, prior)?.log_probs(xstar))
}
