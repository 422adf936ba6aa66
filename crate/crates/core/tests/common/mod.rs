#![allow(dead_code)]

use std::collections::HashMap;
use std::f64::consts::PI;

use ismoe::gp::{log_marginal_likelihood, KernelHyperparams};
use ismoe::partition::NiwPrior;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central finite-difference gradient of the log marginal likelihood
/// with respect to the log-domain parameter vector.
pub fn fd_gradient(x: &DMatrix<f64>, y: &DVector<f64>, h: &KernelHyperparams, step: f64) -> Vec<f64> {
    let p = h.to_vec();
    (0..p.len())
        .map(|i| {
            let mut up = p.clone();
            let mut dn = p.clone();
            up[i] += step;
            dn[i] -= step;
            let fu = log_marginal_likelihood(x, y, &KernelHyperparams::from_vec(&up).unwrap())
                .unwrap()
                .0;
            let fd = log_marginal_likelihood(x, y, &KernelHyperparams::from_vec(&dn).unwrap())
                .unwrap()
                .0;
            (fu - fd) / (2.0 * step)
        })
        .collect()
}

/// `‖a - b‖ / max(‖a‖, ‖b‖)`.
pub fn vec_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|u| u * u).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|u| u * u).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Random GP regression instance with `n` points in `d` dimensions.
pub fn random_instance(seed: u64, n: usize, d: usize, ard: bool) -> (DMatrix<f64>, DVector<f64>, KernelHyperparams) {
    let mut r = rng(seed);
    let x = DMatrix::from_fn(n, d, |_, _| r.random_range(-2.0..2.0));
    let y = DVector::from_fn(n, |_, _| r.random_range(-2.0..2.0));
    let amp = 10f64.powf(r.random_range(-1.0..1.0));
    let noise = 10f64.powf(r.random_range(-2.0..0.0));
    let h = if ard {
        let g: Vec<f64> = (0..d).map(|_| 10f64.powf(r.random_range(-1.0..1.0))).collect();
        KernelHyperparams::ard(amp, &g, noise).unwrap()
    } else {
        KernelHyperparams::isotropic(amp, 10f64.powf(r.random_range(-1.0..1.0)), noise).unwrap()
    };
    (x, y, h)
}

fn log_multigamma(a: f64, d: usize) -> f64 {
    let df = d as f64;
    df * (df - 1.0) / 4.0 * PI.ln()
        + (0..d).map(|j| libm::lgamma(a - j as f64 / 2.0)).sum::<f64>()
}

fn log_det_spd(m: &DMatrix<f64>) -> f64 {
    let c = m.clone().cholesky().expect("spd");
    2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Closed-form log marginal likelihood of a set of points under the
/// Normal-Inverse-Wishart Gaussian model.
pub fn niw_log_marginal(points: &[Vec<f64>], prior: &NiwPrior) -> f64 {
    let n = points.len();
    if n == 0 {
        return 0.0;
    }
    let d = prior.mu0.len();
    let nf = n as f64;
    let mut mean = DVector::zeros(d);
    for p in points {
        mean += DVector::from_column_slice(p);
    }
    mean /= nf;
    let mut scatter = DMatrix::zeros(d, d);
    for p in points {
        let r = DVector::from_column_slice(p) - &mean;
        scatter += &r * r.transpose();
    }
    let lam_n = prior.lambda + nf;
    let nu_n = prior.nu + nf;
    let dm = &mean - &prior.mu0;
    let psi_n = &prior.psi + scatter + (prior.lambda * nf / lam_n) * &dm * dm.transpose();
    let df = d as f64;
    -nf * df / 2.0 * PI.ln() + log_multigamma(nu_n / 2.0, d) - log_multigamma(prior.nu / 2.0, d)
        + prior.nu / 2.0 * log_det_spd(&prior.psi)
        - nu_n / 2.0 * log_det_spd(&psi_n)
        + df / 2.0 * (prior.lambda / lam_n).ln()
}

/// Relabels clusters in order of first appearance so label-swapped
/// assignments compare equal.
pub fn canonical(assignments: &[usize]) -> Vec<usize> {
    let mut map = HashMap::new();
    assignments
        .iter()
        .map(|&a| {
            let next = map.len();
            *map.entry(a).or_insert(next)
        })
        .collect()
}

/// Exact collapsed posterior P(Z | X) over unlabeled partitions, by
/// enumerating all K^N labeled assignments.
pub fn enumerate_partition_posterior(
    x: &DMatrix<f64>,
    k: usize,
    alpha: f64,
    prior: &NiwPrior,
) -> HashMap<Vec<usize>, f64> {
    let n = x.nrows();
    let rows: Vec<Vec<f64>> = x.row_iter().map(|r| r.iter().copied().collect()).collect();
    let total = k.pow(n as u32);
    let mut logp = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for code in 0..total {
        let mut c = code;
        let z: Vec<usize> = (0..n)
            .map(|_| {
                let v = c % k;
                c /= k;
                v
            })
            .collect();
        let mut lp = 0.0;
        for cl in 0..k {
            let pts: Vec<Vec<f64>> = (0..n).filter(|&i| z[i] == cl).map(|i| rows[i].clone()).collect();
            lp += libm::lgamma(pts.len() as f64 + alpha) - libm::lgamma(alpha);
            lp += niw_log_marginal(&pts, prior);
        }
        logp.push(lp);
        labels.push(z);
    }
    let mx = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logp.iter().map(|l| (l - mx).exp()).sum();
    let mut out = HashMap::new();
    for (lp, lab) in logp.iter().zip(labels) {
        *out.entry(canonical(&lab)).or_insert(0.0) += (lp - mx).exp() / z;
    }
    out
}

/// Total-variation distance between an empirical histogram and a
/// distribution over the same keys.
pub fn total_variation(empirical: &HashMap<Vec<usize>, usize>, exact: &HashMap<Vec<usize>, f64>) -> f64 {
    let n: usize = empirical.values().sum();
    let mut tv = 0.0;
    for (key, p) in exact {
        let q = *empirical.get(key).unwrap_or(&0) as f64 / n as f64;
        tv += (p - q).abs();
    }
    for (key, c) in empirical {
        if !exact.contains_key(key) {
            tv += *c as f64 / n as f64;
        }
    }
    tv / 2.0
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn std_err(v: &[f64]) -> f64 {
    let m = mean(v);
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0).max(1.0);
    (var / v.len() as f64).sqrt()
}
