//! Test-set evaluation.

use std::f64::consts::PI;

use nalgebra::DVector;
use serde::Serialize;

use crate::engine::PredictiveResult;
use crate::error::{Error, Result};
use crate::linalg::logsumexp;

/// `log N(y | mean, variance)`.
pub fn gaussian_log_density(y: f64, mean: f64, variance: f64) -> f64 {
    let r = y - mean;
    -0.5 * ((2.0 * PI * variance).ln() + r * r / variance)
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::InputShape(format!(
            "prediction has {a} points, targets have {b}"
        )));
    }
    Ok(())
}

/// Per-point log densities under independent Gaussians.
pub fn per_point_log_density(
    mean: &DVector<f64>,
    variance: &DVector<f64>,
    y_true: &DVector<f64>,
) -> Result<Vec<f64>> {
    check_len(mean.len(), y_true.len())?;
    check_len(variance.len(), y_true.len())?;
    if let Some(v) = variance.iter().find(|v| v.is_nan() || **v <= 0.0 || !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "predictive variance must be positive and finite, got {v}"
        )));
    }
    Ok(mean
        .iter()
        .zip(variance.iter())
        .zip(y_true.iter())
        .map(|((m, v), y)| gaussian_log_density(*y, *m, *v))
        .collect())
}

/// Sum of per-point log densities under the moment-matched Gaussian.
pub fn test_log_likelihood(pred: &PredictiveResult, y_true: &DVector<f64>) -> Result<f64> {
    Ok(per_point_log_density(&pred.mean, &pred.variance, y_true)?
        .iter()
        .sum())
}

/// Mean squared error.
pub fn mse(pred_mean: &DVector<f64>, y_true: &DVector<f64>) -> Result<f64> {
    check_len(pred_mean.len(), y_true.len())?;
    if y_true.is_empty() {
        return Err(Error::InvalidArgument("mse of an empty test set".into()));
    }
    Ok((pred_mean - y_true).norm_squared() / y_true.len() as f64)
}

/// Test log likelihood under the full weighted mixture of per-sample
/// Gaussians instead of its moment-matched approximation.
pub fn mixture_log_likelihood(pred: &PredictiveResult, y_true: &DVector<f64>) -> Result<f64> {
    let (means, vars) = match (&pred.per_sample_means, &pred.per_sample_variances) {
        (Some(m), Some(v)) => (m, v),
        _ => {
            return Err(Error::InvalidArgument(
                "per-sample predictions were not retained".into(),
            ))
        }
    };
    check_len(means.ncols(), y_true.len())?;
    let mut total = 0.0;
    for (i, y) in y_true.iter().enumerate() {
        let terms: Vec<f64> = pred
            .normalized_weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w > 0.0)
            .map(|(j, w)| w.ln() + gaussian_log_density(*y, means[(j, i)], vars[(j, i)]))
            .collect();
        total += logsumexp(&terms);
    }
    Ok(total)
}

/// Report written for every fitted run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub test_log_likelihood: f64,
    pub mse: f64,
    pub per_point_log_density: Vec<f64>,
    pub ess: f64,
    pub runtime_seconds: f64,
}

impl EvalReport {
    pub fn evaluate(pred: &PredictiveResult, y_true: &DVector<f64>, runtime_seconds: f64) -> Result<Self> {
        let per_point = per_point_log_density(&pred.mean, &pred.variance, y_true)?;
        Ok(EvalReport {
            test_log_likelihood: per_point.iter().sum(),
            mse: mse(&pred.mean, y_true)?,
            per_point_log_density: per_point,
            ess: pred.ess(),
            runtime_seconds,
        })
    }
}
