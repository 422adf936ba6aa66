mod common;

use common::rng;
use ismoe::data::{gen_gmm_gp, gen_stationary, Dataset};
use ismoe::engine::{
    draw_sample, expert_optim, fit_exact_gp, initial_hyperparams, moment_match,
    normalize_log_weights, run, sample_predict, sample_seed, IsmoeConfig, PartitionScheme,
    Weighting,
};
use ismoe::gp::{gp_fit, gp_predict};
use ismoe::hyperopt::optimize_single;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn small_data() -> (Dataset, Dataset) {
    gen_gmm_gp(120, 15, 2, 3, 1.0, 0.05, 21).unwrap()
}

fn quick(j: usize, k: usize, b: usize) -> IsmoeConfig {
    let mut c = IsmoeConfig::new(j, k, b);
    c.optim.max_iterations = 60;
    c.optim.n_restarts = 0;
    c
}

#[test]
fn exact_gp_reduction() {
    let (train, test) = gen_stationary(80, 20, 15.0, 1.0, 0.1, 3).unwrap();
    let config = quick(1, 1, 80);
    let out = run(&train, &config, test.inputs()).unwrap();
    let optim = expert_optim(&config, 80, sample_seed(&config, 0, 0), 0);
    let init = initial_hyperparams(train.inputs(), train.outputs(), false).unwrap();
    let (h, _) = optimize_single(train.inputs(), train.outputs(), &init, &optim).unwrap();
    let model = gp_fit(train.inputs(), train.outputs(), &h).unwrap();
    let (m, v) = gp_predict(&model, test.inputs()).unwrap();
    assert!((out.prediction.mean - m).amax() < 1e-8);
    assert!((out.prediction.variance - v).amax() < 1e-8);
    assert_eq!(out.prediction.normalized_weights, vec![1.0]);
    let s = &out.samples[0];
    assert!((s.log_weight_unnorm - model.log_marginal()).abs() < 1e-9);
    let exact = fit_exact_gp(&train, &optim, false).unwrap();
    assert_eq!(exact.hyper(), model.hyper());
}

#[test]
fn single_expert_sample_matches_its_gp() {
    let (train, test) = small_data();
    let config = quick(1, 1, 60);
    let s = draw_sample(&train, &config, 0).unwrap();
    let (m, v) = sample_predict(&s, test.inputs(), &train).unwrap();
    let (gm, gv) = gp_predict(s.experts[0].as_ref().unwrap(), test.inputs()).unwrap();
    assert_eq!(m, gm);
    assert_eq!(v, gv);
}

#[test]
fn sample_invariants_and_sa_exponent() {
    let (train, _) = small_data();
    let mut config = quick(1, 3, 60);
    let s = draw_sample(&train, &config, 4).unwrap();
    assert_eq!(s.minibatch_indices.len(), 60);
    assert!(s.minibatch_indices.windows(2).all(|w| w[0] < w[1]));
    for k in 0..3 {
        assert_eq!(s.experts[k].is_some(), s.partition.counts()[k] > 0);
        assert_eq!(s.hypers[k], s.hypers[0]);
    }
    let total: f64 = s.experts.iter().flatten().map(|m| m.log_marginal()).sum();
    assert_eq!(s.log_weight_unnorm, 2.0 * total);
    config.sa_enabled = false;
    let s = draw_sample(&train, &config, 4).unwrap();
    let total: f64 = s.experts.iter().flatten().map(|m| m.log_marginal()).sum();
    assert_eq!(s.log_weight_unnorm, total);
}

#[test]
fn draw_sample_is_deterministic() {
    let (train, _) = small_data();
    let mut config = quick(1, 3, 60);
    config.shared_hyper = false;
    let a = draw_sample(&train, &config, 2).unwrap();
    let b = draw_sample(&train, &config, 2).unwrap();
    assert_eq!(a.minibatch_indices, b.minibatch_indices);
    assert_eq!(a.partition, b.partition);
    assert_eq!(a.hypers, b.hypers);
    assert_eq!(a.log_weight_unnorm.to_bits(), b.log_weight_unnorm.to_bits());
    let c = draw_sample(&train, &config, 3).unwrap();
    assert_ne!(a.minibatch_indices, c.minibatch_indices);
}

#[test]
fn worker_count_does_not_change_results() {
    let (train, test) = small_data();
    let mut config = quick(4, 3, 60);
    let one = run(&train, &config, test.inputs()).unwrap();
    config.n_workers = 4;
    let four = run(&train, &config, test.inputs()).unwrap();
    assert_eq!(one.prediction, four.prediction);
    assert_eq!(one.diagnostics.aggregation_barriers, 1);
}

#[test]
fn run_outputs_are_consistent() {
    let (train, test) = small_data();
    for weighting in [Weighting::Importance, Weighting::Uniform] {
        for scheme in [PartitionScheme::Gmm, PartitionScheme::Random] {
            let mut config = quick(5, 3, 60);
            config.weighting = weighting;
            config.partition_scheme = scheme;
            let out = run(&train, &config, test.inputs()).unwrap();
            let p = &out.prediction;
            assert_eq!(p.normalized_weights.len(), 5);
            assert!((p.normalized_weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.normalized_weights.iter().all(|w| (0.0..=1.0).contains(w)));
            assert!(p.variance.iter().all(|&v| v > 0.0));
            let ess = out.diagnostics.ess;
            assert!((1.0 - 1e-9..=5.0 + 1e-9).contains(&ess));
            if weighting == Weighting::Uniform {
                assert!((ess - 5.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn single_sample_run_equals_sample_predict() {
    let (train, test) = small_data();
    let config = quick(1, 3, 60);
    let out = run(&train, &config, test.inputs()).unwrap();
    let (m, v) = sample_predict(&out.samples[0], test.inputs(), &train).unwrap();
    assert_eq!(out.prediction.mean, m);
    assert_eq!(out.prediction.variance, v);
}

#[test]
fn invalid_configs_are_rejected() {
    let (train, test) = small_data();
    assert!(run(&train, &quick(1, 0, 60), test.inputs()).is_err());
    assert!(run(&train, &quick(1, 2, 121), test.inputs()).is_err());
    assert!(run(&train, &quick(0, 2, 60), test.inputs()).is_err());
    assert!(run(&train, &quick(1, 2, 60), &DMatrix::zeros(3, 5)).is_err());
}

#[test]
fn moment_match_hand_example() {
    assert_eq!(moment_match(&[0.5, 0.5], &[1.0, -1.0], &[1.0, 1.0]), (0.0, 2.0));
}

/// Variance of the mixture, estimated from `draws` samples.
fn monte_carlo_mixture_variance(w: &[f64], m: &[f64], v: &[f64], draws: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    for _ in 0..draws {
        let u: f64 = r.random();
        let mut acc = 0.0;
        let mut c = w.len() - 1;
        for (i, wi) in w.iter().enumerate() {
            acc += wi;
            if u < acc {
                c = i;
                break;
            }
        }
        let s = Normal::new(m[c], v[c].sqrt()).unwrap().sample(&mut r);
        sum += s;
        sum2 += s * s;
    }
    let n = draws as f64;
    sum2 / n - (sum / n) * (sum / n)
}

#[test]
fn mixture_variance_matches_monte_carlo() {
    let mut r = rng(77);
    let j = 6;
    let w = normalize_log_weights(&(0..j).map(|_| r.random_range(-3.0..0.0)).collect::<Vec<_>>()).unwrap();
    let m: Vec<f64> = (0..j).map(|_| r.random_range(-2.0..2.0)).collect();
    let v: Vec<f64> = (0..j).map(|_| r.random_range(0.1..1.0)).collect();
    let (_, var) = moment_match(&w, &m, &v);
    let mc = monte_carlo_mixture_variance(&w, &m, &v, 200_000, 5);
    assert!((mc - var).abs() / var < 2e-2, "{mc} vs {var}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn weights_are_shift_invariant(
        lw in prop::collection::vec(-50.0f64..50.0, 1..30),
        shift in -1e4f64..1e4,
    ) {
        let a = normalize_log_weights(&lw).unwrap();
        let shifted: Vec<f64> = lw.iter().map(|v| v + shift).collect();
        let b = normalize_log_weights(&shifted).unwrap();
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn moment_match_variance_is_second_moment(
        raw in prop::collection::vec((0.01f64..1.0, -5.0f64..5.0, 0.01f64..3.0), 1..8),
    ) {
        let total: f64 = raw.iter().map(|t| t.0).sum();
        let w: Vec<f64> = raw.iter().map(|t| t.0 / total).collect();
        let m: Vec<f64> = raw.iter().map(|t| t.1).collect();
        let v: Vec<f64> = raw.iter().map(|t| t.2).collect();
        let (mean, var) = moment_match(&w, &m, &v);
        let second: f64 = (0..w.len()).map(|i| w[i] * (v[i] + m[i] * m[i])).sum();
        prop_assert!((var - (second - mean * mean)).abs() < 1e-9 * second.max(1.0));
        prop_assert!(var >= v.iter().cloned().fold(f64::INFINITY, f64::min) - 1e-12);
    }
}
