mod common;

use common::mean;
use ismoe::data::{
    gen_gmm_gp, gen_nonstationary, gen_stationary, nonstationary_function, split_dataset, Dataset,
    MAX_GENERATED_POINTS,
};
use ismoe::partition::{sample_partition, MixturePrior, NiwPrior};
use ismoe::Error;
use nalgebra::{DMatrix, DVector};

fn sample_var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
}

/// Train and test merged back into grid order.
fn merged_f(train: &Dataset, test: &Dataset) -> Vec<f64> {
    let mut pts: Vec<(f64, f64)> = Vec::new();
    for ds in [train, test] {
        let f = ds.true_f.as_ref().unwrap();
        for (i, fi) in f.iter().enumerate() {
            pts.push((ds.inputs()[(i, 0)], *fi));
        }
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    pts.into_iter().map(|p| p.1).collect()
}

fn lag1_corr(f: &[f64]) -> f64 {
    let m = mean(f);
    let num: f64 = f.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum();
    let den: f64 = f.iter().map(|x| (x - m) * (x - m)).sum();
    num / den
}

/// Adjusted Rand index between two labelings.
fn adjusted_rand(a: &[usize], b: &[usize]) -> f64 {
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut table = vec![vec![0u64; kb]; ka];
    for (&i, &j) in a.iter().zip(b) {
        table[i][j] += 1;
    }
    let c2 = |n: u64| (n * n.saturating_sub(1)) as f64 / 2.0;
    let sum_ij: f64 = table.iter().flatten().map(|&n| c2(n)).sum();
    let sum_a: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
    let sum_b: f64 = (0..kb).map(|j| c2(table.iter().map(|r| r[j]).sum())).sum();
    let expected = sum_a * sum_b / c2(a.len() as u64);
    (sum_ij - expected) / (0.5 * (sum_a + sum_b) - expected)
}

#[test]
fn stationary_draw_variance_is_plausible() {
    let vars: Vec<f64> = (0..10)
        .map(|s| {
            let (tr, te) = gen_stationary(300, 30, 15.0, 1.0, 1.0, s).unwrap();
            sample_var(&merged_f(&tr, &te))
        })
        .collect();
    let v = mean(&vars);
    assert!((0.2..=3.0).contains(&v), "mean variance {v}");
}

#[test]
fn short_lengthscale_lag_correlation_follows_kernel() {
    let (tr, te) = gen_stationary(1000, 100, 5000.0, 1.0, 1.0, 4).unwrap();
    let f = merged_f(&tr, &te);
    let spacing: f64 = 2.0 / 1099.0;
    let closed_form = (-5000.0 * spacing * spacing).exp();
    assert!((closed_form - 0.9836).abs() < 1e-3);
    let r = lag1_corr(&f);
    assert!((r - closed_form).abs() < 0.02, "lag-1 correlation {r} vs {closed_form}");
}

#[test]
fn zero_noise_outputs_equal_truth() {
    let (tr, te) = gen_stationary(50, 10, 15.0, 2.0, 0.0, 1).unwrap();
    for ds in [&tr, &te] {
        let f = ds.true_f.as_ref().unwrap();
        assert!(ds.outputs().iter().zip(f).all(|(y, f)| y == f));
    }
}

#[test]
fn residual_variance_tracks_noise() {
    for noise in [0.1, 1.0] {
        let (tr, _) = gen_nonstationary(1000, 100, noise, 8).unwrap();
        let f = tr.true_f.as_ref().unwrap();
        let r: Vec<f64> = tr.outputs().iter().zip(f).map(|(y, f)| y - f).collect();
        let v = sample_var(&r);
        assert!((v / noise - 1.0).abs() < 0.2, "residual variance {v} for noise {noise}");
    }
}

#[test]
fn nonstationary_function_values() {
    assert!((nonstationary_function(-0.25) + 0.5f64.sqrt()).abs() < 1e-12);
    assert_eq!(nonstationary_function(0.0), 0.0);
    let (tr, te) = gen_nonstationary(200, 20, 0.1, 2).unwrap();
    for ds in [&tr, &te] {
        let labels = ds.labels.as_ref().unwrap();
        for (i, l) in labels.iter().enumerate() {
            assert_eq!(*l, usize::from(ds.inputs()[(i, 0)] >= 0.0));
        }
    }
}

#[test]
fn generators_are_deterministic() {
    assert_eq!(gen_stationary(40, 5, 15.0, 1.0, 1.0, 9).unwrap(), gen_stationary(40, 5, 15.0, 1.0, 1.0, 9).unwrap());
    assert_eq!(gen_nonstationary(40, 5, 1.0, 9).unwrap(), gen_nonstationary(40, 5, 1.0, 9).unwrap());
    assert_eq!(gen_gmm_gp(40, 5, 3, 2, 1.0, 0.1, 9).unwrap(), gen_gmm_gp(40, 5, 3, 2, 1.0, 0.1, 9).unwrap());
    assert_ne!(gen_gmm_gp(40, 5, 3, 2, 1.0, 0.1, 9).unwrap(), gen_gmm_gp(40, 5, 3, 2, 1.0, 0.1, 10).unwrap());
}

#[test]
fn oversized_grid_is_refused() {
    let err = gen_stationary(MAX_GENERATED_POINTS, 1, 15.0, 1.0, 1.0, 0).unwrap_err();
    assert!(matches!(err, Error::Size(_)));
}

#[test]
fn single_component_labels_are_zero() {
    let (tr, te) = gen_gmm_gp(30, 5, 2, 1, 1.0, 0.1, 0).unwrap();
    assert!(tr.labels.unwrap().iter().chain(te.labels.unwrap().iter()).all(|&l| l == 0));
}

#[test]
fn gmm_labels_agree_with_sampled_partition() {
    let mut ari = Vec::new();
    for seed in 0..5u64 {
        let (tr, _) = gen_gmm_gp(200, 10, 2, 2, 1.0, 0.1, 100 + seed).unwrap();
        let prior = MixturePrior::new(2.0, 2, NiwPrior::from_data(tr.inputs()).unwrap()).unwrap();
        let p = sample_partition(tr.inputs(), &prior, 2, seed).unwrap();
        ari.push(adjusted_rand(tr.labels.as_ref().unwrap(), p.assignments()));
    }
    assert!(mean(&ari) > 0.3, "adjusted rand {ari:?}");
}

#[test]
fn split_properties() {
    let x = DMatrix::from_fn(10, 1, |i, _| i as f64);
    let ds = Dataset::new(x, DVector::from_fn(10, |i, _| i as f64 * 2.0)).unwrap();
    let (a, b) = split_dataset(&ds, 0.5, 3).unwrap();
    assert_eq!((a.len(), b.len()), (5, 5));
    assert_eq!(split_dataset(&ds, 0.5, 3).unwrap(), (a.clone(), b.clone()));
    let mut all: Vec<f64> = a.inputs().iter().chain(b.inputs().iter()).copied().collect();
    all.sort_by(f64::total_cmp);
    assert_eq!(all, (0..10).map(|i| i as f64).collect::<Vec<_>>());
    let distinct = (0..5u64)
        .map(|s| split_dataset(&ds, 0.5, 1000 + s).unwrap().1.inputs().clone())
        .collect::<Vec<_>>();
    assert!(distinct.windows(2).all(|w| w[0] != w[1]));
    assert!(split_dataset(&ds, 0.01, 0).is_err());
    assert!(split_dataset(&ds, 1.0, 0).is_err());
}
