//! Regression datasets, CSV I/O and the synthetic generators.
//!
//! CSV layout: a header row `x0,...,x{D-1},y` followed by one row per point.
//! Floats are written in shortest round-trip form so a write/read cycle is
//! lossless. On input the header names are not checked, only the column
//! count; the last column is always the output.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{kernel_matrix, KernelHyperparams};
use crate::linalg;

/// Joint grids larger than this are refused by the dense generators.
pub const MAX_GENERATED_POINTS: usize = 20_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: DMatrix<f64>,
    outputs: DVector<f64>,
    /// Noise-free function values, when known.
    pub true_f: Option<Vec<f64>>,
    /// Generative cluster or regime labels, when known.
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(inputs: DMatrix<f64>, outputs: DVector<f64>) -> Result<Self> {
        if inputs.nrows() == 0 || inputs.ncols() == 0 {
            return Err(Error::InvalidArgument(
                "dataset needs at least one point and one input column".into(),
            ));
        }
        if inputs.nrows() != outputs.len() {
            return Err(Error::InputShape(format!(
                "{} input rows but {} outputs",
                inputs.nrows(),
                outputs.len()
            )));
        }
        if inputs.iter().chain(outputs.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "dataset contains non-finite values".into(),
            ));
        }
        Ok(Dataset {
            inputs,
            outputs,
            true_f: None,
            labels: None,
        })
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn outputs(&self) -> &DVector<f64> {
        &self.outputs
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// The rows at `indices` (in that order), metadata included.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidArgument(format!(
                "index {bad} out of range for {} points",
                self.len()
            )));
        }
        let inputs = self.inputs.select_rows(indices);
        let outputs = self.outputs.select_rows(indices);
        let mut ds = Dataset::new(inputs, outputs)?;
        ds.true_f = self
            .true_f
            .as_ref()
            .map(|f| indices.iter().map(|&i| f[i]).collect());
        ds.labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Ok(ds)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.dim()).map(|d| format!("x{d}")).collect();
        header.push("y".into());
        let csv_err = |e: csv::Error| Error::Parse(e.to_string());
        w.write_record(&header).map_err(csv_err)?;
        let mut record = Vec::with_capacity(self.dim() + 1);
        for i in 0..self.len() {
            record.clear();
            record.extend(self.inputs.row(i).iter().map(|v| format!("{v:?}")));
            record.push(format!("{:?}", self.outputs[i]));
            w.write_record(&record).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Parse(e.to_string()))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Dataset> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = r
            .headers()
            .map_err(|e| Error::Parse(format!("reading header: {e}")))?;
        let width = headers.len();
        if width < 2 {
            return Err(Error::Parse(format!(
                "need at least one input column and an output column, header has {width}"
            )));
        }
        let dim = width - 1;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
            if rec.len() != width {
                return Err(Error::Parse(format!(
                    "row {} has {} fields, expected {width}",
                    line + 1,
                    rec.len()
                )));
            }
            for (c, field) in rec.iter().enumerate() {
                let v: f64 = field.parse().map_err(|_| {
                    Error::Parse(format!("row {}, column {c}: not a number: {field:?}", line + 1))
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse(format!(
                        "row {}, column {c}: non-finite value",
                        line + 1
                    )));
                }
                if c < dim {
                    xs.push(v);
                } else {
                    ys.push(v);
                }
            }
        }
        if ys.is_empty() {
            return Err(Error::Parse("no data rows".into()));
        }
        let n = ys.len();
        Dataset::new(DMatrix::from_row_slice(n, dim, &xs), DVector::from_vec(ys))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.write_csv(file)
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let file = File::open(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Dataset::read_csv(file).map_err(|e| match e {
            Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

/// Generator settings, recorded alongside generated files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GeneratorParams {
    Stationary {
        n_train: usize,
        n_test: usize,
        gamma: f64,
        amplitude: f64,
        noise_var: f64,
        seed: u64,
    },
    Nonstationary {
        n_train: usize,
        n_test: usize,
        noise_var: f64,
        seed: u64,
    },
    Gmm {
        n_train: usize,
        n_test: usize,
        input_dim: usize,
        n_components: usize,
        gamma: f64,
        noise_var: f64,
        seed: u64,
    },
}

impl GeneratorParams {
    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        match *self {
            GeneratorParams::Stationary {
                n_train,
                n_test,
                gamma,
                amplitude,
                noise_var,
                seed,
            } => gen_stationary(n_train, n_test, gamma, amplitude, noise_var, seed),
            GeneratorParams::Nonstationary {
                n_train,
                n_test,
                noise_var,
                seed,
            } => gen_nonstationary(n_train, n_test, noise_var, seed),
            GeneratorParams::Gmm {
                n_train,
                n_test,
                input_dim,
                n_components,
                gamma,
                noise_var,
                seed,
            } => gen_gmm_gp(n_train, n_test, input_dim, n_components, gamma, noise_var, seed),
        }
    }
}

fn check_sizes(n_train: usize, n_test: usize) -> Result<usize> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::InvalidArgument(
            "n_train and n_test must be positive".into(),
        ));
    }
    let total = n_train + n_test;
    if total > MAX_GENERATED_POINTS {
        return Err(Error::Size(format!(
            "{total} points exceed the dense generation cap of {MAX_GENERATED_POINTS}"
        )));
    }
    Ok(total)
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")))
    }
}

fn check_noise(v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "noise_var must be non-negative, got {v}"
        )))
    }
}

fn linspace(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n)
        .map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64)
        .collect()
}

/// Draws `f ~ N(0, K)` by Cholesky with relative jitter starting at 1e-8.
fn draw_gp(x: &DMatrix<f64>, hyper: &KernelHyperparams, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let mut k = kernel_matrix(x, x, hyper)?;
    let n = x.nrows();
    let nu = hyper.amplitude();
    let mut jitter = 1e-8 * nu;
    let mut added = 0.0;
    let chol = loop {
        for i in 0..n {
            k[(i, i)] += jitter - added;
        }
        added = jitter;
        if let Some(l) = linalg::cholesky_lower(&k) {
            break l;
        }
        jitter *= 10.0;
        if jitter > 1e-4 * nu {
            return Err(Error::NumericalOther(
                "generator covariance not positive definite".into(),
            ));
        }
        log::warn!("generator jitter raised to {jitter:e}");
    };
    let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
    Ok((chol * z).iter().copied().collect())
}

fn add_noise(f: &[f64], noise_var: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sd = noise_var.sqrt();
    f.iter()
        .map(|&v| {
            let e: f64 = rng.sample(StandardNormal);
            if sd > 0.0 {
                v + sd * e
            } else {
                v
            }
        })
        .collect()
}

/// Splits grid data into train/test with test indices drawn uniformly.
fn split_grid(
    grid: &[f64],
    f: &[f64],
    y: &[f64],
    labels: Option<&[usize]>,
    n_test: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Dataset, Dataset)> {
    let total = grid.len();
    let mut is_test = vec![false; total];
    for i in index::sample(rng, total, n_test) {
        is_test[i] = true;
    }
    let build = |pick: bool| -> Result<Dataset> {
        let idx: Vec<usize> = (0..total).filter(|&i| is_test[i] == pick).collect();
        let mut ds = Dataset::new(
            DMatrix::from_iterator(idx.len(), 1, idx.iter().map(|&i| grid[i])),
            DVector::from_iterator(idx.len(), idx.iter().map(|&i| y[i])),
        )?;
        ds.true_f = Some(idx.iter().map(|&i| f[i]).collect());
        ds.labels = labels.map(|l| idx.iter().map(|&i| l[i]).collect());
        Ok(ds)
    };
    Ok((build(false)?, build(true)?))
}

/// Stationary GP draw on a grid over [-1, 1], train and test interleaved.
pub fn gen_stationary(
    n_train: usize,
    n_test: usize,
    gamma: f64,
    amplitude: f64,
    noise_var: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let total = check_sizes(n_train, n_test)?;
    check_positive("gamma", gamma)?;
    check_positive("amplitude", amplitude)?;
    check_noise(noise_var)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = linspace(total);
    let x = DMatrix::from_column_slice(total, 1, &grid);
    // noise is irrelevant to the draw; any positive value passes validation
    let hyper = KernelHyperparams::isotropic(amplitude, gamma, 1.0)?;
    let f = draw_gp(&x, &hyper, &mut rng)?;
    let y = add_noise(&f, noise_var, &mut rng);
    split_grid(&grid, &f, &y, None, n_test, &mut rng)
}

/// The piecewise periodic function: slow for x < 0, fast for x >= 0.
pub fn nonstationary_function(x: f64) -> f64 {
    if x < 0.0 {
        (2.0 * PI * 1.5 * x).sin()
    } else {
        (2.0 * PI * 15.0 * x).sin()
    }
}

/// Piecewise periodic data on a grid over [-1, 1]; labels give the regime
/// (0 slow, 1 fast).
pub fn gen_nonstationary(
    n_train: usize,
    n_test: usize,
    noise_var: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let total = check_sizes(n_train, n_test)?;
    check_noise(noise_var)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = linspace(total);
    let f: Vec<f64> = grid.iter().map(|&x| nonstationary_function(x)).collect();
    let labels: Vec<usize> = grid.iter().map(|&x| usize::from(x >= 0.0)).collect();
    let y = add_noise(&f, noise_var, &mut rng);
    split_grid(&grid, &f, &y, Some(&labels), n_test, &mut rng)
}

/// Inputs from an equal-weight Gaussian mixture (means ~ N(0, 25 I), unit
/// covariances), outputs from a unit-amplitude GP over those inputs plus noise.
pub fn gen_gmm_gp(
    n_train: usize,
    n_test: usize,
    input_dim: usize,
    n_components: usize,
    gamma: f64,
    noise_var: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let total = check_sizes(n_train, n_test)?;
    if input_dim == 0 || n_components == 0 {
        return Err(Error::InvalidArgument(
            "input_dim and n_components must be positive".into(),
        ));
    }
    check_positive("gamma", gamma)?;
    check_noise(noise_var)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..n_components)
        .map(|_| {
            (0..input_dim)
                .map(|_| 5.0 * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let labels: Vec<usize> = (0..total).map(|_| rng.random_range(0..n_components)).collect();
    let x = DMatrix::from_fn(total, input_dim, |i, d| means[labels[i]][d]);
    let noise = DMatrix::from_fn(total, input_dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let x = x + noise;
    let hyper = KernelHyperparams::isotropic(1.0, gamma, 1.0)?;
    let f = draw_gp(&x, &hyper, &mut rng)?;
    let y = add_noise(&f, noise_var, &mut rng);

    let mut all = Dataset::new(x, DVector::from_vec(y))?;
    all.true_f = Some(f);
    all.labels = Some(labels);
    let train: Vec<usize> = (0..n_train).collect();
    let test: Vec<usize> = (n_train..total).collect();
    Ok((all.select(&train)?, all.select(&test)?))
}

/// Uniform shuffle split. Both parts keep the original row order.
pub fn split_dataset(
    dataset: &Dataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test_fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    let n = dataset.len();
    let n_test = (n as f64 * test_fraction).round() as usize;
    if n_test == 0 || n_test == n {
        return Err(Error::InvalidArgument(format!(
            "test fraction {test_fraction} leaves an empty part for {n} points"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut test: Vec<usize> = order[..n_test].to_vec();
    let mut train: Vec<usize> = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((dataset.select(&train)?, dataset.select(&test)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nonstationary_function_values() {
        assert!((nonstationary_function(-0.25) - (-0.75 * PI).sin()).abs() < 1e-15);
        assert!((nonstationary_function(-0.25) + std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(nonstationary_function(0.0), 0.0);
    }

    #[test]
    fn nonstationary_labels_split_at_zero() {
        let (train, test) = gen_nonstationary(200, 20, 0.1, 4).unwrap();
        for ds in [&train, &test] {
            let labels = ds.labels.as_ref().unwrap();
            for (i, l) in labels.iter().enumerate() {
                assert_eq!(*l, usize::from(ds.inputs()[(i, 0)] >= 0.0));
            }
        }
    }

    #[test]
    fn zero_noise_outputs_equal_function() {
        let (train, test) = gen_stationary(50, 10, 15.0, 1.0, 0.0, 8).unwrap();
        for ds in [&train, &test] {
            assert_eq!(ds.outputs().as_slice(), ds.true_f.as_ref().unwrap().as_slice());
        }
    }

    #[test]
    fn stationary_grid_interleaves() {
        let (train, test) = gen_stationary(90, 10, 15.0, 1.0, 1.0, 2).unwrap();
        assert_eq!(train.len(), 90);
        assert_eq!(test.len(), 10);
        let mut all: Vec<f64> = train
            .inputs()
            .iter()
            .chain(test.inputs().iter())
            .copied()
            .collect();
        all.sort_by(f64::total_cmp);
        let grid = linspace(100);
        assert_eq!(all, grid);
    }

    #[test]
    fn generators_reject_bad_parameters() {
        assert!(gen_stationary(0, 10, 1.0, 1.0, 1.0, 0).is_err());
        assert!(gen_stationary(10, 10, -1.0, 1.0, 1.0, 0).is_err());
        assert!(gen_nonstationary(10, 10, -0.5, 0).is_err());
        assert!(matches!(
            gen_stationary(20_000, 1, 1.0, 1.0, 1.0, 0),
            Err(Error::Size(_))
        ));
        assert!(matches!(
            gen_gmm_gp(15_000, 6_000, 2, 3, 1.0, 0.1, 0),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn gmm_single_component_labels_zero() {
        let (train, test) = gen_gmm_gp(40, 10, 3, 1, 0.5, 0.1, 1).unwrap();
        assert!(train.labels.as_ref().unwrap().iter().all(|&l| l == 0));
        assert!(test.labels.as_ref().unwrap().iter().all(|&l| l == 0));
        assert_eq!(train.dim(), 3);
    }

    #[test]
    fn split_examples() {
        let ds = Dataset::new(
            DMatrix::from_fn(10, 1, |i, _| i as f64),
            DVector::from_fn(10, |i, _| i as f64 * 2.0),
        )
        .unwrap();
        let (tr, te) = split_dataset(&ds, 0.5, 3).unwrap();
        assert_eq!((tr.len(), te.len()), (5, 5));
        let (tr2, te2) = split_dataset(&ds, 0.5, 3).unwrap();
        assert_eq!(tr, tr2);
        assert_eq!(te, te2);
        let mut seen: Vec<f64> = tr.inputs().iter().chain(te.inputs().iter()).copied().collect();
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, (0..10).map(|i| i as f64).collect::<Vec<_>>());
        assert!(split_dataset(&ds, 0.01, 3).is_err());
        assert!(split_dataset(&ds, 1.0, 3).is_err());
    }

    #[test]
    fn split_differs_across_seeds() {
        let ds = Dataset::new(
            DMatrix::from_fn(50, 1, |i, _| i as f64),
            DVector::from_fn(50, |i, _| i as f64),
        )
        .unwrap();
        let (base, _) = split_dataset(&ds, 0.3, 0).unwrap();
        for seed in 1..=5 {
            let (other, _) = split_dataset(&ds, 0.3, seed).unwrap();
            assert_ne!(base, other, "seed {seed}");
        }
    }

    #[test]
    fn csv_rejects_malformed_input() {
        assert!(Dataset::read_csv("x0,y\n".as_bytes()).is_err());
        assert!(Dataset::read_csv("y\n1\n".as_bytes()).is_err());
        assert!(Dataset::read_csv("x0,y\n1,2\n3\n".as_bytes()).is_err());
        assert!(Dataset::read_csv("x0,y\n1,abc\n".as_bytes()).is_err());
        assert!(Dataset::read_csv("x0,y\n1,inf\n".as_bytes()).is_err());
        let ok = Dataset::read_csv("x0,x1,y\n1, 2,3\n4,5,6\n".as_bytes()).unwrap();
        assert_eq!(ok.dim(), 2);
        assert_eq!(ok.outputs().as_slice(), &[3.0, 6.0]);
    }

    #[test]
    fn csv_header_layout() {
        let ds = Dataset::new(
            DMatrix::from_row_slice(1, 2, &[0.1, 1e-300]),
            DVector::from_vec(vec![-2.5]),
        )
        .unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "x0,x1,y\n0.1,1e-300,-2.5\n");
    }
}
