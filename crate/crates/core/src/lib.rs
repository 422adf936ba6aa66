//! Scalable Gaussian process regression with an importance sampled mixture
//! of experts.
//!
//! The inputs are partitioned by a collapsed Gaussian mixture sampler, an
//! exact GP expert is fit to each block, and independently drawn partitions
//! are combined with self-normalized importance weights. Minibatching with a
//! likelihood exponent of `N / B` keeps each sample at `O(B³ / K²)` cost.
//!
//! ```no_run
//! use ismoe::{data::gen_gmm_gp, engine::{run, IsmoeConfig}, metrics::EvalReport};
//!
//! let (train, test) = gen_gmm_gp(1000, 100, 2, 4, 1.0, 0.05, 7).unwrap();
//! let config = IsmoeConfig::new(10, 4, 500);
//! let out = run(&train, &config, test.inputs()).unwrap();
//! let report = EvalReport::evaluate(&out.prediction, test.outputs(), 0.0).unwrap();
//! println!("test LL {}", report.test_log_likelihood);
//! ```

pub mod data;
pub mod engine;
pub mod error;
pub mod gp;
pub mod hyperopt;
pub mod linalg;
pub mod metrics;
pub mod partition;

pub use data::Dataset;
pub use engine::{run, IsmoeConfig, ImportanceSample, PredictiveResult};
pub use error::{Error, Result};
pub use gp::{gp_fit, gp_predict, GPModel, KernelHyperparams};
pub use hyperopt::OptimConfig;
pub use partition::{MixturePrior, NiwPrior, Partition};
