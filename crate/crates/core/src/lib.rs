//! Stochastic variational inference with a full-rank Gaussian approximation
//! `q = N(mu, Sigma)`, parametrized either by the Cholesky factor of the
//! covariance or by the Cholesky factor of the precision.
//!
//! Factor gradients can be estimated from first derivatives of the log joint
//! or from second derivatives, and the mean and factor can be moved along the
//! Euclidean or the natural gradient.
//!
//! ```
//! use gaussvi::{run, Algorithm, GaussianVariational, Order, QuadraticModel, RunConfig, StepperKind};
//! use gaussvi::trimat::Matrix;
//!
//! let model = QuadraticModel::new(
//!     gaussvi::Vector::from_vec(vec![1.0, -1.0]),
//!     Matrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
//!     0.0,
//! )
//! .unwrap();
//! let mut cfg = RunConfig::new(Algorithm::PrecNatural, Order::Second, StepperKind::Snngm);
//! cfg.max_iters = 2000;
//! cfg.window = 100;
//! let state0 = GaussianVariational::standard(2, cfg.algorithm.parametrization());
//! let record = run(&model, &state0, &cfg).unwrap();
//! assert_eq!(record.elbo_trace.len(), record.iterations);
//! ```

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod estimators;
pub mod models;
pub mod optim;
pub mod trimat;
pub mod variational;

pub use data::{load_csv, random_coefficients, synth_logistic, CsvSchema, Dataset};
pub use error::{Error, Result};
pub use estimators::{estimate, Geometry, GradientEstimate, Order};
pub use models::{Counted, LogJoint, LogisticModel, ModelDerivatives, QuadraticModel};
pub use optim::{
    run, run_with_observer, AdamParams, Algorithm, RunConfig, RunRecord, SnngmParams, StepperKind,
    Termination,
};
pub use trimat::{LowerTriangular, Matrix, Vector};
pub use variational::{DrawContext, GaussianVariational, Parametrization};
