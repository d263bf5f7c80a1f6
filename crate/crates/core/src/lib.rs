//! Surrogate-assisted inference for generalized linear model coefficients
//! when the outcome is missing at random.
//!
//! The estimator runs in two steps. First, a low-dimensional subspace of the
//! augmented covariates `(Z, X)` is estimated from the rows with an observed
//! outcome, a kernel imputation model is fitted on that subspace and an
//! initial coefficient vector is obtained from the imputed outcomes. Second,
//! a low-dimensional weighting function replaces the missingness propensity
//! in a doubly robust score, and a cross-fitted one-step correction debiases
//! the target coefficient. Intervals come from a nonparametric bootstrap.
//!
//! Module map:
//!
//! - [`glm`]: families, deviance and Newton fitting.
//! - [`reduction`]: sliced inverse regression and CV choice of dimension.
//! - [`kernel`]: Nadaraya-Watson regression and unnormalized kernel sums.
//! - [`surrogate`]: the observed-data container and the first-step fit.
//! - [`debias`]: score, trimmed weight model, one-step estimate, bootstrap.
//! - [`baselines`]: cross-fitted AIPW comparators and the no-surrogate run.
//! - [`sim`]: simulation scenarios, oracle coefficients and replicate sweeps.

pub mod baselines;
pub mod debias;
pub mod error;
pub mod glm;
pub mod kernel;
pub mod reduction;
pub mod seeds;
pub mod sim;
pub mod surrogate;

pub use error::{Error, Result};
pub use glm::{Family, GlmFit};
pub use surrogate::Dataset;

/// Library version string echoed into every output manifest.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
