//! Growth curve modeling with incomplete longitudinal data.
//!
//! The crate covers the whole evaluation pipeline for missing-data techniques
//! on linear growth curve models:
//!
//! - [`model`]: the linear growth curve model, its implied moments and cohort
//!   generation under normal and nonnormal measurement errors.
//! - [`dataset`]: the incomplete N×T response matrix and its CSV form.
//! - [`missingness`]: MAR dropout and auxiliary-variable MNAR injection.
//! - [`estimators`]: full-information ML and two-stage robust estimation.
//! - [`imputers`]: KNN, missForest and chained-equation imputation with CART
//!   and random-forest engines.
//! - [`analysis`]: Rubin pooling, relative bias and MSE.
//! - [`harness`]: the factorial Monte Carlo study with reproducible streams.

pub mod analysis;
pub mod dataset;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod imputers;
pub mod linalg;
pub mod missingness;
pub mod model;

pub use dataset::LongitudinalDataset;
pub use error::{Error, Result};
pub use model::{ErrorDistribution, ErrorKind, GcmSpec};
