//! Channel-gain map synthesis and estimation.
//!
//! Environments are generated with a tomographic forward model; the
//! cross-environment transformer estimator (CRETE) predicts gains between
//! arbitrary location pairs from a sparse context of pairwise measurements.

pub mod autodiff;
pub mod baselines;
pub mod dataset;
pub mod environment;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod invariance;
pub mod io;
pub mod model;
pub mod selfcheck;
pub mod trainer;
pub mod traversal;

pub use error::{Error, Result};
pub use geometry::Point3;
