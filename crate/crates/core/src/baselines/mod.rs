//! Non-learned estimators: k-nearest-neighbour averaging and regularized
//! radio tomography.

pub mod knn;
pub mod prox;
pub mod tomography;

pub use knn::{knn_estimate, pair_distance};
pub use tomography::{default_lambda_grid, select_lambda, tomographic_fit, RegularizerKind, RegularizerSpec, TomographicModel};
