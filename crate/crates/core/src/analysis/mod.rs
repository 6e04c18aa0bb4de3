//! Feature-space diagnostics of a trained detector: cross-modal Gaussian KL,
//! PCA effective dimensionality, co-activated neurons, how much of the
//! features ground-truth style and essence explain, and a 2-D projection.

mod report;
mod stats;

pub use report::{
    analyze_bundle, collect_features, AnalysisReport, FeatureBundle, FeatureGroup, K95Entry, KlEntry, ProjectedPoint,
    R2Entry, Space,
};
pub use stats::{
    coactivation_core, gaussian_kl, gaussian_kl_moments, kl_matrix, mean_off_diagonal, pca_k95, pca_project_2d,
    shrunk_covariance, variance_explained, CoactivationCore, DEFAULT_SHRINKAGE, RIDGE_FALLBACK,
};
