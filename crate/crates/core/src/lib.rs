//! Subspace estimation from overidentifying moment vectors.
//!
//! Given `m` sample moment vectors `v_1, …, v_m ∈ ℝ^p` whose expectations lie
//! in an unknown `r`-dimensional subspace, the estimators here return the top
//! eigenvectors of `V W Vᵀ` for a data-driven weighting `W`. See
//! [`estimator::two_step_gmm`] for the main entry point.

pub mod distributed;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod linalg;
pub mod models;
pub mod moments;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
pub use estimator::{
    estimate_rank, estimate_sigma, gmm_objective, subspace_metrics, thresholded_pinv, two_step_gmm,
    weighted_eigen, GmmOptions, RankEstimate, SigmaHat, SubspaceEstimate, SubspaceMetrics, WeightMatrix,
};
pub use models::{Dataset, GroundTruth};
pub use moments::{materialize, MomentFunctionSet, MomentMatrix, Storage};
