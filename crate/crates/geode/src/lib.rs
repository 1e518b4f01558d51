//! Two-stage multiscale density estimation for high-dimensional data that
//! concentrates near a low-dimensional set.
//!
//! **Stage 1** learns the geometry: a binary clustering tree partitions the
//! sample at every scale, and each tree cell gets a rank-`d` affine
//! approximation (a cell mean plus an orthonormal basis of principal
//! directions from a randomized SVD). The result is a multiscale dictionary
//! of local charts.
//!
//! **Stage 2** learns the measure: each cell carries a Gaussian factor
//! model `y ~ N(μ + Φη, σ²I)` with `η ~ N(0, Σ)` diagonal, and a
//! stick-breaking prior selects cells across scales, so coarse cells absorb
//! diffuse mass while fine cells capture detail. A Gibbs sampler with an
//! adaptive dimension-deletion move fits weights, factor variances, and
//! per-scale noise, pruning basis directions whose variance collapses.
//!
//! The fitted object supports density evaluation, conditional simulation of
//! missing features with credible intervals, prediction, and classification
//! by per-class density comparison — all as Monte Carlo averages over the
//! retained posterior draws.
//!
//! ```
//! use geode::{DataSet, Hyperparams, fit};
//! use nalgebra::{DMatrix, DVector};
//!
//! // 200 points near a line through R^3.
//! let m = DMatrix::from_fn(3, 200, |r, c| {
//!     let t = c as f64 / 200.0 - 0.5;
//!     [t, 2.0 * t, -t][r] + 0.01 * ((c * 7 + r) % 13) as f64 / 13.0
//! });
//! let data = DataSet::complete(m).unwrap();
//! let hyper = Hyperparams {
//!     d_upper: 2,
//!     max_depth: 2,
//!     iters: 40,
//!     burn_in: 10,
//!     ..Default::default()
//! };
//! let model = fit(&data, &hyper).unwrap();
//! let ld = model.log_density(&DVector::from_column_slice(&[0.0, 0.0, 0.0])).unwrap();
//! assert!(ld.is_finite());
//! ```

pub mod data;
pub mod dict;
pub mod error;
pub mod gibbs;
pub mod infer;
pub mod model;
pub mod svd;
pub mod tree;

pub use data::DataSet;
pub use dict::{fit_dictionary, precompute_stats, MultiscaleDictionary, NodeDictionary, SuffStats};
pub use error::{GeodeError, Result};
pub use gibbs::{run_gibbs, AdaptationEvent, ChainState, PosteriorDraws, Snapshot};
pub use infer::{
    classify, classify_detailed, fit, impute, inclusion_probabilities, predict_response,
    Classification, FittedModel, ImputationResult,
};
pub use model::{Hyperparams, NodeParams, ScaleParams, StickState};
pub use svd::randomized_rank_d_svd;
pub use tree::{build_tree, ClusterTree, TreeNode};
