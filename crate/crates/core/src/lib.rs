//! Multilevel low rank (MLR) covariance matrices.
//!
//! A PSD MLR matrix is `Σ = F_1F_1ᵀ + … + F_{L-1}F_{L-1}ᵀ + D` where each
//! `F_l` is block diagonal with respect to level `l` of a hierarchical
//! partition of the features. The crate provides linear-time inversion and
//! log-determinants, an expanded sparse Cholesky factorization, products of
//! MLR matrices, maximum likelihood fitting by EM and synthetic benchmarks.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cholesky;
pub mod em;
pub mod error;
pub mod inverse;
pub mod io;
pub mod linalg;
pub mod mlr;
pub mod partition;
pub mod product;
pub mod synth;

pub use cholesky::{factorize, factorize_with, ExpandedCholesky, PivotMode};
pub use em::{
    fit, fit_with_covariates, log_likelihood, Dataset, EmOptions, FitResult, FitStatus, FitTrace,
    Init,
};
pub use error::{MlrError, Result};
pub use inverse::{invert, invert_with_stats, InverseMlr, WorkspaceStats};
pub use mlr::{CompressedForm, PsdMlr, DEFAULT_DENSE_CAP};
pub use partition::{HierarchicalPartition, HierarchySpec, RankAllocation};
pub use product::{multiply, GeneralMlr};
pub use synth::{expected_ll, generate, SynthConfig, SyntheticModel};
