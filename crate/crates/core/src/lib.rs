//! Linear mixed models with diagonal covariance structure, fitted through
//! Henderson's mixed model equations.
//!
//! The model is `y = Xb + Z1 u1 + ... + Zs us + e` where each random block
//! `ui` has dispersion `sigma2_i * I` and the residual has dispersion
//! `sigma2_{s+1} * I`. Everything downstream of that single n x n dispersion
//! matrix `V = sum_i sigma2_i Zi Zi' + sigma2_{s+1} I` is computed from the
//! much smaller mixed-model-equation coefficient matrix and its g-inverse:
//! variance component estimation (ML, REML, MINQE), best linear unbiased
//! estimation and prediction, the bias-corrected MSE of EBLUP, and
//! small-sample degrees-of-freedom methods (Satterthwaite, Fai-Cornelius,
//! generalized Kenward-Roger, exact chi-square pivots).

// Guard clauses are written `!(x <= tol)` on purpose: NaN fails every
// comparison, so this form routes NaN into the error branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod derivatives;
pub mod dist;
pub mod error;
pub mod inference;
pub mod linalg;
pub mod mc;
pub mod mme;
pub mod model;
pub mod sim;
pub mod varcomp;

pub use error::{Error, Result};
pub use model::{ContrastSet, LmmSpec, VarComponents};
