//! Variance component estimation and the associated information quantities.
//!
//! ML and REML use the classical fixed-point recursions driven by repeated
//! MME solves: each sweep updates `sigma2_i` from the predicted random
//! effects and a trace of the iteration matrix (W for ML, T for REML), and
//! the error variance from the inner product of the data with the fitted
//! residual. Both iteration matrices live on the r x r scale, never n x n:
//!
//! ```text
//! W = s2 (s2 I_r + Z'Z G)^{-1},   T = s2 (s2 I_r + M G)^{-1},
//! M = Z'Z - Z'X (X'X)^- X'Z.
//! ```
//!
//! MINQE(I) and MINQE(U,I) are one-shot solves of `H sigma2 = q` at a prior,
//! with H twice the corresponding Fisher matrix; iterating MINQE(U,I) to a
//! fixed point reproduces REML, which the tests pin down.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::mme::{self, MmeSolution};
use crate::model::{LmmSpec, VarComponents};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VcMethod {
    Ml,
    Reml,
    MinqeI,
    MinqeUI,
}

impl std::fmt::Display for VcMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            VcMethod::Ml => write!(f, "ML"),
            VcMethod::Reml => write!(f, "REML"),
            VcMethod::MinqeI => write!(f, "MINQE(I)"),
            VcMethod::MinqeUI => write!(f, "MINQE(U,I)"),
        }
    }
}

/// Non-fatal conditions recorded during estimation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FitWarning {
    /// A variance iterate fell below the floor and was clamped.
    BoundaryClamped { component: usize },
    /// The Fisher matrix at the estimate is singular or too ill-conditioned
    /// to invert reliably; the covariance of the estimate is withheld.
    SingularFisher,
    /// The MINQE system was singular; the minimum-norm solution was taken.
    NonUniqueMinqe,
    /// An update denominator r_i - tr(block) was not safely positive.
    UnstableDenominator { component: usize },
    /// The iteration budget ran out before the update step shrank below eps.
    MaxIterReached { max_iter: usize },
}

impl std::fmt::Display for FitWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FitWarning::BoundaryClamped { component } => write!(
                f,
                "variance component {} hit the positivity floor",
                component + 1
            ),
            FitWarning::SingularFisher => {
                write!(f, "Fisher information is singular at the estimate; model may be non-identifiable")
            }
            FitWarning::NonUniqueMinqe => {
                write!(f, "MINQE system singular; minimum-norm solution reported")
            }
            FitWarning::UnstableDenominator { component } => write!(
                f,
                "update denominator for component {} was near zero",
                component + 1
            ),
            FitWarning::MaxIterReached { max_iter } => {
                write!(f, "no convergence within {max_iter} iterations")
            }
        }
    }
}

/// Result of a variance-component fit.
#[derive(Debug, Clone)]
pub struct VcEstimate {
    pub method: VcMethod,
    pub sigma2_hat: VarComponents,
    /// Fisher information at the estimate (ML/REML), or the MINQE matrix
    /// H = 2 * Fisher at the prior (MINQE variants).
    pub fisher: DMatrix<f64>,
    /// Inverse of `fisher` when it is safely invertible.
    pub sigma_cov_hat: Option<DMatrix<f64>>,
    /// Log-likelihood (ML) or restricted log-likelihood (REML) at the
    /// estimate; absent for MINQE.
    pub loglik: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub warnings: Vec<FitWarning>,
    /// Log-likelihood at the start value and after each sweep; monotone
    /// non-decreasing in exact arithmetic for these recursions.
    pub loglik_trace: Vec<f64>,
    pub solution: MmeSolution,
}

/// Iteration controls. `start = None` uses Var(y)/(s+1) for every
/// component.
#[derive(Debug, Clone)]
pub struct EstimateOpts {
    pub start: Option<Vec<f64>>,
    pub eps: f64,
    pub max_iter: usize,
}

impl Default for EstimateOpts {
    fn default() -> Self {
        EstimateOpts {
            start: None,
            eps: 1e-8,
            max_iter: 500,
        }
    }
}

/// Sample variance with the n-1 denominator; falls back to 1 for
/// degenerate input so start values and floors stay positive.
fn sample_variance(y: &DVector<f64>) -> f64 {
    let n = y.len();
    let mean = y.sum() / n as f64;
    let ss: f64 = y.iter().map(|&v| (v - mean) * (v - mean)).sum();
    let var = ss / (n as f64 - 1.0);
    if var.is_finite() && var > 0.0 {
        var
    } else {
        1.0
    }
}

/// `s2 (s2 I_r + Z'Z G)^{-1}`, the ML iteration matrix.
pub fn w_matrix(spec: &LmmSpec, vc: &VarComponents) -> Result<DMatrix<f64>> {
    let z = spec.z_concat();
    let ztz = z.transpose() * &z;
    iteration_matrix(spec, vc, ztz)
}

/// `s2 (s2 I_r + M G)^{-1}`, the REML iteration matrix.
pub fn t_matrix(spec: &LmmSpec, vc: &VarComponents) -> Result<DMatrix<f64>> {
    iteration_matrix(spec, vc, mme::m_matrix(spec))
}

fn iteration_matrix(
    spec: &LmmSpec,
    vc: &VarComponents,
    core: DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    vc.check_against(spec)?;
    let layout = spec.layout();
    let r = layout.r();
    let s2 = vc.error();
    let g = vc.g_diag(&layout);
    let mut a = core;
    for j in 0..r {
        let gj = g[j];
        for i in 0..r {
            a[(i, j)] *= gj;
        }
    }
    for j in 0..r {
        a[(j, j)] += s2;
    }
    let inv = linalg::lu_solve(&a, &DMatrix::identity(r, r))
        .ok_or_else(|| Error::Singular("iteration matrix s2 I + (core) G is singular".into()))?;
    Ok(inv * s2)
}

/// log det(s2 I_r + core G); shared by both likelihood identities.
fn log_det_shifted(spec: &LmmSpec, vc: &VarComponents, core: DMatrix<f64>) -> Result<f64> {
    let layout = spec.layout();
    let r = layout.r();
    let s2 = vc.error();
    let g = vc.g_diag(&layout);
    let mut a = core;
    for j in 0..r {
        let gj = g[j];
        for i in 0..r {
            a[(i, j)] *= gj;
        }
    }
    for j in 0..r {
        a[(j, j)] += s2;
    }
    linalg::log_det(&a).ok_or_else(|| Error::Singular("shifted design cross-product has nonpositive determinant".into()))
}

/// Gaussian log-likelihood of the model at (b_tilde(vc), V(vc)). Uses the
/// determinant identity det V = s2^(n-r) det(s2 I_r + Z'Z G) and the
/// quadratic-form identity (y - Xb)'V^{-1}(y - Xb) = y'(fitted residual)/s2,
/// so nothing n x n is ever formed.
pub fn loglik_ml(spec: &LmmSpec, y: &DVector<f64>, vc: &VarComponents) -> Result<f64> {
    let sol = mme::solve_mme_with_y(spec, vc, y)?;
    let n = spec.n() as f64;
    let r = spec.r() as f64;
    let s2 = vc.error();
    let z = spec.z_concat();
    let log_det_v = (n - r) * s2.ln() + log_det_shifted(spec, vc, z.transpose() * &z)?;
    let quad = y.dot(&residual_for(spec, &sol, y)) / s2;
    Ok(-0.5 * (n * (2.0 * std::f64::consts::PI).ln() + log_det_v + quad))
}

/// Restricted log-likelihood: the Gaussian log-density of any full-rank set
/// of error contrasts B'y with B B' = I - X(X'X)^- X'. Evaluated through
/// det(B'VB) = s2^(n - rx - r) det(s2 I_r + M G) and y'Py = y'(residual)/s2;
/// B itself is never materialized.
pub fn loglik_reml(spec: &LmmSpec, y: &DVector<f64>, vc: &VarComponents) -> Result<f64> {
    let rx = linalg::rank(&spec.x, 1e-10);
    let n = spec.n();
    if rx >= n {
        return Err(Error::Degenerate(
            "X spans the whole sample space; no error contrasts remain for REML".into(),
        ));
    }
    let sol = mme::solve_mme_with_y(spec, vc, y)?;
    let nf = (n - rx) as f64;
    let r = spec.r() as f64;
    let s2 = vc.error();
    let log_det_bvb = (nf - r) * s2.ln() + log_det_shifted(spec, vc, mme::m_matrix(spec))?;
    let quad = y.dot(&residual_for(spec, &sol, y)) / s2;
    Ok(-0.5 * (nf * (2.0 * std::f64::consts::PI).ln() + log_det_bvb + quad))
}

fn residual_for(spec: &LmmSpec, sol: &MmeSolution, y: &DVector<f64>) -> DVector<f64> {
    let mut fitted = &spec.x * &sol.b_tilde;
    let mut off = 0;
    for z in &spec.z_blocks {
        fitted += z * sol.u_tilde.rows(off, z.ncols());
        off += z.ncols();
    }
    y - fitted
}

/// Trace of the (i, i) diagonal block of an r x r matrix.
fn block_trace(a: &DMatrix<f64>, offset: usize, len: usize) -> f64 {
    (0..len).map(|k| a[(offset + k, offset + k)]).sum()
}

/// tr(A_ij A_ji) for blocks of an r x r matrix.
fn block_pair_trace(
    a: &DMatrix<f64>,
    off_i: usize,
    len_i: usize,
    off_j: usize,
    len_j: usize,
) -> f64 {
    let mut t = 0.0;
    for u in 0..len_i {
        for v in 0..len_j {
            t += a[(off_i + u, off_j + v)] * a[(off_j + v, off_i + u)];
        }
    }
    t
}

/// Fisher information of the ML problem, built from the blocks of W.
/// Entry (i, j), i, j <= s-1:         [d_ij (r_i - 2 tr W_ii) + tr(W_ij W_ji)] / (2 s_i^2 s_j^2)
/// Entry (i, s) (error column):       [tr W_ii - sum_j tr(W_ij W_ji)] / (2 s_i^2 s2^2)... via the block sums
/// Entry (s, s):                      [n - r + tr(W W)] / (2 s2^2 s2^2 scale) as below.
pub fn fisher_ml(spec: &LmmSpec, vc: &VarComponents) -> Result<DMatrix<f64>> {
    let w = w_matrix(spec, vc)?;
    fisher_from_iteration_matrix(spec, vc, &w, spec.n() as f64)
}

/// Fisher information of the REML problem: same block structure with T in
/// place of W and n replaced by n - rank(X).
pub fn fisher_reml(spec: &LmmSpec, vc: &VarComponents) -> Result<DMatrix<f64>> {
    let t = t_matrix(spec, vc)?;
    let rx = linalg::rank(&spec.x, 1e-10);
    fisher_from_iteration_matrix(spec, vc, &t, (spec.n() - rx) as f64)
}

fn fisher_from_iteration_matrix(
    spec: &LmmSpec,
    vc: &VarComponents,
    w: &DMatrix<f64>,
    effective_n: f64,
) -> Result<DMatrix<f64>> {
    let layout = spec.layout();
    let s = layout.s();
    let r = layout.r() as f64;
    let s2_err = vc.error();
    let mut info = DMatrix::zeros(s + 1, s + 1);

    for i in 0..s {
        let off_i = layout.within_r_offset(i);
        let len_i = layout.r_sizes[i];
        let tr_wii = block_trace(w, off_i, len_i);
        let mut sum_pair = 0.0;
        for j in 0..s {
            let off_j = layout.within_r_offset(j);
            let len_j = layout.r_sizes[j];
            let pair = block_pair_trace(w, off_i, len_i, off_j, len_j);
            sum_pair += pair;
            let mut val = pair;
            if i == j {
                val += len_i as f64 - 2.0 * tr_wii;
            }
            info[(i, j)] = 0.5 * val / (vc.random(i) * vc.random(j));
        }
        let cross = 0.5 * (tr_wii - sum_pair) / (vc.random(i) * s2_err);
        info[(i, s)] = cross;
        info[(s, i)] = cross;
    }

    let tr_w2 = (w * w).trace();
    info[(s, s)] = 0.5 * (effective_n - r + tr_w2) / (s2_err * s2_err);
    linalg::symmetrize(&mut info);
    Ok(info)
}

/// The MINQE coefficient matrix: 2 * I_ML at the prior for MINQE(I), 2 *
/// I_REML for MINQE(U,I).
pub fn minqe_h_matrix(spec: &LmmSpec, prior: &VarComponents, kind: VcMethod) -> Result<DMatrix<f64>> {
    match kind {
        VcMethod::MinqeI => Ok(fisher_ml(spec, prior)? * 2.0),
        VcMethod::MinqeUI => Ok(fisher_reml(spec, prior)? * 2.0),
        _ => Err(Error::InvalidArgument(
            "minqe_h_matrix requires a MINQE method".into(),
        )),
    }
}

/// The MINQE natural statistic: q_i = u_i'u_i / (prior_i)^2 for the random
/// components and q_{s+1} = |residual|^2 / (prior_err)^2.
pub fn minqe_q_vector(spec: &LmmSpec, y: &DVector<f64>, prior: &VarComponents) -> Result<DVector<f64>> {
    let sol = mme::solve_mme_with_y(spec, prior, y)?;
    let s = spec.s();
    let mut q = DVector::zeros(s + 1);
    for i in 0..s {
        let ui = sol.u_tilde_block(i);
        q[i] = ui.dot(&ui) / (prior.random(i) * prior.random(i));
    }
    let resid = residual_for(spec, &sol, y);
    q[s] = resid.dot(&resid) / (prior.error() * prior.error());
    Ok(q)
}

/// One-shot MINQE at a prior: solve H sigma2 = q, minimum-norm when H is
/// singular. Estimates are floored to stay in the parameter space (MINQE
/// can produce nonpositive components on unlucky data).
pub fn minqe(
    spec: &LmmSpec,
    y: &DVector<f64>,
    prior: &VarComponents,
    kind: VcMethod,
) -> Result<VcEstimate> {
    if !matches!(kind, VcMethod::MinqeI | VcMethod::MinqeUI) {
        return Err(Error::InvalidArgument("minqe requires MINQE(I) or MINQE(U,I)".into()));
    }
    prior.check_against(spec)?;
    let h = minqe_h_matrix(spec, prior, kind)?;
    let q = minqe_q_vector(spec, y, prior)?;
    let (h_pinv, rank) = linalg::sym_pinv(&h);
    let raw = &h_pinv * &q;

    let mut warnings = Vec::new();
    if rank < h.nrows() {
        warnings.push(FitWarning::NonUniqueMinqe);
    }
    let floor = 1e-10 * sample_variance(y);
    let mut vals = Vec::with_capacity(raw.len());
    for (i, &v) in raw.iter().enumerate() {
        if v < floor {
            warnings.push(FitWarning::BoundaryClamped { component: i });
            vals.push(floor);
        } else {
            vals.push(v);
        }
    }
    let sigma2_hat = VarComponents::new(vals)?;
    let sigma_cov_hat = linalg::sym_inv_checked(&h);
    if sigma_cov_hat.is_none() {
        warnings.push(FitWarning::SingularFisher);
    }
    let solution = mme::solve_mme_with_y(spec, &sigma2_hat, y)?;
    Ok(VcEstimate {
        method: kind,
        sigma2_hat,
        fisher: h,
        sigma_cov_hat,
        loglik: None,
        iterations: 1,
        converged: true,
        warnings,
        loglik_trace: Vec::new(),
        solution,
    })
}

/// Maximum likelihood fit by the W-matrix fixed-point recursion.
pub fn estimate_ml(spec: &LmmSpec, y: &DVector<f64>, opts: &EstimateOpts) -> Result<VcEstimate> {
    estimate_iterative(spec, y, opts, VcMethod::Ml)
}

/// REML fit by the T-matrix fixed-point recursion.
pub fn estimate_reml(spec: &LmmSpec, y: &DVector<f64>, opts: &EstimateOpts) -> Result<VcEstimate> {
    estimate_iterative(spec, y, opts, VcMethod::Reml)
}

fn estimate_iterative(
    spec: &LmmSpec,
    y: &DVector<f64>,
    opts: &EstimateOpts,
    method: VcMethod,
) -> Result<VcEstimate> {
    spec.validate()?;
    let s = spec.s();
    let layout = spec.layout();
    let n = spec.n();
    let rx = linalg::rank(&spec.x, 1e-10);
    let error_denominator = match method {
        VcMethod::Ml => n as f64,
        VcMethod::Reml => {
            if rx >= n {
                return Err(Error::Degenerate(
                    "X spans the whole sample space; REML denominator n - rank(X) is zero".into(),
                ));
            }
            (n - rx) as f64
        }
        _ => return Err(Error::InvalidArgument("iterative fit requires ML or REML".into())),
    };

    let var_y = sample_variance(y);
    let floor = 1e-10 * var_y;
    let start_vals = match &opts.start {
        Some(v) => v.clone(),
        None => vec![var_y / (s as f64 + 1.0); s + 1],
    };
    let mut current = VarComponents::new(start_vals)?;
    current.check_against(spec)?;
    if opts.eps <= 0.0 || opts.max_iter == 0 {
        return Err(Error::InvalidArgument("eps must be positive and max_iter nonzero".into()));
    }

    let loglik_at = |vc: &VarComponents| -> Result<f64> {
        match method {
            VcMethod::Ml => loglik_ml(spec, y, vc),
            VcMethod::Reml => loglik_reml(spec, y, vc),
            _ => unreachable!(),
        }
    };

    let mut warnings: Vec<FitWarning> = Vec::new();
    let mut loglik_trace = vec![loglik_at(&current)?];
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..opts.max_iter {
        let sol = mme::solve_mme_with_y(spec, &current, y)?;
        let iter_mat = match method {
            VcMethod::Ml => w_matrix(spec, &current)?,
            VcMethod::Reml => t_matrix(spec, &current)?,
            _ => unreachable!(),
        };

        let mut next = Vec::with_capacity(s + 1);
        for i in 0..s {
            let off = layout.within_r_offset(i);
            let len = layout.r_sizes[i];
            let ui = sol.u_tilde_block(i);
            let mut denom = len as f64 - block_trace(&iter_mat, off, len);
            if denom <= 1e-12 * len as f64 {
                if !warnings.contains(&FitWarning::UnstableDenominator { component: i }) {
                    warnings.push(FitWarning::UnstableDenominator { component: i });
                }
                denom = 1e-12 * len as f64;
            }
            next.push(ui.dot(&ui) / denom);
        }
        let resid = residual_for(spec, &sol, y);
        next.push(y.dot(&resid) / error_denominator);

        for (i, v) in next.iter_mut().enumerate() {
            if *v < floor {
                *v = floor;
                if !warnings.contains(&FitWarning::BoundaryClamped { component: i }) {
                    warnings.push(FitWarning::BoundaryClamped { component: i });
                }
            }
        }

        let diff = next
            .iter()
            .zip(current.as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        current = VarComponents::new(next)?;
        iterations += 1;
        loglik_trace.push(loglik_at(&current)?);
        if diff < opts.eps {
            converged = true;
            break;
        }
    }

    if !converged {
        warnings.push(FitWarning::MaxIterReached {
            max_iter: opts.max_iter,
        });
    }

    let fisher = match method {
        VcMethod::Ml => fisher_ml(spec, &current)?,
        VcMethod::Reml => fisher_reml(spec, &current)?,
        _ => unreachable!(),
    };
    let sigma_cov_hat = linalg::sym_inv_checked(&fisher);
    if sigma_cov_hat.is_none() {
        warnings.push(FitWarning::SingularFisher);
    }
    let loglik = Some(*loglik_trace.last().expect("trace nonempty"));
    let solution = mme::solve_mme_with_y(spec, &current, y)?;

    Ok(VcEstimate {
        method,
        sigma2_hat: current,
        fisher,
        sigma_cov_hat,
        loglik,
        iterations,
        converged,
        warnings,
        loglik_trace,
        solution,
    })
}
