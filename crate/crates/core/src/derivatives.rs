//! Derivatives of the MME coefficient inverse C and of the BLUP MSE matrix
//! M = Lambda' C Lambda with respect to the variance components, plus the
//! covariance blocks that build the EBLUP MSE correction term.
//!
//! Components are indexed 0-based throughout: `comp` in `0..s` addresses the
//! random-effect variances, `comp == s` the error variance. Every derivative
//! of H is a scalar multiple of a fixed symmetric matrix Delta_comp: the
//! identity on random block `comp`, or H0 = W'W for the error component.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;
use crate::mme::{self, MmeSolution};
use crate::model::{ContrastSet, LmmSpec, VarComponents};

/// Largest tolerated value of max|AB - I| before the inverse-derivative
/// operators refuse to treat A as the inverse of B.
pub const INVERSE_CONSISTENCY_TOL: f64 = 1e-8;

/// Relative tolerance for the two independent evaluations of the MSE
/// correction term; disagreement beyond this is an internal defect.
pub const ROUTE_TOL: f64 = 1e-9;

fn check_inverse_pair(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    let defect = linalg::inverse_pair_defect(a, b);
    if !(defect <= INVERSE_CONSISTENCY_TOL) {
        return Err(Error::InconsistentInverse(defect));
    }
    Ok(())
}

/// First derivative of A = B^{-1}: -A B_i A.
pub fn d_op_first(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    b_i: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    check_inverse_pair(a, b)?;
    Ok(-(a * b_i * a))
}

/// Second derivative of A = B^{-1}: A (B_i A B_j + B_j A B_i - B_ij) A.
pub fn d_op_second(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    b_i: &DMatrix<f64>,
    b_j: &DMatrix<f64>,
    b_ij: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    check_inverse_pair(a, b)?;
    let s = b_i * a * b_j + b_j * a * b_i - b_ij;
    Ok(a * s * a)
}

/// The six derivatives of B that the third-order operator consumes, beyond
/// the first-order ones.
pub struct ThirdOrderInput<'m> {
    pub b_i: &'m DMatrix<f64>,
    pub b_j: &'m DMatrix<f64>,
    pub b_k: &'m DMatrix<f64>,
    pub b_ij: &'m DMatrix<f64>,
    pub b_ik: &'m DMatrix<f64>,
    pub b_jk: &'m DMatrix<f64>,
    pub b_ijk: &'m DMatrix<f64>,
}

/// Third derivative of A = B^{-1}, obtained by differentiating the
/// second-order operator once more:
///
///   A_ijk = -A S_ij A B_k A - A B_k A S_ij A
///           + A (B_ik A B_j + B_i A B_jk + B_jk A B_i + B_j A B_ik
///                - B_i A B_k A B_j - B_j A B_k A B_i - B_ijk) A,
///
/// with S_ij = B_i A B_j + B_j A B_i - B_ij.
pub fn d_op_third(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    d: &ThirdOrderInput<'_>,
) -> Result<DMatrix<f64>> {
    check_inverse_pair(a, b)?;
    let s_ij = d.b_i * a * d.b_j + d.b_j * a * d.b_i - d.b_ij;
    let asa = a * &s_ij * a;
    let inner = d.b_ik * a * d.b_j + d.b_i * a * d.b_jk + d.b_jk * a * d.b_i
        + d.b_j * a * d.b_ik
        - d.b_i * a * d.b_k * a * d.b_j
        - d.b_j * a * d.b_k * a * d.b_i
        - d.b_ijk;
    Ok(-(&asa * d.b_k * a) - (a * d.b_k * &asa) + a * inner * a)
}

/// Delta matrix for component `comp`: the (p+r) x (p+r) identity on random
/// block `comp`, or H0 = (X,Z)'(X,Z) when `comp == s`.
pub fn delta(spec: &LmmSpec, comp: usize) -> DMatrix<f64> {
    let layout = spec.layout();
    assert!(comp <= layout.s(), "component index out of range");
    if comp == layout.s() {
        return mme::assemble_h0(spec);
    }
    let t = layout.total();
    let mut d = DMatrix::zeros(t, t);
    let off = layout.random_offset(comp);
    for k in 0..layout.r_sizes[comp] {
        d[(off + k, off + k)] = 1.0;
    }
    d
}

/// Scalar multiple of Delta_comp that equals a pure derivative of H.
/// Mixed derivatives of H vanish, so (comp, coefficient) pairs describe the
/// whole derivative family.
#[derive(Debug, Clone)]
pub struct HDerivs {
    sigma2: Vec<f64>,
}

/// Derivative descriptors for the MME matrix H at the given components.
pub fn h_derivs(spec: &LmmSpec, vc: &VarComponents) -> Result<HDerivs> {
    vc.check_against(spec)?;
    Ok(HDerivs {
        sigma2: vc.as_slice().to_vec(),
    })
}

impl HDerivs {
    /// Coefficient of Delta_i in dH/d(sigma2_i): -1/sigma_i^4.
    pub fn first_coeff(&self, i: usize) -> f64 {
        let s2 = self.sigma2[i];
        -1.0 / (s2 * s2)
    }

    /// Coefficient of Delta_i in d2H/d(sigma2_i)2: 2/sigma_i^6. Mixed second
    /// derivatives are zero.
    pub fn second_coeff(&self, i: usize, j: usize) -> f64 {
        if i != j {
            return 0.0;
        }
        let s2 = self.sigma2[i];
        2.0 / (s2 * s2 * s2)
    }

    /// Coefficient of Delta_i in d3H/d(sigma2_i)3: -6/sigma_i^8. Any mixed
    /// third derivative is zero.
    pub fn third_coeff(&self, i: usize, j: usize, k: usize) -> f64 {
        if i != j || j != k {
            return 0.0;
        }
        let s2 = self.sigma2[i];
        -6.0 / (s2 * s2 * s2 * s2)
    }

    pub fn first(&self, spec: &LmmSpec, i: usize) -> DMatrix<f64> {
        delta(spec, i) * self.first_coeff(i)
    }

    pub fn second(&self, spec: &LmmSpec, i: usize, j: usize) -> DMatrix<f64> {
        if i != j {
            let t = spec.layout().total();
            return DMatrix::zeros(t, t);
        }
        delta(spec, i) * self.second_coeff(i, j)
    }

    pub fn third(&self, spec: &LmmSpec, i: usize, j: usize, k: usize) -> DMatrix<f64> {
        if i != j || j != k {
            let t = spec.layout().total();
            return DMatrix::zeros(t, t);
        }
        delta(spec, i) * self.third_coeff(i, j, k)
    }
}

/// First and second derivatives of C with respect to every variance
/// component, in closed form.
#[derive(Debug, Clone)]
pub struct CDerivs {
    /// first[i] = dC/d(sigma2_i) = C Delta_i C / sigma_i^4.
    pub first: Vec<DMatrix<f64>>,
    /// second[i][j] = d2C/d(sigma2_i)d(sigma2_j); full symmetric table.
    pub second: Vec<Vec<DMatrix<f64>>>,
}

/// Closed-form first and second derivatives of C at the components the
/// solution was built with.
pub fn c_derivs(sol: &MmeSolution) -> CDerivs {
    let spec = &sol.spec;
    let vc = &sol.sigma2_used;
    let nc = vc.len();
    let c = &sol.c;

    let deltas: Vec<DMatrix<f64>> = (0..nc).map(|i| delta(spec, i)).collect();
    let sigma2 = vc.as_slice();

    let first: Vec<DMatrix<f64>> = (0..nc)
        .map(|i| {
            let mut m = c * &deltas[i] * c / (sigma2[i] * sigma2[i]);
            linalg::symmetrize(&mut m);
            m
        })
        .collect();

    let t = spec.layout().total();
    let mut second = vec![vec![DMatrix::zeros(t, t); nc]; nc];
    for i in 0..nc {
        for j in i..nc {
            let mut m = if i == j {
                let di = &deltas[i];
                let core = di * c * di - di * sigma2[i];
                c * core * c * (2.0 / sigma2[i].powi(4))
            } else {
                let (di, dj) = (&deltas[i], &deltas[j]);
                let core = di * c * dj + dj * c * di;
                c * core * c / (sigma2[i] * sigma2[i] * sigma2[j] * sigma2[j])
            };
            linalg::symmetrize(&mut m);
            second[j][i] = m.clone();
            second[i][j] = m;
        }
    }

    CDerivs { first, second }
}

/// Third derivative of C for one index triple, assembled through the generic
/// operator route (no closed-form specialization). Requires H to be
/// numerically invertible; a g-inverse C fails the consistency check.
pub fn c_third_deriv(sol: &MmeSolution, i: usize, j: usize, k: usize) -> Result<DMatrix<f64>> {
    let spec = &sol.spec;
    let hd = h_derivs(spec, &sol.sigma2_used)?;
    let h = mme::assemble_h(spec, &sol.sigma2_used)?;
    let b_i = hd.first(spec, i);
    let b_j = hd.first(spec, j);
    let b_k = hd.first(spec, k);
    let b_ij = hd.second(spec, i, j);
    let b_ik = hd.second(spec, i, k);
    let b_jk = hd.second(spec, j, k);
    let b_ijk = hd.third(spec, i, j, k);
    d_op_third(
        &sol.c,
        &h,
        &ThirdOrderInput {
            b_i: &b_i,
            b_j: &b_j,
            b_k: &b_k,
            b_ij: &b_ij,
            b_ik: &b_ik,
            b_jk: &b_jk,
            b_ijk: &b_ijk,
        },
    )
}

/// Lambda-tilde = C Lambda together with the value, gradient, Hessian, and
/// correction term of the MSE matrix M = Lambda' C Lambda.
#[derive(Debug, Clone)]
pub struct DerivBundle {
    /// (p+r) x q solution of H Lambda~ = Lambda.
    pub lambda_tilde: DMatrix<f64>,
    /// M = Lambda' C Lambda, q x q.
    pub m: DMatrix<f64>,
    /// grad[i] = dM/d(sigma2_i), each q x q and PSD.
    pub grad: Vec<DMatrix<f64>>,
    /// hess[i][j] = d2M/d(sigma2_i)d(sigma2_j), symmetric in (i, j).
    pub hess: Vec<Vec<DMatrix<f64>>>,
    /// Sigma-weighted covariance correction sum_{ij} Sigma_ij CC_ij.
    pub m_delta: DMatrix<f64>,
    p: usize,
    r_sizes: Vec<usize>,
}

impl DerivBundle {
    /// Fixed-effect rows of Lambda~ (p x q).
    pub fn lambda_tilde_fixed(&self) -> DMatrix<f64> {
        self.lambda_tilde.rows(0, self.p).into_owned()
    }

    /// Rows of Lambda~ for random block `i` (r_i x q).
    pub fn lambda_tilde_random(&self, i: usize) -> DMatrix<f64> {
        let off = self.p + self.r_sizes[..i].iter().sum::<usize>();
        self.lambda_tilde.rows(off, self.r_sizes[i]).into_owned()
    }
}

/// N = C H_V C = blockdiag(C11, G - C22): the covariance of the stacked
/// sampling errors (b~ - b, u~) that the correction blocks contract against.
pub fn sampling_core(sol: &MmeSolution) -> DMatrix<f64> {
    let layout = sol.layout();
    let (p, r, t) = (layout.p, layout.r(), layout.total());
    let mut n = DMatrix::zeros(t, t);
    n.view_mut((0, 0), (p, p)).copy_from(&sol.c11());
    let g = sol.sigma2_used.g_diag(&layout);
    let mut lower = -sol.c22();
    for k in 0..r {
        lower[(k, k)] += g[k];
    }
    n.view_mut((p, p), (r, r)).copy_from(&lower);
    n
}

/// Covariance block CC_ij between the sigma2_i- and sigma2_j-gradients of
/// the prediction error w~ - w:
///
///   CC_ij = (Lt' D_i N D_j Lt - 1{i=e} s_e2 L' N D_j Lt
///            - 1{j=e} s_e2 Lt' D_i N L + 1{i=j=e} s_e4 L' N L)
///           / (sigma_i^2 sigma_j^2)^2,
///
/// where Lt = C Lambda, N = C H_V C, and e = s is the error component.
/// Not symmetric in (i, j) individually; the Sigma-weighted sum is.
pub fn cc_matrix(
    sol: &MmeSolution,
    lambda: &DMatrix<f64>,
    lambda_tilde: &DMatrix<f64>,
    n_core: &DMatrix<f64>,
    i: usize,
    j: usize,
) -> DMatrix<f64> {
    let layout = sol.layout();
    let s = layout.s();
    let sigma2 = sol.sigma2_used.as_slice();
    let s_e2 = sol.sigma2_used.error();

    // D_comp Lt: zero rows except random block comp, or H0 Lt for the error.
    let selected = |comp: usize| -> DMatrix<f64> {
        if comp == s {
            mme::assemble_h0(&sol.spec) * lambda_tilde
        } else {
            let mut out = DMatrix::zeros(layout.total(), lambda_tilde.ncols());
            let off = layout.random_offset(comp);
            let rows = layout.r_sizes[comp];
            out.rows_mut(off, rows)
                .copy_from(&lambda_tilde.rows(off, rows));
            out
        }
    };

    let sel_i = selected(i);
    let sel_j = selected(j);
    let mut acc = sel_i.transpose() * n_core * &sel_j;
    if i == s {
        acc -= lambda.transpose() * n_core * &sel_j * s_e2;
    }
    if j == s {
        acc -= sel_i.transpose() * n_core * lambda * s_e2;
    }
    if i == s && j == s {
        acc += lambda.transpose() * n_core * lambda * (s_e2 * s_e2);
    }
    acc / (sigma2[i] * sigma2[i] * sigma2[j] * sigma2[j])
}

fn validate_sigma(sigma: &DMatrix<f64>, nc: usize) -> Result<()> {
    if sigma.nrows() != nc || sigma.ncols() != nc {
        return Err(Error::DimensionMismatch(format!(
            "Sigma must be {nc} x {nc}, got {} x {}",
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    let scale = 1.0 + sigma.amax();
    let skew = (sigma - sigma.transpose()).amax();
    if skew > 1e-8 * scale {
        return Err(Error::InvalidArgument(format!(
            "Sigma must be symmetric; max asymmetry {skew:.3e}"
        )));
    }
    Ok(())
}

/// Builds the full derivative bundle for the MSE matrix of the BLUP of
/// w = Lambda'(b', u')' at the solution's variance components, with `sigma`
/// the (s+1) x (s+1) covariance of the variance-component estimator.
///
/// The correction term is evaluated through two algebraically equal routes,
/// the covariance blocks CC_ij and -1/2 sum Sigma_ij M_ij; a mismatch beyond
/// `ROUTE_TOL` is reported as a defect rather than silently averaged.
pub fn mse_bundle(
    sol: &MmeSolution,
    contrast: &ContrastSet,
    sigma: &DMatrix<f64>,
) -> Result<DerivBundle> {
    contrast.check_against(&sol.spec)?;
    crate::model::require_estimable(&contrast.k, &sol.spec.x)?;
    let nc = sol.sigma2_used.len();
    validate_sigma(sigma, nc)?;

    let layout = sol.layout();
    let s = layout.s();
    let q = contrast.q();
    let sigma2 = sol.sigma2_used.as_slice();
    let lambda = contrast.lambda();
    let lambda_tilde = &sol.c * &lambda;

    let mut m = lambda.transpose() * &lambda_tilde;
    linalg::symmetrize(&mut m);

    let lt_block = |i: usize| -> DMatrix<f64> {
        let off = layout.random_offset(i);
        lambda_tilde.rows(off, layout.r_sizes[i]).into_owned()
    };

    let h0 = mme::assemble_h0(&sol.spec);
    let h0_lt = &h0 * &lambda_tilde;

    // Gradient: scaled Gram matrices, PSD by construction.
    let mut grad = Vec::with_capacity(nc);
    for (i, s2) in sigma2.iter().enumerate().take(s) {
        let li = lt_block(i);
        let mut g = li.transpose() * &li / (s2 * s2);
        linalg::symmetrize(&mut g);
        grad.push(g);
    }
    {
        let s_e2 = sol.sigma2_used.error();
        let mut g = lambda_tilde.transpose() * &h0_lt / (s_e2 * s_e2);
        linalg::symmetrize(&mut g);
        grad.push(g);
    }

    // Hessian blocks from the C blocks; upper triangle then mirror.
    let mut hess = vec![vec![DMatrix::zeros(q, q); nc]; nc];
    for i in 0..nc {
        for j in i..nc {
            let mut blk = if i < s && j < s {
                if i == j {
                    let li = lt_block(i);
                    let cii = sol.c_random_block(i, i);
                    (li.transpose() * cii * &li - li.transpose() * &li * sigma2[i])
                        * (2.0 / sigma2[i].powi(4))
                } else {
                    let li = lt_block(i);
                    let lj = lt_block(j);
                    let cij = sol.c_random_block(i, j);
                    let half = li.transpose() * cij * &lj;
                    (&half + half.transpose())
                        / (sigma2[i] * sigma2[i] * sigma2[j] * sigma2[j])
                }
            } else if i < s && j == s {
                let li = lt_block(i);
                let ci_rows = sol.c_row_block(i);
                let half = li.transpose() * ci_rows * &h0_lt;
                (&half + half.transpose()) / (sigma2[i] * sigma2[i] * sigma2[j] * sigma2[j])
            } else {
                // i == j == s: error-error block.
                let s_e2 = sol.sigma2_used.error();
                (h0_lt.transpose() * &sol.c * &h0_lt - lambda_tilde.transpose() * &h0_lt * s_e2)
                    * (2.0 / s_e2.powi(4))
            };
            linalg::symmetrize(&mut blk);
            hess[j][i] = blk.clone();
            hess[i][j] = blk;
        }
    }

    // Correction term through both routes. Roundoff in either route scales
    // with the weighted summands rather than the (possibly cancelling) sum,
    // so the agreement gate is relative to the accumulated term magnitude.
    let n_core = sampling_core(sol);
    let mut via_cc = DMatrix::zeros(q, q);
    let mut term_scale = 0.0f64;
    for i in 0..nc {
        for j in 0..nc {
            if sigma[(i, j)] == 0.0 {
                continue;
            }
            let term = cc_matrix(sol, &lambda, &lambda_tilde, &n_core, i, j) * sigma[(i, j)];
            term_scale += term.amax();
            via_cc += term;
        }
    }
    linalg::symmetrize(&mut via_cc);

    let mut via_hess = DMatrix::zeros(q, q);
    for i in 0..nc {
        for j in 0..nc {
            if sigma[(i, j)] == 0.0 {
                continue;
            }
            via_hess += &hess[i][j] * (-0.5 * sigma[(i, j)]);
        }
    }

    // The identity behind the two routes holds exactly for the true C; the
    // computed one carries a residual that grows with the conditioning of
    // the system, so the defect gate scales with an estimate of kappa(H).
    // A formula defect shows up as an O(1) relative disagreement and is
    // caught at any conditioning.
    let h_mat = mme::assemble_h(&sol.spec, &sol.sigma2_used)?;
    let kappa_est = (h_mat.amax() * sol.c.amax()).max(1.0);
    let diff = (&via_cc - &via_hess).amax();
    let tol = ROUTE_TOL * kappa_est * (1.0 + term_scale);
    if diff > tol {
        return Err(Error::RouteDisagreement {
            context: "EBLUP MSE correction (covariance blocks vs Hessian sum)",
            diff,
            tol,
        });
    }

    Ok(DerivBundle {
        lambda_tilde,
        m,
        grad,
        hess,
        m_delta: via_cc,
        p: layout.p,
        r_sizes: layout.r_sizes,
    })
}

/// Checks the cross-derivative identities M_ii = -2 CC_ii and
/// M_ij = -(CC_ij + CC_ji) entrywise to 1e-9 on this instance.
pub fn cross_derivative_identity_check(sol: &MmeSolution, contrast: &ContrastSet) -> Result<bool> {
    let nc = sol.sigma2_used.len();
    let sigma = DMatrix::identity(nc, nc);
    let bundle = mse_bundle(sol, contrast, &sigma)?;
    let lambda = contrast.lambda();
    let n_core = sampling_core(sol);

    let mut ok = true;
    for i in 0..nc {
        for j in 0..nc {
            let cij = cc_matrix(sol, &lambda, &bundle.lambda_tilde, &n_core, i, j);
            let cji = cc_matrix(sol, &lambda, &bundle.lambda_tilde, &n_core, j, i);
            // M_ij = -(CC_ij + CC_ji); at i == j this is the -2 CC_ii form.
            let rhs = -(cij + cji);
            let lhs = &bundle.hess[i][j];
            let scale = 1.0 + lhs.amax().max(rhs.amax());
            if (lhs - rhs).amax() > 1e-9 * scale {
                ok = false;
            }
        }
    }
    Ok(ok)
}
