//! Small-sample inference for w = K'b + L'u: exact chi-square pivots for
//! known variance components, Satterthwaite and Fai-Cornelius denominator
//! degrees of freedom, and a Kenward-Roger style scale-and-df method built
//! on the bias-corrected EBLUP MSE matrix. All approximate methods consume
//! the covariance of the variance-component estimator (inverse Fisher
//! information) produced by the fitting routines.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::derivatives::{self, DerivBundle};
use crate::dist;
use crate::error::{Error, Result};
use crate::linalg;
use crate::mme::{self, MmeSolution};
use crate::model::ContrastSet;

/// Denominator degrees of freedom; the infinite case switches every tail
/// and quantile to the chi-square limit of the F distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Df {
    Finite(f64),
    Infinite,
}

impl Df {
    pub fn value(&self) -> f64 {
        match self {
            Df::Finite(v) => *v,
            Df::Infinite => f64::INFINITY,
        }
    }

    pub fn is_finite(&self) -> bool {
        matches!(self, Df::Finite(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KrVariant {
    Plain,
    Modified,
}

/// Inference method selector for the one-stop driver.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    ExactChiSquare,
    Satterthwaite,
    FaiCornelius,
    KenwardRoger(KrVariant),
}

/// Conditions worth surfacing that do not invalidate the result.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InferenceFlag {
    /// The Satterthwaite formula produced df in (0, 1); reported as 1.
    DfFlooredAtOne,
    /// The moment match produced nonpositive df; reported as infinite.
    InfiniteDfClamped,
    /// Tiny negative eigenvalues of the adjusted MSE were clipped to zero.
    MseRepaired,
}

impl std::fmt::Display for InferenceFlag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InferenceFlag::DfFlooredAtOne => {
                write!(f, "degrees of freedom below 1 floored at 1")
            }
            InferenceFlag::InfiniteDfClamped => {
                write!(f, "nonpositive moment-matched df reported as infinite")
            }
            InferenceFlag::MseRepaired => {
                write!(f, "adjusted MSE had tiny negative eigenvalues clipped to zero")
            }
        }
    }
}

/// Satterthwaite denominator df for a single contrast.
#[derive(Debug, Clone, Copy)]
pub struct SatterthwaiteDf {
    pub nu: f64,
    pub floored: bool,
}

/// Fai-Cornelius df for a q-dimensional contrast set.
#[derive(Debug, Clone)]
pub struct FcDdf {
    pub nu: f64,
    /// Per-eigencolumn Satterthwaite dfs, in descending-eigenvalue order.
    pub column_dfs: Vec<f64>,
    /// E = sum of nu_i/(nu_i - 2) over columns with nu_i > 2.
    pub e_sum: f64,
    pub any_column_floored: bool,
}

/// Bias-corrected EBLUP MSE matrix, with a note when PSD repair ran.
#[derive(Debug, Clone)]
pub struct AdjustedMse {
    pub matrix: DMatrix<f64>,
    pub repaired: bool,
}

/// Scale and denominator df of the moment-matched F approximation, plus the
/// intermediate moments for diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct KrEstimates {
    pub kappa: f64,
    pub nu: Df,
    /// E-hat (plain) or E-hat-star (modified).
    pub e_factor: f64,
    pub a1: f64,
    pub a2: f64,
    pub b_factor: f64,
    pub rho: f64,
    pub clamped_infinite: bool,
}

/// Confidence/prediction ellipsoid {w : (w - center)' shape^{-1} (w - center)
/// <= radius2}.
#[derive(Debug, Clone)]
pub struct EllipsoidRegion {
    pub center: DVector<f64>,
    pub shape: DMatrix<f64>,
    pub radius2: f64,
}

impl EllipsoidRegion {
    pub fn contains(&self, w0: &DVector<f64>) -> Result<bool> {
        let d = w0 - &self.center;
        Ok(quad_solve_pd(&self.shape, &d)? <= self.radius2)
    }
}

/// Scalar t statistic with its two-sided p-value and confidence interval.
#[derive(Debug, Clone, Copy)]
pub struct TStat {
    pub t: f64,
    pub p: f64,
    pub interval: (f64, f64),
}

/// Everything one inference run produces. `statistic` is the chi-square
/// pivot Q for the exact method and the Wald-type F otherwise.
#[derive(Debug, Clone)]
pub struct InferenceResult {
    pub method: Method,
    pub w_hat: DVector<f64>,
    pub w0: DVector<f64>,
    pub mse_used: DMatrix<f64>,
    pub statistic: f64,
    pub df1: usize,
    pub df2: Df,
    pub kappa: f64,
    pub p_value: f64,
    pub level: f64,
    /// Two-sided interval for q = 1 contrasts.
    pub interval: Option<(f64, f64)>,
    pub region: EllipsoidRegion,
    pub flags: Vec<InferenceFlag>,
}

fn quad_solve_pd(m: &DMatrix<f64>, d: &DVector<f64>) -> Result<f64> {
    let chol = Cholesky::new(m.clone()).ok_or_else(|| {
        Error::Singular("MSE matrix is not positive definite".into())
    })?;
    Ok(d.dot(&chol.solve(d)))
}

fn check_level(level: f64) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "confidence level must be in (0, 1), got {level}"
        )));
    }
    Ok(())
}

fn check_kappa(kappa: f64) -> Result<()> {
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "scale factor must be positive and finite, got {kappa}"
        )));
    }
    Ok(())
}

/// Upper tail of the scaled Wald statistic: P(F_{q,nu} > kappa f), or the
/// chi-square limit P(chi2_q > q kappa f) at infinite df.
pub fn scaled_f_tail(q: usize, kappa: f64, nu: Df, f: f64) -> f64 {
    match nu {
        Df::Finite(v) => dist::f_tail(q as f64, v, kappa * f),
        Df::Infinite => dist::chi_square_tail(q as f64, q as f64 * kappa * f),
    }
}

/// Exact pivot for known variance components:
/// Q = (w~ - w0)' (Lambda' C Lambda)^{-1} (w~ - w0), Q ~ chi2_q.
pub fn exact_chisq_pivot(
    sol: &MmeSolution,
    contrast: &ContrastSet,
    w0: &DVector<f64>,
) -> Result<(f64, f64)> {
    let w_tilde = mme::blup(sol, contrast)?;
    if w0.len() != w_tilde.len() {
        return Err(Error::DimensionMismatch(format!(
            "w0 has length {} but the contrast produces {}",
            w0.len(),
            w_tilde.len()
        )));
    }
    let m = mme::mse_blup(sol, contrast)?;
    let q_stat = quad_solve_pd(&m, &(w_tilde - w0))?;
    let p = dist::chi_square_tail(contrast.q() as f64, q_stat);
    Ok((q_stat, p))
}

/// Satterthwaite df for a scalar contrast: nu = 2 M^2 / (g' Sigma g), with
/// g the gradient of M = lambda' C lambda in the variance components.
pub fn satterthwaite_df(bundle: &DerivBundle, sigma: &DMatrix<f64>) -> Result<SatterthwaiteDf> {
    if bundle.m.nrows() != 1 {
        return Err(Error::InvalidArgument(format!(
            "Satterthwaite df needs a single contrast, got q = {}",
            bundle.m.nrows()
        )));
    }
    let nc = bundle.grad.len();
    if sigma.nrows() != nc || sigma.ncols() != nc {
        return Err(Error::DimensionMismatch(format!(
            "Sigma must be {nc} x {nc}, got {} x {}",
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    let m = bundle.m[(0, 0)];
    if !(m > 0.0) {
        return Err(Error::DfUndefined(format!(
            "contrast MSE is not positive ({m:.3e})"
        )));
    }
    let g = DVector::from_iterator(nc, bundle.grad.iter().map(|gi| gi[(0, 0)]));
    let numer = 2.0 * m * m;
    let denom = (sigma * &g).dot(&g);
    if !(denom > 0.0) || denom < 1e-14 * numer {
        return Err(Error::ZeroVarianceOfVariance(denom));
    }
    let nu = numer / denom;
    if nu < 1.0 {
        Ok(SatterthwaiteDf {
            nu: 1.0,
            floored: true,
        })
    } else {
        Ok(SatterthwaiteDf { nu, floored: false })
    }
}

/// Fai-Cornelius df: spectral-decompose Lambda' C Lambda with a fixed
/// ordering and sign convention, run Satterthwaite on each eigencolumn of
/// Lambda U, and moment-match the sum of the per-column F expectations.
pub fn fai_cornelius_ddf(
    sol: &MmeSolution,
    contrast: &ContrastSet,
    sigma: &DMatrix<f64>,
) -> Result<FcDdf> {
    let m = mme::mse_blup(sol, contrast)?;
    let (_, vecs) = linalg::sym_eigen_desc(&m);
    let q = contrast.q();

    let mut column_dfs = Vec::with_capacity(q);
    let mut any_floored = false;
    for c in 0..q {
        let u = vecs.columns(c, 1).into_owned();
        let kc = &contrast.k * &u;
        let lc = &contrast.l * &u;
        let col = ContrastSet::new(kc, lc)?;
        let bundle = derivatives::mse_bundle(sol, &col, sigma)?;
        let sat = satterthwaite_df(&bundle, sigma)?;
        any_floored |= sat.floored;
        column_dfs.push(sat.nu);
    }

    let e_sum: f64 = column_dfs
        .iter()
        .filter(|&&nu| nu > 2.0)
        .map(|&nu| nu / (nu - 2.0))
        .sum();
    if e_sum == 0.0 {
        return Err(Error::DfUndefined(
            "every per-column df is <= 2; the expectation sum is empty".into(),
        ));
    }
    let qf = q as f64;
    if e_sum <= qf {
        return Err(Error::DfUndefined(format!(
            "expectation sum E = {e_sum:.6} <= q = {q}; df would be nonpositive"
        )));
    }
    Ok(FcDdf {
        nu: 2.0 * e_sum / (e_sum - qf),
        column_dfs,
        e_sum,
        any_column_floored: any_floored,
    })
}

/// Bias-corrected EBLUP MSE matrix M + 2 M_delta, assembled blockwise from
/// the C blocks, cross-checked against the correction-term route, and PSD
/// repaired (eigenvalues in (-1e-8, 0) clipped; worse is an error).
pub fn adjusted_mse(
    sol: &MmeSolution,
    contrast: &ContrastSet,
    sigma: &DMatrix<f64>,
) -> Result<AdjustedMse> {
    let bundle = derivatives::mse_bundle(sol, contrast, sigma)?;
    adjusted_mse_with_bundle(sol, contrast, &bundle, sigma)
}

pub(crate) fn adjusted_mse_with_bundle(
    sol: &MmeSolution,
    contrast: &ContrastSet,
    bundle: &DerivBundle,
    sigma: &DMatrix<f64>,
) -> Result<AdjustedMse> {
    let layout = sol.layout();
    let s = layout.s();
    let sig2 = sol.sigma2_used.as_slice();
    let s_e2 = sol.sigma2_used.error();
    let lt = &bundle.lambda_tilde;
    let h0 = mme::assemble_h0(&sol.spec);
    let h0_lt = &h0 * lt;

    // Explicit block expansion of M - sum_ij Sigma_ij M_ij; every block
    // carries coefficient 2 (the two orderings of each unordered pair).
    let mut adjusted = contrast.lambda().transpose() * lt;

    let ee = (lt.transpose() * &h0_lt) * s_e2 - h0_lt.transpose() * &sol.c * &h0_lt;
    adjusted += ee * (2.0 * sigma[(s, s)] / s_e2.powi(4));

    for i in 0..s {
        let li = bundle.lambda_tilde_random(i);
        let cii = sol.c_random_block(i, i);
        let di = (li.transpose() * &li) * sig2[i] - li.transpose() * &cii * &li;
        adjusted += di * (2.0 * sigma[(i, i)] / sig2[i].powi(4));

        let ci_rows = sol.c_row_block(i);
        let cross_half = li.transpose() * &ci_rows * &h0_lt;
        let cross = &cross_half + cross_half.transpose();
        adjusted -= cross * (2.0 * sigma[(i, s)] / (sig2[i] * sig2[i] * s_e2 * s_e2));

        for j in (i + 1)..s {
            let lj = bundle.lambda_tilde_random(j);
            let cij = sol.c_random_block(i, j);
            let half = li.transpose() * &cij * &lj;
            let sym = &half + half.transpose();
            adjusted -= sym * (2.0 * sigma[(i, j)] / (sig2[i] * sig2[i] * sig2[j] * sig2[j]));
        }
    }
    linalg::symmetrize(&mut adjusted);

    let reference = &bundle.m + &bundle.m_delta * 2.0;
    let diff = (&adjusted - &reference).amax();
    let tol = 1e-9 * (1.0 + reference.amax());
    if diff > tol {
        return Err(Error::RouteDisagreement {
            context: "adjusted MSE (explicit blocks vs correction sum)",
            diff,
            tol,
        });
    }

    let (vals, vecs) = linalg::sym_eigen_desc(&adjusted);
    let min_eig = vals[vals.len() - 1];
    if min_eig < -1e-8 {
        return Err(Error::AdjustedMseIndefinite(min_eig));
    }
    let mut repaired = false;
    if min_eig < 0.0 {
        let clipped = DVector::from_iterator(vals.len(), vals.iter().map(|&v| v.max(0.0)));
        adjusted = &vecs * DMatrix::from_diagonal(&clipped) * vecs.transpose();
        linalg::symmetrize(&mut adjusted);
        repaired = true;
    }
    Ok(AdjustedMse {
        matrix: adjusted,
        repaired,
    })
}

/// Scale and denominator df for the Wald-type F on the adjusted MSE.
pub fn kr_scale_ddf(
    sol: &MmeSolution,
    contrast: &ContrastSet,
    sigma: &DMatrix<f64>,
    variant: KrVariant,
) -> Result<KrEstimates> {
    let bundle = derivatives::mse_bundle(sol, contrast, sigma)?;
    kr_from_bundle(sol, contrast, &bundle, sigma, variant)
}

pub(crate) fn kr_from_bundle(
    sol: &MmeSolution,
    contrast: &ContrastSet,
    bundle: &DerivBundle,
    sigma: &DMatrix<f64>,
    variant: KrVariant,
) -> Result<KrEstimates> {
    let q = contrast.q();
    let m_inv = linalg::sym_inv_checked(&bundle.m).ok_or_else(|| {
        Error::Singular("plug-in MSE matrix Lambda' C Lambda is numerically singular".into())
    })?;

    // Trace route over the gradient matrices.
    let nc = bundle.grad.len();
    let prods: Vec<DMatrix<f64>> = bundle.grad.iter().map(|g| &m_inv * g).collect();
    let traces: Vec<f64> = prods.iter().map(|p| p.trace()).collect();
    let mut a1 = 0.0;
    let mut a2 = 0.0;
    for i in 0..nc {
        for j in 0..nc {
            let w = sigma[(i, j)];
            if w == 0.0 {
                continue;
            }
            a1 += w * traces[i] * traces[j];
            a2 += w * (&prods[i] * &prods[j]).trace();
        }
    }

    // Expanded block route: rebuild the first derivatives from the
    // Lambda-tilde blocks and sum ordered-pair groups explicitly.
    let (a1_blocks, a2_blocks) = kr_a_blocks(sol, bundle, sigma, &m_inv);
    let scale1 = 1.0 + a1.abs();
    if (a1 - a1_blocks).abs() > 1e-10 * scale1 {
        return Err(Error::RouteDisagreement {
            context: "A1 moment (trace route vs block expansion)",
            diff: (a1 - a1_blocks).abs(),
            tol: 1e-10 * scale1,
        });
    }
    let scale2 = 1.0 + a2.abs();
    if (a2 - a2_blocks).abs() > 1e-10 * scale2 {
        return Err(Error::RouteDisagreement {
            context: "A2 moment (trace route vs block expansion)",
            diff: (a2 - a2_blocks).abs(),
            tol: 1e-10 * scale2,
        });
    }

    kr_chain(a1, a2, q, variant)
}

/// Expanded evaluation of the A1/A2 moments, grouped into diagonal,
/// random-random, random-error, and error-error blocks.
fn kr_a_blocks(
    sol: &MmeSolution,
    bundle: &DerivBundle,
    sigma: &DMatrix<f64>,
    m_inv: &DMatrix<f64>,
) -> (f64, f64) {
    let layout = sol.layout();
    let s = layout.s();
    let sig2 = sol.sigma2_used.as_slice();
    let s_e2 = sol.sigma2_used.error();
    let lt = &bundle.lambda_tilde;
    let h0 = mme::assemble_h0(&sol.spec);
    let h0_lt = &h0 * lt;

    let mut scaled: Vec<DMatrix<f64>> = Vec::with_capacity(s + 1);
    for (i, s2) in sig2.iter().enumerate().take(s) {
        let li = bundle.lambda_tilde_random(i);
        scaled.push(m_inv * (li.transpose() * li) / (s2 * s2));
    }
    scaled.push(m_inv * (lt.transpose() * &h0_lt) / (s_e2 * s_e2));
    let tr: Vec<f64> = scaled.iter().map(|m| m.trace()).collect();

    let mut a1 = 0.0;
    let mut a2 = 0.0;
    for i in 0..=s {
        a1 += sigma[(i, i)] * tr[i] * tr[i];
        a2 += sigma[(i, i)] * (&scaled[i] * &scaled[i]).trace();
    }
    for i in 0..=s {
        for j in (i + 1)..=s {
            a1 += 2.0 * sigma[(i, j)] * tr[i] * tr[j];
            a2 += 2.0 * sigma[(i, j)] * (&scaled[i] * &scaled[j]).trace();
        }
    }
    (a1, a2)
}

/// Moment-matching chain from the A1/A2 moments to (kappa, nu).
///
/// The df comes from nu = 4 + (q+2)/(q rho - 1). Values of nu above 2 are
/// valid even when intermediate moments are negative (the modified variant
/// produces such intermediates by design on small balanced problems);
/// |q rho - 1| below 1e-12 is the no-uncertainty limit reported as infinite
/// df; nu in (0, 2] leaves the scale undefined and errors; nonpositive nu
/// is clamped to infinite df with a flag.
pub fn kr_chain(a1: f64, a2: f64, q: usize, variant: KrVariant) -> Result<KrEstimates> {
    let qf = q as f64;
    let b = (a1 + 6.0 * a2) / (2.0 * qf);
    let (e_factor, v_factor) = match variant {
        KrVariant::Plain => (1.0 + a2 / qf, (2.0 / qf) * (1.0 + b)),
        KrVariant::Modified => {
            let denom_e = 1.0 - a2 / qf;
            if !(denom_e > 0.0) {
                return Err(Error::DfUndefined(format!(
                    "modified expectation factor undefined: 1 - A2/q = {denom_e:.3e}"
                )));
            }
            let e_star = 1.0 / denom_e;
            // A2 = 0 forces A1 = 0 for any PSD Sigma, so the 0/0 limit of g
            // is taken as 0, which reduces to the no-correction constants.
            let g = if a2.abs() <= 1e-12 * (1.0 + a1.abs()) {
                0.0
            } else {
                ((qf + 1.0) * a1 - (qf + 4.0) * a2) / ((qf + 2.0) * a2)
            };
            let den = 3.0 * qf + 2.0 * (1.0 - g);
            if den == 0.0 {
                return Err(Error::DfUndefined(
                    "modified variant constants undefined: 3q + 2(1 - g) = 0".into(),
                ));
            }
            let c1 = g / den;
            let c2 = (qf - g) / den;
            let c3 = (qf - g + 2.0) / den;
            let d1 = 1.0 - c2 * b;
            let d2 = 1.0 - c3 * b;
            let v_star = (2.0 / qf) * (1.0 + c1 * b) / (d1 * d1 * d2);
            (e_star, v_star)
        }
    };
    if !(e_factor > 0.0 && e_factor.is_finite()) {
        return Err(Error::DfUndefined(format!(
            "expectation factor E = {e_factor:.3e} is not positive"
        )));
    }
    let rho = v_factor / (2.0 * e_factor * e_factor);
    if !rho.is_finite() {
        return Err(Error::DfUndefined(format!(
            "variance-to-expectation ratio rho = {rho} is not finite"
        )));
    }
    let x = qf * rho - 1.0;
    let (nu, clamped) = if x.abs() <= 1e-12 {
        (Df::Infinite, false)
    } else {
        let nu_val = 4.0 + (qf + 2.0) / x;
        if nu_val > 2.0 {
            (Df::Finite(nu_val), false)
        } else if nu_val > 0.0 {
            return Err(Error::DfUndefined(format!(
                "moment-matched df {nu_val:.4} lies in (0, 2]; the scale factor is undefined"
            )));
        } else {
            (Df::Infinite, true)
        }
    };
    let kappa = match nu {
        Df::Finite(v) => v / (e_factor * (v - 2.0)),
        Df::Infinite => 1.0 / e_factor,
    };
    Ok(KrEstimates {
        kappa,
        nu,
        e_factor,
        a1,
        a2,
        b_factor: b,
        rho,
        clamped_infinite: clamped,
    })
}

/// Wald-type statistic F = (w_hat - w0)' mse^{-1} (w_hat - w0)/q with the
/// p-value of the scaled statistic kappa F under F_{q,nu}.
pub fn wald_f(
    w_hat: &DVector<f64>,
    w0: &DVector<f64>,
    mse: &DMatrix<f64>,
    kappa: f64,
    nu: Df,
) -> Result<(f64, f64)> {
    if w_hat.len() != w0.len() || mse.nrows() != w_hat.len() || !mse.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "wald_f needs matching shapes: w_hat {}, w0 {}, mse {} x {}",
            w_hat.len(),
            w0.len(),
            mse.nrows(),
            mse.ncols()
        )));
    }
    check_kappa(kappa)?;
    let q = w_hat.len();
    let f = quad_solve_pd(mse, &(w_hat - w0))? / q as f64;
    Ok((f, scaled_f_tail(q, kappa, nu, f)))
}

/// Scalar t statistic of the scaled pivot sqrt(kappa) (w_hat - w0)/sqrt(mse)
/// with its two-sided p-value and the level-confidence interval
/// w_hat +- t_{nu,1-(1-level)/2} sqrt(mse/kappa).
pub fn t_stat(
    w_hat: f64,
    w0: f64,
    mse_scalar: f64,
    kappa: f64,
    nu: Df,
    level: f64,
) -> Result<TStat> {
    if !(mse_scalar > 0.0) {
        return Err(Error::NonPositiveVariance(mse_scalar));
    }
    check_kappa(kappa)?;
    check_level(level)?;
    let se = (mse_scalar / kappa).sqrt();
    let t = (w_hat - w0) / se;
    let p = dist::t_tail_two_sided(nu.value(), t);
    let crit = dist::t_critical_two_sided(nu.value(), 1.0 - level);
    Ok(TStat {
        t,
        p,
        interval: (w_hat - crit * se, w_hat + crit * se),
    })
}

/// Ellipsoidal region from inverting the scaled F pivot:
/// {w : (kappa/q)(w_hat - w)' mse^{-1} (w_hat - w) <= F_{q,nu;level}}.
pub fn prediction_region(
    w_hat: &DVector<f64>,
    mse: &DMatrix<f64>,
    kappa: f64,
    nu: Df,
    level: f64,
) -> Result<EllipsoidRegion> {
    check_kappa(kappa)?;
    check_level(level)?;
    let q = w_hat.len();
    if mse.nrows() != q || !mse.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "mse is {} x {} but the contrast has q = {q}",
            mse.nrows(),
            mse.ncols()
        )));
    }
    // Reject non-PD shapes up front so the region is always usable.
    Cholesky::new(mse.clone())
        .ok_or_else(|| Error::Singular("region shape matrix is not positive definite".into()))?;
    let qf = q as f64;
    let f_crit = match nu {
        Df::Finite(v) => dist::f_quantile(qf, v, level),
        Df::Infinite => dist::chi_square_quantile(qf, level) / qf,
    };
    Ok(EllipsoidRegion {
        center: w_hat.clone(),
        shape: mse.clone(),
        radius2: qf * f_crit / kappa,
    })
}

fn require_sigma(sigma: Option<&DMatrix<f64>>) -> Result<&DMatrix<f64>> {
    sigma.ok_or_else(|| {
        Error::DfUndefined(
            "no covariance of the variance-component estimates is available \
             (singular Fisher information); only the exact pivot applies"
                .into(),
        )
    })
}

/// One-stop driver: fits the requested method and packages statistic,
/// p-value, interval (q = 1), and region at the given level.
pub fn infer(
    sol: &MmeSolution,
    contrast: &ContrastSet,
    sigma: Option<&DMatrix<f64>>,
    w0: &DVector<f64>,
    method: Method,
    level: f64,
) -> Result<InferenceResult> {
    check_level(level)?;
    let q = contrast.q();
    let w_hat = mme::blup(sol, contrast)?;
    if w0.len() != q {
        return Err(Error::DimensionMismatch(format!(
            "w0 has length {} but the contrast has q = {q}",
            w0.len()
        )));
    }
    let mut flags = Vec::new();

    let (mse_used, statistic, kappa, df2, p_value) = match method {
        Method::ExactChiSquare => {
            let m = mme::mse_blup(sol, contrast)?;
            let (q_stat, p) = exact_chisq_pivot(sol, contrast, w0)?;
            (m, q_stat, 1.0, Df::Infinite, p)
        }
        Method::Satterthwaite => {
            let sigma = require_sigma(sigma)?;
            if q != 1 {
                return Err(Error::InvalidArgument(
                    "the Satterthwaite method applies to a single contrast; \
                     use the Fai-Cornelius method for q > 1"
                        .into(),
                ));
            }
            let bundle = derivatives::mse_bundle(sol, contrast, sigma)?;
            let sat = satterthwaite_df(&bundle, sigma)?;
            if sat.floored {
                flags.push(InferenceFlag::DfFlooredAtOne);
            }
            let nu = Df::Finite(sat.nu);
            let (f, p) = wald_f(&w_hat, w0, &bundle.m, 1.0, nu)?;
            (bundle.m.clone(), f, 1.0, nu, p)
        }
        Method::FaiCornelius => {
            let sigma = require_sigma(sigma)?;
            let fc = fai_cornelius_ddf(sol, contrast, sigma)?;
            if fc.any_column_floored {
                flags.push(InferenceFlag::DfFlooredAtOne);
            }
            let m = mme::mse_blup(sol, contrast)?;
            let nu = Df::Finite(fc.nu);
            let (f, p) = wald_f(&w_hat, w0, &m, 1.0, nu)?;
            (m, f, 1.0, nu, p)
        }
        Method::KenwardRoger(variant) => {
            let sigma = require_sigma(sigma)?;
            let bundle = derivatives::mse_bundle(sol, contrast, sigma)?;
            let adjusted = adjusted_mse_with_bundle(sol, contrast, &bundle, sigma)?;
            if adjusted.repaired {
                flags.push(InferenceFlag::MseRepaired);
            }
            let kr = kr_from_bundle(sol, contrast, &bundle, sigma, variant)?;
            if kr.clamped_infinite {
                flags.push(InferenceFlag::InfiniteDfClamped);
            }
            let (f, p) = wald_f(&w_hat, w0, &adjusted.matrix, kr.kappa, kr.nu)?;
            (adjusted.matrix, f, kr.kappa, kr.nu, p)
        }
    };

    let interval = if q == 1 {
        let stat = t_stat(w_hat[0], w0[0], mse_used[(0, 0)], kappa, df2, level)?;
        Some(stat.interval)
    } else {
        None
    };
    let region = prediction_region(&w_hat, &mse_used, kappa, df2, level)?;

    Ok(InferenceResult {
        method,
        w_hat,
        w0: w0.clone(),
        mse_used,
        statistic,
        df1: q,
        df2,
        kappa,
        p_value,
        level,
        interval,
        region,
        flags,
    })
}
