//! Instance generators and dense-covariance oracles shared by the
//! integration suites. Every oracle here recomputes its target from
//! V = ZGZ' + sigma2_e I with plain dense algebra (Cholesky, SVD
//! pseudo-inverse), staying off the mixed-model-equation code paths under
//! test.

#![allow(dead_code)]

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use lmm_core::model::{ContrastSet, LmmSpec, VarComponents};

pub fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

pub struct Instance {
    pub spec: LmmSpec,
    pub vc: VarComponents,
    pub full_rank_x: bool,
}

/// Random desk-scale instance: n in 6..=12, 1..=3 random factors with 2 or
/// 3 levels each, 1..=3 fixed columns (always an intercept), and a quarter
/// of multi-column designs made rank-deficient by duplicating a column.
pub fn random_instance(rng: &mut ChaCha12Rng) -> Instance {
    let n: usize = rng.gen_range(6..=12);
    let s: usize = rng.gen_range(1..=3);
    let p: usize = rng.gen_range(1..=3);

    let mut x = DMatrix::zeros(n, p);
    for i in 0..n {
        x[(i, 0)] = 1.0;
    }
    for j in 1..p {
        for i in 0..n {
            x[(i, j)] = rng.gen_range(-1.0..1.0);
        }
    }
    let degenerate = p >= 2 && rng.gen_bool(0.25);
    if degenerate {
        for i in 0..n {
            x[(i, p - 1)] = 2.0 * x[(i, 0)];
        }
    }

    let mut z_blocks = Vec::with_capacity(s);
    for _ in 0..s {
        let levels: usize = rng.gen_range(2..=3);
        // Round-robin then shuffle so every level is observed.
        let mut assign: Vec<usize> = (0..n).map(|i| i % levels).collect();
        assign.shuffle(rng);
        z_blocks.push(DMatrix::from_fn(n, levels, |row, c| {
            if assign[row] == c {
                1.0
            } else {
                0.0
            }
        }));
    }

    let vc_vals: Vec<f64> = (0..=s).map(|_| rng.gen_range(0.3..2.0)).collect();
    let y = DVector::from_fn(n, |_, _| rng.gen_range(-3.0..3.0));

    Instance {
        spec: LmmSpec::new(y, x, z_blocks).expect("generator produces valid designs"),
        vc: VarComponents::new(vc_vals).expect("generator produces positive variances"),
        full_rank_x: !degenerate,
    }
}

/// Estimable contrast set with q columns: K = X'A for a random A, L dense
/// random. Full column rank with probability one; retries a few times in
/// the measure-zero failure case.
pub fn random_estimable_contrast(rng: &mut ChaCha12Rng, spec: &LmmSpec, q: usize) -> ContrastSet {
    for _ in 0..16 {
        let a = DMatrix::from_fn(spec.n(), q, |_, _| rng.gen_range(-1.0..1.0));
        let k = spec.x.transpose() * &a;
        let l = DMatrix::from_fn(spec.r(), q, |_, _| rng.gen_range(-1.0..1.0));
        if let Ok(c) = ContrastSet::new(k, l) {
            return c;
        }
    }
    panic!("failed to draw a full-rank contrast set");
}

/// Random PSD matrix A A'/dim * scale with a small ridge, used as a stand-in
/// covariance of the variance-component estimates.
pub fn random_psd(rng: &mut ChaCha12Rng, dim: usize, scale: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(dim, dim, |_, _| rng.gen_range(-1.0..1.0));
    &a * a.transpose() * (scale / dim as f64) + DMatrix::identity(dim, dim) * (1e-3 * scale)
}

/// V = sum_i sigma2_i Z_i Z_i' + sigma2_e I.
pub fn dense_v(spec: &LmmSpec, vc: &VarComponents) -> DMatrix<f64> {
    let n = spec.n();
    let mut v = DMatrix::identity(n, n) * vc.error();
    for (i, z) in spec.z_blocks.iter().enumerate() {
        v += z * z.transpose() * vc.random(i);
    }
    v
}

/// dV/d(sigma2_comp): Z_i Z_i' for a random component, I for the error.
pub fn v_deriv(spec: &LmmSpec, comp: usize) -> DMatrix<f64> {
    if comp < spec.s() {
        let z = &spec.z_blocks[comp];
        z * z.transpose()
    } else {
        DMatrix::identity(spec.n(), spec.n())
    }
}

fn svd_pinv(a: &DMatrix<f64>) -> DMatrix<f64> {
    let cut = 1e-10 * a.norm().max(1.0);
    a.clone()
        .pseudo_inverse(cut)
        .expect("SVD of a finite matrix")
}

/// GLS/BLUP quantities and the joint covariance blocks, all from V directly:
/// c11 = (X'V^-1 X)^-, c12 = -c11 X'V^-1 Z G, c22 = G - GZ'PZG with
/// P = V^-1 - V^-1 X c11 X' V^-1. For rank-deficient X the particular
/// solution b_hat differs from the MME one, but X b_hat, u_hat, estimable
/// K'b_hat, and the sandwich blocks are invariant.
pub struct DenseBlocks {
    pub v_inv: DMatrix<f64>,
    pub p_mat: DMatrix<f64>,
    pub b_hat: DVector<f64>,
    pub u_hat: DVector<f64>,
    pub c11: DMatrix<f64>,
    pub c12: DMatrix<f64>,
    pub c22: DMatrix<f64>,
}

pub fn dense_gls_blup(spec: &LmmSpec, vc: &VarComponents) -> DenseBlocks {
    let v = dense_v(spec, vc);
    let v_inv = Cholesky::new(v)
        .expect("V is positive definite for positive variances")
        .inverse();
    let x = &spec.x;
    let y = &spec.y;
    let z = spec.z_concat();
    let layout = spec.layout();
    let g = vc.g_diag(&layout);

    let xtvi = x.transpose() * &v_inv;
    let a = &xtvi * x;
    let c11 = svd_pinv(&a);
    let b_hat = &c11 * (&xtvi * y);
    let p_mat = &v_inv - xtvi.transpose() * &c11 * &xtvi;

    // Z G and G Z' as column/row scalings.
    let mut zg = z.clone();
    for (j, mut col) in zg.column_iter_mut().enumerate() {
        col *= g[j];
    }
    let u_hat = zg.transpose() * (&v_inv * (y - x * &b_hat));

    let c12 = -(&c11 * (&xtvi * &zg));
    let mut c22 = -(zg.transpose() * &p_mat * &zg);
    for j in 0..layout.r() {
        c22[(j, j)] += g[j];
    }

    DenseBlocks {
        v_inv,
        p_mat,
        b_hat,
        u_hat,
        c11,
        c12,
        c22,
    }
}

/// Fisher information of the ML log-likelihood: 0.5 tr(V^-1 V_i V^-1 V_j).
pub fn fisher_ml_dense(spec: &LmmSpec, vc: &VarComponents) -> DMatrix<f64> {
    let blocks = dense_gls_blup(spec, vc);
    fisher_from_weight(spec, &blocks.v_inv)
}

/// Fisher information of the restricted log-likelihood: 0.5 tr(P V_i P V_j).
pub fn fisher_reml_dense(spec: &LmmSpec, vc: &VarComponents) -> DMatrix<f64> {
    let blocks = dense_gls_blup(spec, vc);
    fisher_from_weight(spec, &blocks.p_mat)
}

fn fisher_from_weight(spec: &LmmSpec, w: &DMatrix<f64>) -> DMatrix<f64> {
    let nc = spec.s() + 1;
    let weighted: Vec<DMatrix<f64>> = (0..nc).map(|i| w * v_deriv(spec, i)).collect();
    DMatrix::from_fn(nc, nc, |i, j| 0.5 * (&weighted[i] * &weighted[j]).trace())
}

/// Score of the ML log-likelihood at vc (profiled over b):
/// s_i = -0.5 (tr(V^-1 V_i) - r' V^-1 V_i V^-1 r), r = y - X b_hat.
pub fn ml_score_dense(spec: &LmmSpec, y: &DVector<f64>, vc: &VarComponents) -> DVector<f64> {
    let spec_y = spec.with_response(y.clone()).unwrap();
    let blocks = dense_gls_blup(&spec_y, vc);
    let r = y - &spec_y.x * &blocks.b_hat;
    let vir = &blocks.v_inv * &r;
    let nc = spec.s() + 1;
    DVector::from_fn(nc, |i, _| {
        let vi = v_deriv(spec, i);
        -0.5 * ((&blocks.v_inv * &vi).trace() - (&vi * &vir).dot(&vir))
    })
}

/// Score of the restricted log-likelihood at vc:
/// s_i = -0.5 (tr(P V_i) - y' P V_i P y).
pub fn reml_score_dense(spec: &LmmSpec, y: &DVector<f64>, vc: &VarComponents) -> DVector<f64> {
    let spec_y = spec.with_response(y.clone()).unwrap();
    let blocks = dense_gls_blup(&spec_y, vc);
    let py = &blocks.p_mat * y;
    let nc = spec.s() + 1;
    DVector::from_fn(nc, |i, _| {
        let vi = v_deriv(spec, i);
        -0.5 * ((&blocks.p_mat * &vi).trace() - (&vi * &py).dot(&py))
    })
}

/// ML log-likelihood from dense V with the GLS profile for b.
pub fn loglik_ml_dense(spec: &LmmSpec, y: &DVector<f64>, vc: &VarComponents) -> f64 {
    let spec_y = spec.with_response(y.clone()).unwrap();
    let v = dense_v(&spec_y, vc);
    let chol = Cholesky::new(v).unwrap();
    let ln_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    let blocks = dense_gls_blup(&spec_y, vc);
    let r = y - &spec_y.x * &blocks.b_hat;
    let quad = (&blocks.v_inv * &r).dot(&r);
    -0.5 * (spec.n() as f64 * (2.0 * std::f64::consts::PI).ln() + ln_det + quad)
}

/// Orthonormal basis of the left null space of X (columns B with B'X = 0),
/// optionally remixed by a random orthogonal matrix to demonstrate basis
/// invariance of the restricted likelihood.
pub fn error_contrast_basis(x: &DMatrix<f64>, remix: Option<&mut ChaCha12Rng>) -> DMatrix<f64> {
    let n = x.nrows();
    let svd = x.clone().svd(true, false);
    let u = svd.u.expect("requested U");
    let smax = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&sv| sv > 1e-10 * smax.max(1.0))
        .count();
    // Complete U's column span to an orthonormal basis of R^n, keep the
    // trailing n - rank columns.
    let mut full = DMatrix::identity(n, n);
    full.view_mut((0, 0), (n, u.ncols())).copy_from(&u);
    let qr = full.qr();
    let qmat = qr.q();
    let mut b = qmat.columns(rank, n - rank).into_owned();
    if let Some(rng) = remix {
        let m = DMatrix::from_fn(b.ncols(), b.ncols(), |_, _| rng.gen_range(-1.0..1.0));
        let q = m.qr().q();
        b = &b * q;
    }
    b
}

/// Restricted log-likelihood through explicit error contrasts:
/// -(1/2)[(n-k) ln 2pi + ln|B'VB| + y'B (B'VB)^{-1} B'y].
pub fn loglik_reml_dense(
    spec: &LmmSpec,
    y: &DVector<f64>,
    vc: &VarComponents,
    basis: &DMatrix<f64>,
) -> f64 {
    let v = dense_v(spec, vc);
    let bvb = basis.transpose() * &v * basis;
    let chol = Cholesky::new(bvb).unwrap();
    let ln_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    let by = basis.transpose() * y;
    let quad = chol.solve(&by).dot(&by);
    let df = basis.ncols() as f64;
    -0.5 * (df * (2.0 * std::f64::consts::PI).ln() + ln_det + quad)
}

/// Balanced one-way design: a groups of m observations, intercept-only X.
pub fn balanced_one_way(a: usize, m: usize) -> LmmSpec {
    let n = a * m;
    let y = DVector::zeros(n);
    let x = DMatrix::from_element(n, 1, 1.0);
    let z = DMatrix::from_fn(n, a, |row, c| if row / m == c { 1.0 } else { 0.0 });
    LmmSpec::new(y, x, vec![z]).unwrap()
}

/// (MSA, MSE) for a balanced one-way layout with groups stored
/// consecutively.
pub fn anova_one_way(y: &DVector<f64>, a: usize, m: usize) -> (f64, f64) {
    let grand = y.sum() / (a * m) as f64;
    let mut ssa = 0.0;
    let mut sse = 0.0;
    for g in 0..a {
        let rows = y.rows(g * m, m);
        let gm = rows.sum() / m as f64;
        ssa += m as f64 * (gm - grand) * (gm - grand);
        for v in rows.iter() {
            sse += (v - gm) * (v - gm);
        }
    }
    (ssa / (a as f64 - 1.0), sse / ((a * m - a) as f64))
}

/// M(sigma2) = Lambda' C(sigma2) Lambda recomputed from a fresh solve, for
/// finite differencing in the variance components.
pub fn mse_at(spec: &LmmSpec, vals: &[f64], contrast: &ContrastSet) -> DMatrix<f64> {
    let vc = VarComponents::new(vals.to_vec()).unwrap();
    let sol = lmm_core::mme::solve_mme(spec, &vc).unwrap();
    lmm_core::mme::mse_blup(&sol, contrast).unwrap()
}

/// Central finite-difference gradient of M in each variance component,
/// with a relative step.
pub fn fd_mse_gradient(
    spec: &LmmSpec,
    vc: &VarComponents,
    contrast: &ContrastSet,
    rel_h: f64,
) -> Vec<DMatrix<f64>> {
    let base: Vec<f64> = vc.as_slice().to_vec();
    (0..base.len())
        .map(|i| {
            let h = rel_h * base[i];
            let mut up = base.clone();
            up[i] += h;
            let mut dn = base.clone();
            dn[i] -= h;
            (mse_at(spec, &up, contrast) - mse_at(spec, &dn, contrast)) / (2.0 * h)
        })
        .collect()
}

/// Central finite-difference Hessian of M (second differences on the
/// diagonal, four-point cross differences off it).
pub fn fd_mse_hessian(
    spec: &LmmSpec,
    vc: &VarComponents,
    contrast: &ContrastSet,
    rel_h: f64,
) -> Vec<Vec<DMatrix<f64>>> {
    let base: Vec<f64> = vc.as_slice().to_vec();
    let nc = base.len();
    let center = mse_at(spec, &base, contrast);
    let mut out = Vec::with_capacity(nc);
    for i in 0..nc {
        let mut row = Vec::with_capacity(nc);
        let hi = rel_h * base[i];
        for j in 0..nc {
            let hj = rel_h * base[j];
            let mat = if i == j {
                let mut up = base.clone();
                up[i] += hi;
                let mut dn = base.clone();
                dn[i] -= hi;
                (mse_at(spec, &up, contrast) + mse_at(spec, &dn, contrast) - &center * 2.0)
                    / (hi * hi)
            } else {
                let mut pp = base.clone();
                pp[i] += hi;
                pp[j] += hj;
                let mut pm = base.clone();
                pm[i] += hi;
                pm[j] -= hj;
                let mut mp = base.clone();
                mp[i] -= hi;
                mp[j] += hj;
                let mut mm = base.clone();
                mm[i] -= hi;
                mm[j] -= hj;
                (mse_at(spec, &pp, contrast) - mse_at(spec, &pm, contrast)
                    - mse_at(spec, &mp, contrast)
                    + mse_at(spec, &mm, contrast))
                    / (4.0 * hi * hj)
            };
            row.push(mat);
        }
        out.push(row);
    }
    out
}

/// Frobenius-norm relative error with an absolute floor for near-zero
/// references.
pub fn rel_mat_err(got: &DMatrix<f64>, want: &DMatrix<f64>) -> f64 {
    (got - want).norm() / want.norm().max(1e-8)
}

pub fn rel_vec_err(got: &DVector<f64>, want: &DVector<f64>) -> f64 {
    (got - want).norm() / want.norm().max(1e-8)
}

pub fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1e-8)
}

/// Smallest eigenvalue of a symmetric matrix (dense route).
pub fn min_eig(a: &DMatrix<f64>) -> f64 {
    a.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |m, &v| m.min(v))
}
