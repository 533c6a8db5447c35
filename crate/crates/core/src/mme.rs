//! Henderson's mixed model equations: assembly, solving, and the
//! BLUE/BLUP/MSE layer built on the coefficient matrix C.
//!
//! Two equivalent systems appear here. The raw system has matrix
//! `H = (X,Z)' R^{-1} (X,Z) + diag(0, G^{-1})`; the stabilized system
//! rescales so that G enters only through products (never through G^{-1}
//! applied to data), which is the numerically preferred form when some
//! variance components are small:
//!
//! ```text
//! [ X'X   X'Z G           ] [b]   [X'y]
//! [ Z'X   s2 I_r + Z'Z G  ] [v] = [Z'y],   u = G v,
//! ```
//!
//! with `s2` the error variance. C is always the Moore-Penrose g-inverse of
//! H from a symmetric eigendecomposition, so it is deterministic, symmetric,
//! and valid for rank-deficient X.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{BlockLayout, ContrastSet, LmmSpec, VarComponents};

/// H = (X,Z)' R^{-1} (X,Z) + diag(0, G^{-1}), the MME coefficient matrix.
pub fn assemble_h(spec: &LmmSpec, vc: &VarComponents) -> Result<DMatrix<f64>> {
    vc.check_against(spec)?;
    let layout = spec.layout();
    let mut h = assemble_h0(spec) / vc.error();
    let g = vc.g_diag(&layout);
    for k in 0..layout.r() {
        h[(layout.p + k, layout.p + k)] += 1.0 / g[k];
    }
    Ok(h)
}

/// H0 = (X,Z)'(X,Z), the Gram matrix of the combined design. Independent of
/// the variance components; it is also the derivative of H with respect to
/// the reciprocal error variance direction.
pub fn assemble_h0(spec: &LmmSpec) -> DMatrix<f64> {
    let w = combined_design(spec);
    let mut h0 = w.transpose() * &w;
    linalg::symmetrize(&mut h0);
    h0
}

/// (X, Z) as one n x (p+r) matrix.
pub fn combined_design(spec: &LmmSpec) -> DMatrix<f64> {
    let n = spec.n();
    let layout = spec.layout();
    let mut w = DMatrix::zeros(n, layout.total());
    w.view_mut((0, 0), (n, layout.p)).copy_from(&spec.x);
    let mut off = layout.p;
    for z in &spec.z_blocks {
        w.view_mut((0, off), (n, z.ncols())).copy_from(z);
        off += z.ncols();
    }
    w
}

/// M = Z'Z - Z'X (X'X)^- X'Z, the random-design cross-product adjusted for
/// the fixed effects. Shared by the REML iteration matrix T and the fast
/// C22 identity.
pub fn m_matrix(spec: &LmmSpec) -> DMatrix<f64> {
    let z = spec.z_concat();
    let ztx = z.transpose() * &spec.x;
    let (xtx_pinv, _) = linalg::sym_pinv(&(spec.x.transpose() * &spec.x));
    let mut m = z.transpose() * &z - &ztx * xtx_pinv * ztx.transpose();
    linalg::symmetrize(&mut m);
    m
}

/// Solution of the mixed model equations at fixed variance components,
/// carrying the model, the g-inverse C, and the block layout needed by the
/// downstream derivative and inference code.
#[derive(Debug, Clone)]
pub struct MmeSolution {
    pub spec: LmmSpec,
    pub sigma2_used: VarComponents,
    pub b_tilde: DVector<f64>,
    pub u_tilde: DVector<f64>,
    pub c: DMatrix<f64>,
}

impl MmeSolution {
    pub fn layout(&self) -> BlockLayout {
        self.spec.layout()
    }

    /// C11, the p x p fixed-effects block of C.
    pub fn c11(&self) -> DMatrix<f64> {
        let p = self.layout().p;
        self.c.view((0, 0), (p, p)).into_owned()
    }

    /// C12, the p x r cross block.
    pub fn c12(&self) -> DMatrix<f64> {
        let layout = self.layout();
        self.c.view((0, layout.p), (layout.p, layout.r())).into_owned()
    }

    /// C22, the r x r random-effects block.
    pub fn c22(&self) -> DMatrix<f64> {
        let layout = self.layout();
        self.c
            .view((layout.p, layout.p), (layout.r(), layout.r()))
            .into_owned()
    }

    /// {C}_ij, the r_i x r_j block for random factors i, j (0-based).
    pub fn c_random_block(&self, i: usize, j: usize) -> DMatrix<f64> {
        let layout = self.layout();
        self.c
            .view(
                (layout.random_offset(i), layout.random_offset(j)),
                (layout.r_sizes[i], layout.r_sizes[j]),
            )
            .into_owned()
    }

    /// {C}_{i.}, the r_i x (p+r) row block for random factor i.
    pub fn c_row_block(&self, i: usize) -> DMatrix<f64> {
        let layout = self.layout();
        self.c
            .view((layout.random_offset(i), 0), (layout.r_sizes[i], layout.total()))
            .into_owned()
    }

    /// {C}_{.i}, the (p+r) x r_i column block for random factor i.
    pub fn c_col_block(&self, i: usize) -> DMatrix<f64> {
        self.c_row_block(i).transpose()
    }

    /// Predicted random effects for factor i.
    pub fn u_tilde_block(&self, i: usize) -> DVector<f64> {
        let layout = self.layout();
        self.u_tilde
            .rows(layout.within_r_offset(i), layout.r_sizes[i])
            .into_owned()
    }

    /// Stacked solution (b_tilde', u_tilde')'.
    pub fn stacked(&self) -> DVector<f64> {
        let mut t = DVector::zeros(self.layout().total());
        t.rows_mut(0, self.b_tilde.len()).copy_from(&self.b_tilde);
        t.rows_mut(self.b_tilde.len(), self.u_tilde.len())
            .copy_from(&self.u_tilde);
        t
    }

    /// Fitted residual y - X b_tilde - Z u_tilde.
    pub fn residual(&self) -> DVector<f64> {
        &self.spec.y - &self.spec.x * &self.b_tilde - spec_z_times(&self.spec, &self.u_tilde)
    }
}

/// Z * v without materializing the concatenated Z.
fn spec_z_times(spec: &LmmSpec, v: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(spec.n());
    let mut off = 0;
    for z in &spec.z_blocks {
        out += z * v.rows(off, z.ncols());
        off += z.ncols();
    }
    out
}

/// Solve the mixed model equations at `vc` for the response stored in the
/// spec. The stabilized system is solved by LU when nonsingular; otherwise
/// the minimum-norm solution through the Moore-Penrose C is used (this is
/// the rank-deficient-X path; estimable functions are invariant to it).
pub fn solve_mme(spec: &LmmSpec, vc: &VarComponents) -> Result<MmeSolution> {
    solve_mme_with_y(spec, vc, &spec.y)
}

/// As [`solve_mme`] but for an alternate response on the same design; used
/// when many responses share one factorization pattern.
pub fn solve_mme_with_y(spec: &LmmSpec, vc: &VarComponents, y: &DVector<f64>) -> Result<MmeSolution> {
    spec.validate()?;
    vc.check_against(spec)?;
    if y.len() != spec.n() {
        return Err(Error::DimensionMismatch(format!(
            "response length {} does not match n = {}",
            y.len(),
            spec.n()
        )));
    }
    let layout = spec.layout();
    let (p, r) = (layout.p, layout.r());
    let s2 = vc.error();
    let g = vc.g_diag(&layout);

    let w = combined_design(spec);
    let wtw = w.transpose() * &w;
    let wty = w.transpose() * y;

    // Stabilized coefficient matrix: right-multiply the random columns of
    // W'W by G and add s2 on the random diagonal.
    let mut a2 = wtw.clone();
    for j in 0..r {
        let gj = g[j];
        for i in 0..(p + r) {
            a2[(i, p + j)] *= gj;
        }
    }
    for j in 0..r {
        a2[(p + j, p + j)] += s2;
    }

    // H and its Moore-Penrose g-inverse; C is defined through this route
    // regardless of how the point solution is obtained.
    let mut h = wtw / s2;
    for j in 0..r {
        h[(p + j, p + j)] += 1.0 / g[j];
    }
    linalg::symmetrize(&mut h);
    let (c, _rank) = linalg::sym_pinv(&h);

    let stacked = match linalg::lu_solve(&a2, &DMatrix::from_column_slice(p + r, 1, wty.as_slice()))
    {
        Some(sol) => {
            let mut t = DVector::from_column_slice(sol.as_slice());
            // Recover u = G v on the random rows.
            for j in 0..r {
                t[p + j] *= g[j];
            }
            t
        }
        None => {
            // Singular H: minimum-norm solution of the raw system.
            &c * (&wty / s2)
        }
    };

    let b_tilde = stacked.rows(0, p).into_owned();
    let u_tilde = stacked.rows(p, r).into_owned();

    // The raw system must be satisfied regardless of route.
    let rhs1 = &wty / s2;
    let resid = &h * &stacked - &rhs1;
    if resid.norm() > 1e-8 * (1.0 + rhs1.norm()) {
        return Err(Error::Singular(format!(
            "MME solve residual {:.3e} is inconsistent with the right-hand side",
            resid.norm()
        )));
    }

    Ok(MmeSolution {
        spec: spec.clone(),
        sigma2_used: vc.clone(),
        b_tilde,
        u_tilde,
        c,
    })
}

/// C22 through the inversion-free identity
/// `C22 = s2 G (s2 I + M G)^{-1}` with M from [`m_matrix`]; avoids forming
/// the full (p+r) system when only the random block is needed.
pub fn c22_fast(spec: &LmmSpec, vc: &VarComponents) -> Result<DMatrix<f64>> {
    vc.check_against(spec)?;
    let layout = spec.layout();
    let r = layout.r();
    let s2 = vc.error();
    let g = vc.g_diag(&layout);
    let m = m_matrix(spec);

    let mut mg = m;
    for j in 0..r {
        let gj = g[j];
        for i in 0..r {
            mg[(i, j)] *= gj;
        }
    }
    for j in 0..r {
        mg[(j, j)] += s2;
    }
    let inv = linalg::lu_solve(&mg, &DMatrix::identity(r, r))
        .ok_or_else(|| Error::Singular("s2 I + M G is singular".into()))?;
    let mut c22 = inv * s2;
    for i in 0..r {
        let gi = g[i];
        for j in 0..r {
            c22[(i, j)] *= gi;
        }
    }
    linalg::symmetrize(&mut c22);
    Ok(c22)
}

/// BLUE of the estimable function K'b.
pub fn blue(sol: &MmeSolution, k: &DMatrix<f64>) -> Result<DVector<f64>> {
    if k.nrows() != sol.spec.p() {
        return Err(Error::DimensionMismatch(format!(
            "K has {} rows but p = {}",
            k.nrows(),
            sol.spec.p()
        )));
    }
    crate::model::require_estimable(k, &sol.spec.x)?;
    Ok(k.transpose() * &sol.b_tilde)
}

/// BLUP of w = K'b + L'u.
pub fn blup(sol: &MmeSolution, contrast: &ContrastSet) -> Result<DVector<f64>> {
    contrast.check_against(&sol.spec)?;
    let fixed_part = blue(sol, &contrast.k)?;
    Ok(fixed_part + contrast.l.transpose() * &sol.u_tilde)
}

/// Known-variance MSE of the BLUP: M_w = Lambda' C Lambda, symmetric PSD.
pub fn mse_blup(sol: &MmeSolution, contrast: &ContrastSet) -> Result<DMatrix<f64>> {
    contrast.check_against(&sol.spec)?;
    crate::model::require_estimable(&contrast.k, &sol.spec.x)?;
    let lam = contrast.lambda();
    let mut m = lam.transpose() * &sol.c * &lam;
    linalg::symmetrize(&mut m);
    Ok(m)
}
