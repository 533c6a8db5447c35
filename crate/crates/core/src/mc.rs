//! Monte Carlo verification of the solution moments: simulate responses on
//! a fixed design at fixed variance components, push each through the
//! prefactored MME solve, and accumulate sample covariances of the stacked
//! statistic (K'b~, u~, u~ - u).
//!
//! Determinism contract: replicate k always draws from stream k of the run
//! seed (see [`crate::sim`]), chunks have a fixed size, and chunk sums are
//! reduced in index order. Sequential and parallel execution therefore
//! produce bit-identical results.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::mme::{self, MmeSolution};
use crate::model::{self, LmmSpec, VarComponents};
use crate::sim;

/// Replicates per accumulation chunk. Fixed so that the chunk boundaries,
/// and hence the floating-point summation order, do not depend on the
/// thread count.
pub const MC_CHUNK: usize = 1024;

/// Execution mode for the replicate loop. `Parallel` distributes whole
/// chunks over a thread pool; without the `parallel` feature it quietly
/// degrades to the sequential path, which computes the same bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

/// Options for a Monte Carlo moment run.
#[derive(Debug, Clone)]
pub struct McOpts {
    pub replicates: usize,
    pub seed: u64,
    pub execution: Execution,
}

impl McOpts {
    pub fn new(replicates: usize, seed: u64) -> Self {
        McOpts {
            replicates,
            seed,
            execution: Execution::default(),
        }
    }
}

/// Sample moments of the stacked statistic t = (K'b~, u~, u~ - u).
#[derive(Debug, Clone)]
pub struct McMoments {
    pub replicates: usize,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    q: usize,
    r: usize,
}

impl McMoments {
    /// Sample covariance of K'b~ (population value K'C11K).
    pub fn var_blue(&self) -> DMatrix<f64> {
        self.cov.view((0, 0), (self.q, self.q)).into_owned()
    }

    /// Sample covariance of u~ (population value G - C22).
    pub fn var_u_tilde(&self) -> DMatrix<f64> {
        self.cov.view((self.q, self.q), (self.r, self.r)).into_owned()
    }

    /// Sample covariance of the prediction error u~ - u (population C22).
    pub fn var_prediction_error(&self) -> DMatrix<f64> {
        let o = self.q + self.r;
        self.cov.view((o, o), (self.r, self.r)).into_owned()
    }

    /// Sample cross-covariance of K'b~ with u~ (population zero).
    pub fn cov_blue_u_tilde(&self) -> DMatrix<f64> {
        self.cov.view((0, self.q), (self.q, self.r)).into_owned()
    }

    /// Sample cross-covariance of K'b~ with u~ - u (population K'C12).
    pub fn cov_blue_prediction_error(&self) -> DMatrix<f64> {
        self.cov
            .view((0, self.q + self.r), (self.q, self.r))
            .into_owned()
    }
}

/// Population covariance of the stacked statistic, assembled from the C
/// blocks: var(K'b~) = K'C11K, var(u~) = G - C22, var(u~ - u) = C22,
/// cov(K'b~, u~) = 0, cov(K'b~, u~ - u) = K'C12, cov(u~, u~ - u) = 0.
pub fn stacked_truth(sol: &MmeSolution, k: &DMatrix<f64>) -> DMatrix<f64> {
    let layout = sol.layout();
    let r = layout.r();
    let q = k.ncols();
    let dim = q + 2 * r;
    let mut t = DMatrix::zeros(dim, dim);

    let var_blue = k.transpose() * sol.c11() * k;
    t.view_mut((0, 0), (q, q)).copy_from(&var_blue);

    let c22 = sol.c22();
    let g = sol.sigma2_used.g_diag(&layout);
    let mut var_u_tilde = -c22.clone();
    for i in 0..r {
        var_u_tilde[(i, i)] += g[i];
    }
    t.view_mut((q, q), (r, r)).copy_from(&var_u_tilde);
    t.view_mut((q + r, q + r), (r, r)).copy_from(&c22);

    let cross = k.transpose() * sol.c12();
    t.view_mut((0, q + r), (q, r)).copy_from(&cross);
    t.view_mut((q + r, 0), (r, q)).copy_from(&cross.transpose());

    t
}

/// Monte Carlo standard error of each entry of a sample covariance matrix
/// of a Gaussian vector with population covariance `truth` over N draws:
/// se_ij = sqrt((T_ii T_jj + T_ij^2)/(N - 1)).
pub fn gaussian_cov_se(truth: &DMatrix<f64>, replicates: usize) -> DMatrix<f64> {
    let n = truth.nrows();
    DMatrix::from_fn(n, n, |i, j| {
        ((truth[(i, i)] * truth[(j, j)] + truth[(i, j)] * truth[(i, j)])
            / (replicates as f64 - 1.0))
            .sqrt()
    })
}

fn map_chunks<F>(nchunks: usize, execution: Execution, f: F) -> Vec<(DVector<f64>, DMatrix<f64>)>
where
    F: Fn(usize) -> (DVector<f64>, DMatrix<f64>) + Sync + Send,
{
    match execution {
        Execution::Sequential => (0..nchunks).map(f).collect(),
        Execution::Parallel => {
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                (0..nchunks).into_par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                (0..nchunks).map(f).collect()
            }
        }
    }
}

/// Runs `opts.replicates` simulations of y on the design at (beta, vc) and
/// returns sample moments of (K'b~, u~, u~ - u). The per-replicate solve is
/// prefactored: the stacked solution is S y with S = C W'/sigma2_{s+1}.
pub fn mc_moments(
    spec: &LmmSpec,
    vc: &VarComponents,
    k: &DMatrix<f64>,
    beta: &DVector<f64>,
    opts: &McOpts,
) -> Result<McMoments> {
    vc.check_against(spec)?;
    if k.nrows() != spec.p() {
        return Err(Error::DimensionMismatch(format!(
            "K has {} rows but p = {}",
            k.nrows(),
            spec.p()
        )));
    }
    model::require_estimable(k, &spec.x)?;
    if beta.len() != spec.p() {
        return Err(Error::DimensionMismatch(format!(
            "beta has length {} but p = {}",
            beta.len(),
            spec.p()
        )));
    }
    if opts.replicates < 2 {
        return Err(Error::InvalidArgument(
            "Monte Carlo moments need at least 2 replicates".into(),
        ));
    }

    let layout = spec.layout();
    let (p, r, q) = (layout.p, layout.r(), k.ncols());
    let dim = q + 2 * r;

    let sol0 = mme::solve_mme(spec, vc)?;
    let s_mat = (&sol0.c * mme::combined_design(spec).transpose()) / vc.error();

    let run_chunk = |chunk_idx: usize| -> (DVector<f64>, DMatrix<f64>) {
        let lo = chunk_idx * MC_CHUNK;
        let hi = ((chunk_idx + 1) * MC_CHUNK).min(opts.replicates);
        let mut sum = DVector::zeros(dim);
        let mut sumsq = DMatrix::zeros(dim, dim);
        let mut stat = DVector::zeros(dim);
        for rep in lo..hi {
            let draw = sim::draw_replicate(spec, beta, vc, opts.seed, rep as u64)
                .expect("inputs validated before the replicate loop");
            let stacked = &s_mat * &draw.y;
            let kb = k.transpose() * stacked.rows(0, p);
            stat.rows_mut(0, q).copy_from(&kb);
            stat.rows_mut(q, r).copy_from(&stacked.rows(p, r));
            stat
                .rows_mut(q + r, r)
                .copy_from(&(stacked.rows(p, r) - &draw.u));
            sum += &stat;
            sumsq.ger(1.0, &stat, &stat, 1.0);
        }
        (sum, sumsq)
    };

    let nchunks = opts.replicates.div_ceil(MC_CHUNK);
    let chunk_sums = map_chunks(nchunks, opts.execution, run_chunk);

    // In-order reduction shared by both execution modes.
    let mut sum = DVector::zeros(dim);
    let mut sumsq = DMatrix::zeros(dim, dim);
    for (s, ss) in &chunk_sums {
        sum += s;
        sumsq += ss;
    }
    let nf = opts.replicates as f64;
    let mean = sum / nf;
    let mut cov = (sumsq - &mean * mean.transpose() * nf) / (nf - 1.0);
    linalg::symmetrize(&mut cov);

    Ok(McMoments {
        replicates: opts.replicates,
        mean,
        cov,
        q,
        r,
    })
}
