//! Seeded simulation from the model y = Xb + sum_i Z_i u_i + e with
//! u_i ~ N(0, sigma2_i I) and e ~ N(0, sigma2_{s+1} I).
//!
//! Reproducibility contract: replicate k of a run with seed s always uses
//! stream k of a ChaCha generator seeded with s, so a draw depends only on
//! (seed, replicate index), never on scheduling or batching.

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{LmmSpec, VarComponents};

/// One simulated replicate: the response and the realized random effects
/// (stacked across blocks), kept for prediction-error diagnostics.
#[derive(Debug, Clone)]
pub struct SimDraw {
    pub y: DVector<f64>,
    pub u: DVector<f64>,
}

/// Generator for one replicate of a seeded run.
pub fn rng_for_replicate(seed: u64, replicate: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    rng
}

fn standard_normal_vector<R: Rng>(rng: &mut R, len: usize) -> DVector<f64> {
    DVector::from_iterator(len, (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Draws (y, u) on the spec's design. The draw order is fixed: random-effect
/// blocks first (in block order), then the error vector.
pub fn draw_response<R: Rng>(
    spec: &LmmSpec,
    beta: &DVector<f64>,
    vc: &VarComponents,
    rng: &mut R,
) -> Result<SimDraw> {
    if beta.len() != spec.p() {
        return Err(Error::DimensionMismatch(format!(
            "beta has length {} but the design has p = {}",
            beta.len(),
            spec.p()
        )));
    }
    vc.check_against(spec)?;

    let mut y = &spec.x * beta;
    let mut u = DVector::zeros(spec.r());
    let mut offset = 0;
    for (i, z) in spec.z_blocks.iter().enumerate() {
        let r_i = z.ncols();
        let u_i = standard_normal_vector(rng, r_i) * vc.random(i).sqrt();
        y += z * &u_i;
        u.rows_mut(offset, r_i).copy_from(&u_i);
        offset += r_i;
    }
    y += standard_normal_vector(rng, spec.n()) * vc.error().sqrt();
    Ok(SimDraw { y, u })
}

/// Convenience wrapper: replicate `replicate` of the run (seed, design).
pub fn draw_replicate(
    spec: &LmmSpec,
    beta: &DVector<f64>,
    vc: &VarComponents,
    seed: u64,
    replicate: u64,
) -> Result<SimDraw> {
    let mut rng = rng_for_replicate(seed, replicate);
    draw_response(spec, beta, vc, &mut rng)
}
