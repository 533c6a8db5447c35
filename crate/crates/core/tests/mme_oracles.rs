//! The mixed-model-equation solver against dense GLS/BLUP oracles computed
//! straight from V = ZGZ' + sigma2_e I.

mod support;

use lmm_core::mc::{gaussian_cov_se, mc_moments, stacked_truth, McOpts};
use lmm_core::mme;
use nalgebra::{DMatrix, DVector};
use support::*;

const TOL: f64 = 1e-9;

#[test]
fn solutions_match_dense_gls_blup_on_random_instances() {
    let mut rng = rng(7101);
    for trial in 0..60 {
        let inst = random_instance(&mut rng);
        let sol = mme::solve_mme(&inst.spec, &inst.vc).unwrap();
        let dense = dense_gls_blup(&inst.spec, &inst.vc);

        // Fitted values and predicted random effects are g-inverse
        // invariant; the raw fixed solution only matches for full-rank X.
        let fit_mme = &inst.spec.x * &sol.b_tilde;
        let fit_dense = &inst.spec.x * &dense.b_hat;
        assert!(
            rel_vec_err(&fit_mme, &fit_dense) < TOL,
            "trial {trial}: fitted values disagree"
        );
        assert!(
            rel_vec_err(&sol.u_tilde, &dense.u_hat) < TOL,
            "trial {trial}: predicted random effects disagree"
        );
        if inst.full_rank_x {
            assert!(
                rel_vec_err(&sol.b_tilde, &dense.b_hat) < TOL,
                "trial {trial}: full-rank fixed solutions disagree"
            );
        }

        // Estimable functions of the fixed effects.
        let contrast = random_estimable_contrast(&mut rng, &inst.spec, 2);
        let kb_mme = mme::blue(&sol, &contrast.k).unwrap();
        let kb_dense = contrast.k.transpose() * &dense.b_hat;
        assert!(
            rel_vec_err(&kb_mme, &kb_dense) < TOL,
            "trial {trial}: estimable fixed functions disagree"
        );

        // Prediction-error covariance: the C22 block is invariant, and the
        // full MSE sandwich matches the dense joint-covariance blocks.
        assert!(
            rel_mat_err(&sol.c22(), &dense.c22) < TOL,
            "trial {trial}: C22 blocks disagree"
        );
        let mse = mme::mse_blup(&sol, &contrast).unwrap();
        let mse_dense = contrast.k.transpose() * &dense.c11 * &contrast.k
            + contrast.k.transpose() * &dense.c12 * &contrast.l
            + contrast.l.transpose() * dense.c12.transpose() * &contrast.k
            + contrast.l.transpose() * &dense.c22 * &contrast.l;
        assert!(
            rel_mat_err(&mse, &mse_dense) < TOL,
            "trial {trial}: MSE sandwiches disagree"
        );
    }
}

#[test]
fn direct_c_blocks_match_dense_for_full_rank_x() {
    let mut rng = rng(7102);
    let mut seen = 0;
    while seen < 20 {
        let inst = random_instance(&mut rng);
        if !inst.full_rank_x {
            continue;
        }
        seen += 1;
        let sol = mme::solve_mme(&inst.spec, &inst.vc).unwrap();
        let dense = dense_gls_blup(&inst.spec, &inst.vc);
        assert!(rel_mat_err(&sol.c11(), &dense.c11) < TOL);
        assert!(rel_mat_err(&sol.c12(), &dense.c12) < TOL);
    }
}

#[test]
fn fast_c22_identity_holds_on_random_instances() {
    let mut rng = rng(7103);
    for _ in 0..40 {
        let inst = random_instance(&mut rng);
        let sol = mme::solve_mme(&inst.spec, &inst.vc).unwrap();
        let fast = mme::c22_fast(&inst.spec, &inst.vc).unwrap();
        assert!(rel_mat_err(&fast, &sol.c22()) < TOL);
    }
}

#[test]
fn stacked_solution_satisfies_the_raw_system() {
    let mut rng = rng(7104);
    for _ in 0..40 {
        let inst = random_instance(&mut rng);
        let sol = mme::solve_mme(&inst.spec, &inst.vc).unwrap();
        let h = mme::assemble_h(&inst.spec, &inst.vc).unwrap();
        let w = mme::combined_design(&inst.spec);
        let rhs = w.transpose() * &inst.spec.y / inst.vc.error();
        let defect = &h * sol.stacked() - &rhs;
        assert!(defect.norm() < 1e-9 * (1.0 + rhs.norm()));
    }
}

#[test]
fn simulated_moments_match_the_covariance_blocks() {
    // Smaller sibling of the full-scale acceptance run: 3 groups of 3,
    // slope plus intercept, 30k replicates.
    let n = 9;
    let x = DMatrix::from_fn(n, 2, |row, col| {
        if col == 0 {
            1.0
        } else {
            (row % 3) as f64 - 1.0
        }
    });
    let z = DMatrix::from_fn(n, 3, |row, c| if row / 3 == c { 1.0 } else { 0.0 });
    let spec = lmm_core::model::LmmSpec::new(DVector::zeros(n), x, vec![z]).unwrap();
    let vc = lmm_core::model::VarComponents::new(vec![0.8, 0.6]).unwrap();
    let k = DMatrix::from_fn(2, 1, |row, _| if row == 0 { 1.0 } else { -0.5 });
    let beta = DVector::from_vec(vec![1.0, 0.5]);

    let opts = McOpts::new(30_000, 314159);
    let mm = mc_moments(&spec, &vc, &k, &beta, &opts).unwrap();
    let sol = mme::solve_mme(&spec, &vc).unwrap();
    let truth = stacked_truth(&sol, &k);
    let se = gaussian_cov_se(&truth, opts.replicates);
    for i in 0..truth.nrows() {
        for j in 0..truth.ncols() {
            assert!(
                (mm.cov[(i, j)] - truth[(i, j)]).abs() <= 5.0 * se[(i, j)],
                "covariance entry ({i},{j}) outside 5 Monte Carlo SEs"
            );
        }
    }
}
