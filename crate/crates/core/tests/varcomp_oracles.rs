//! Variance-component estimation against dense-V oracles: Fisher trace
//! forms, score equations at the fitted optimum, likelihood values through
//! explicit error contrasts, ANOVA closed forms, and MINQE identities.

mod support;

use lmm_core::model::VarComponents;
use lmm_core::varcomp::{
    estimate_ml, estimate_reml, fisher_ml, fisher_reml, loglik_ml, loglik_reml, minqe,
    minqe_h_matrix, EstimateOpts, FitWarning, VcMethod,
};
use lmm_core::{mme, sim};
use nalgebra::DVector;
use support::*;

#[test]
fn fisher_matrices_match_dense_trace_forms() {
    let mut rng = rng(8201);
    for _ in 0..25 {
        let inst = random_instance(&mut rng);
        let ml = fisher_ml(&inst.spec, &inst.vc).unwrap();
        let reml = fisher_reml(&inst.spec, &inst.vc).unwrap();
        assert!(rel_mat_err(&ml, &fisher_ml_dense(&inst.spec, &inst.vc)) < 1e-9);
        assert!(rel_mat_err(&reml, &fisher_reml_dense(&inst.spec, &inst.vc)) < 1e-9);
    }
}

#[test]
fn minqe_matrices_are_twice_fisher() {
    let mut rng = rng(8202);
    for _ in 0..15 {
        let inst = random_instance(&mut rng);
        let hi = minqe_h_matrix(&inst.spec, &inst.vc, VcMethod::MinqeI).unwrap();
        let hui = minqe_h_matrix(&inst.spec, &inst.vc, VcMethod::MinqeUI).unwrap();
        let fi = fisher_ml(&inst.spec, &inst.vc).unwrap() * 2.0;
        let fui = fisher_reml(&inst.spec, &inst.vc).unwrap() * 2.0;
        assert!(rel_mat_err(&hi, &fi) < 1e-12);
        assert!(rel_mat_err(&hui, &fui) < 1e-12);
    }
}

fn simulated_response(inst: &Instance, seed: u64) -> DVector<f64> {
    let beta = DVector::from_fn(inst.spec.p(), |i, _| 1.0 + i as f64);
    sim::draw_replicate(&inst.spec, &beta, &inst.vc, seed, 0)
        .unwrap()
        .y
}

/// Interior fits only: converged with no boundary or stability warnings.
fn interior(est: &lmm_core::varcomp::VcEstimate) -> bool {
    est.converged && est.warnings.is_empty()
}

#[test]
fn fitted_optima_zero_the_dense_scores() {
    let mut rng = rng(8203);
    let opts = EstimateOpts {
        start: None,
        eps: 1e-12,
        max_iter: 4000,
    };
    let mut checked = 0;
    for trial in 0..40 {
        let inst = random_instance(&mut rng);
        let y = simulated_response(&inst, 8203 + trial);
        let spec = inst.spec.with_response(y.clone()).unwrap();

        for method in [VcMethod::Ml, VcMethod::Reml] {
            let est = match method {
                VcMethod::Ml => estimate_ml(&spec, &y, &opts),
                _ => estimate_reml(&spec, &y, &opts),
            };
            let Ok(est) = est else { continue };
            if !interior(&est) {
                continue;
            }
            let score = match method {
                VcMethod::Ml => ml_score_dense(&spec, &y, &est.sigma2_hat),
                _ => reml_score_dense(&spec, &y, &est.sigma2_hat),
            };
            let scale = 1.0 + est.fisher.norm();
            assert!(
                score.amax() < 1e-6 * scale,
                "trial {trial} {method:?}: score {:.3e} vs scale {scale:.3e}",
                score.amax()
            );
            checked += 1;
        }
    }
    assert!(checked >= 20, "only {checked} interior fits were exercised");
}

#[test]
fn likelihood_values_match_the_dense_oracles() {
    let mut rng = rng(8204);
    for _ in 0..15 {
        let inst = random_instance(&mut rng);
        let y = inst.spec.y.clone();
        let ml = loglik_ml(&inst.spec, &y, &inst.vc).unwrap();
        assert!((ml - loglik_ml_dense(&inst.spec, &y, &inst.vc)).abs() < 1e-9 * (1.0 + ml.abs()));

        // The restricted likelihood equals the density of any orthonormal
        // set of error contrasts; two different bases must agree with each
        // other and with the implementation.
        let reml = loglik_reml(&inst.spec, &y, &inst.vc).unwrap();
        let b1 = error_contrast_basis(&inst.spec.x, None);
        let b2 = error_contrast_basis(&inst.spec.x, Some(&mut rng));
        let d1 = loglik_reml_dense(&inst.spec, &y, &inst.vc, &b1);
        let d2 = loglik_reml_dense(&inst.spec, &y, &inst.vc, &b2);
        assert!((d1 - d2).abs() < 1e-9 * (1.0 + d1.abs()));
        assert!((reml - d1).abs() < 1e-9 * (1.0 + d1.abs()));
    }
}

#[test]
fn likelihood_trace_is_monotone_along_the_iteration() {
    let mut rng = rng(8205);
    for trial in 0..20 {
        let inst = random_instance(&mut rng);
        let y = simulated_response(&inst, 9000 + trial);
        let spec = inst.spec.with_response(y.clone()).unwrap();
        for est in [
            estimate_ml(&spec, &y, &EstimateOpts::default()),
            estimate_reml(&spec, &y, &EstimateOpts::default()),
        ]
        .into_iter()
        .flatten()
        {
            for w in est.loglik_trace.windows(2) {
                assert!(
                    w[1] >= w[0] - 1e-8 * (1.0 + w[0].abs()),
                    "likelihood decreased from {} to {}",
                    w[0],
                    w[1]
                );
            }
        }
    }
}

#[test]
fn balanced_one_way_reml_matches_anova_closed_forms() {
    let (a, m) = (5, 4);
    let spec0 = balanced_one_way(a, m);
    let beta = DVector::from_element(1, 2.0);
    let vc_true = VarComponents::new(vec![1.2, 0.4]).unwrap();
    let y = sim::draw_replicate(&spec0, &beta, &vc_true, 424242, 0).unwrap().y;
    let (msa, mse) = anova_one_way(&y, a, m);
    assert!(msa > mse, "seed must give an interior ANOVA estimate");

    let spec = spec0.with_response(y.clone()).unwrap();
    let est = estimate_reml(&spec, &y, &EstimateOpts::default()).unwrap();
    assert!(interior(&est));
    assert!(rel_err(est.sigma2_hat.random(0), (msa - mse) / m as f64) < 1e-8);
    assert!(rel_err(est.sigma2_hat.error(), mse) < 1e-8);
}

#[test]
fn between_component_floors_when_msa_is_below_mse() {
    // Identical group means with large within-group spread: MSA < MSE and
    // the between variance heads for the boundary.
    let (a, m) = (3, 4);
    let spec0 = balanced_one_way(a, m);
    let pattern = [-3.0, -1.0, 1.0, 3.0];
    let y = DVector::from_fn(a * m, |i, _| pattern[i % m]);
    let (msa, mse) = anova_one_way(&y, a, m);
    assert!(msa < mse);

    let spec = spec0.with_response(y.clone()).unwrap();
    let est = estimate_reml(&spec, &y, &EstimateOpts::default()).unwrap();
    assert!(est
        .warnings
        .iter()
        .any(|w| matches!(w, FitWarning::BoundaryClamped { component: 0 })));
    assert!(est.sigma2_hat.random(0) < 1e-6);
    // With the between component pinned at zero the model collapses to
    // iid errors around the grand mean, whose REML variance is the total
    // sum of squares over n - 1.
    let n = (a * m) as f64;
    let reduced = (msa * (a as f64 - 1.0) + mse * (n - a as f64)) / (n - 1.0);
    assert!(rel_err(est.sigma2_hat.error(), reduced) < 1e-6);
}

#[test]
fn minqe_ui_at_the_reml_estimate_is_a_fixed_point() {
    let mut rng = rng(8207);
    let opts = EstimateOpts {
        start: None,
        eps: 1e-12,
        max_iter: 4000,
    };
    let mut checked = 0;
    for trial in 0..30 {
        let inst = random_instance(&mut rng);
        let y = simulated_response(&inst, 8207 + trial);
        let spec = inst.spec.with_response(y.clone()).unwrap();
        let Ok(est) = estimate_reml(&spec, &y, &opts) else {
            continue;
        };
        if !interior(&est) {
            continue;
        }
        let one_step = minqe(&spec, &y, &est.sigma2_hat, VcMethod::MinqeUI).unwrap();
        for i in 0..est.sigma2_hat.len() {
            assert!(
                rel_err(one_step.sigma2_hat.as_slice()[i], est.sigma2_hat.as_slice()[i]) < 1e-8,
                "trial {trial} component {i}"
            );
        }
        checked += 1;
    }
    assert!(checked >= 12, "only {checked} interior fits were exercised");
}

#[test]
fn minqe_ui_at_the_truth_is_unbiased() {
    // MINQE(U,I) evaluated at the true variance components is unbiased;
    // check the Monte Carlo average on a seed-fixed run. The design is
    // large enough that the positivity floor fires rarely and moves the
    // average well under the tolerance band.
    let (a, m) = (8, 4);
    let spec0 = balanced_one_way(a, m);
    let beta = DVector::from_element(1, 1.0);
    let vc_true = VarComponents::new(vec![2.0, 0.5]).unwrap();
    let reps = 1500;

    let mut sums = [0.0f64; 2];
    let mut sums_sq = [0.0f64; 2];
    for rep in 0..reps {
        let y = sim::draw_replicate(&spec0, &beta, &vc_true, 555, rep).unwrap().y;
        let spec = spec0.with_response(y.clone()).unwrap();
        let est = minqe(&spec, &y, &vc_true, VcMethod::MinqeUI).unwrap();
        for i in 0..2 {
            let v = est.sigma2_hat.as_slice()[i];
            sums[i] += v;
            sums_sq[i] += v * v;
        }
    }
    let n = reps as f64;
    for i in 0..2 {
        let mean = sums[i] / n;
        let sd = ((sums_sq[i] - n * mean * mean) / (n - 1.0)).sqrt();
        let se = sd / n.sqrt();
        let truth = vc_true.as_slice()[i];
        assert!(
            (mean - truth).abs() <= 5.0 * se,
            "component {i}: mean {mean:.4} vs truth {truth:.4} (se {se:.4})"
        );
    }
}

#[test]
fn minqe_ui_and_reml_recursion_agree_on_convergence() {
    // Iterating MINQE(U,I) to its own fixed point is another route to the
    // REML equations; both solvers must land on the same estimate.
    let mut rng = rng(8209);
    let opts = EstimateOpts {
        start: None,
        eps: 1e-12,
        max_iter: 4000,
    };
    let mut checked = 0;
    for trial in 0..20 {
        let inst = random_instance(&mut rng);
        let y = simulated_response(&inst, 777 + trial);
        let spec = inst.spec.with_response(y.clone()).unwrap();
        let Ok(reml) = estimate_reml(&spec, &y, &opts) else {
            continue;
        };
        if !interior(&reml) {
            continue;
        }
        // Fixed-point iteration of the one-shot estimator.
        let mut prior = reml.sigma2_hat.clone();
        // Start from a perturbed point to make this a real search.
        let perturbed: Vec<f64> = prior.as_slice().iter().map(|v| v * 1.7).collect();
        prior = VarComponents::new(perturbed).unwrap();
        let mut ok = true;
        for _ in 0..600 {
            let step = minqe(&spec, &y, &prior, VcMethod::MinqeUI).unwrap();
            if !step.warnings.is_empty() {
                ok = false;
                break;
            }
            let delta: f64 = step
                .sigma2_hat
                .as_slice()
                .iter()
                .zip(prior.as_slice())
                .map(|(a, b)| (a - b).abs())
                .sum();
            prior = step.sigma2_hat.clone();
            if delta < 1e-12 {
                break;
            }
        }
        if !ok {
            continue;
        }
        for i in 0..prior.len() {
            assert!(
                rel_err(prior.as_slice()[i], reml.sigma2_hat.as_slice()[i]) < 1e-7,
                "trial {trial} component {i}"
            );
        }
        checked += 1;
    }
    assert!(checked >= 8, "only {checked} interior fits were exercised");
}

#[test]
fn estimates_embed_a_solution_at_the_estimate() {
    let mut rng = rng(8210);
    let inst = random_instance(&mut rng);
    let y = simulated_response(&inst, 31);
    let spec = inst.spec.with_response(y.clone()).unwrap();
    let est = estimate_reml(&spec, &y, &EstimateOpts::default()).unwrap();
    let fresh = mme::solve_mme_with_y(&spec, &est.sigma2_hat, &y).unwrap();
    assert!(rel_vec_err(&est.solution.b_tilde, &fresh.b_tilde) < 1e-12);
    assert!(rel_vec_err(&est.solution.u_tilde, &fresh.u_tilde) < 1e-12);
}
