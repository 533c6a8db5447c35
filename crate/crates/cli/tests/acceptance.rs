//! Final entry of the release checklist: the simulate -> fit -> infer
//! pipeline through the installed binary reproduces the in-process API
//! results bit for bit, and the fit artifact round-trips losslessly.

use lmm_cli::artifact::FitArtifact;
use lmm_cli::table::read_csv;
use lmm_core::inference::{infer, Df, KrVariant, Method};
use lmm_core::model::{build_from_table, ContrastSet, FixedTerm, ModelDescription};
use lmm_core::varcomp::{estimate_reml, EstimateOpts};
use nalgebra::{DMatrix, DVector};
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lmm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmm"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn report(number: u32, name: &str, ok: bool, detail: String) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    println!("ACCEPTANCE {number:02} {name}: {verdict} ({detail})");
    assert!(ok, "acceptance check {number:02} {name} failed: {detail}");
}

#[test]
fn check_10_pipeline_matches_the_in_memory_api() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    // Simulation is deterministic by seed: two runs, identical bytes.
    let sim_args = [
        "simulate", "--levels", "4", "--reps", "5", "--sigma2", "1.0,0.25", "--beta", "10",
        "--seed", "20240", "--out",
    ];
    let out = lmm(root, &[&sim_args[..], &["d.csv"]].concat());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out = lmm(root, &[&sim_args[..], &["d_again.csv"]].concat());
    assert_eq!(out.status.code(), Some(0));
    let bytes_a = fs::read(root.join("d.csv")).unwrap();
    let bytes_b = fs::read(root.join("d_again.csv")).unwrap();
    let sim_deterministic = bytes_a == bytes_b;

    // Fit through the binary.
    fs::write(root.join("m.json"), "{ \"response\": \"y\", \"random\": [\"f1\"] }\n").unwrap();
    let out = lmm(
        root,
        &["fit", "--data", "d.csv", "--model", "m.json", "--method", "reml", "--out", "fit.json"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let artifact: FitArtifact =
        serde_json::from_str(&fs::read_to_string(root.join("fit.json")).unwrap()).unwrap();

    // The same fit through the API, on the same parsed file.
    let table = read_csv(&root.join("d.csv")).unwrap();
    let description = ModelDescription {
        response: "y".into(),
        intercept: true,
        fixed_terms: Vec::<FixedTerm>::new(),
        random_factors: vec!["f1".into()],
    };
    let spec = build_from_table(&table, &description).unwrap();
    let y = spec.y.clone();
    let est = estimate_reml(&spec, &y, &EstimateOpts::default()).unwrap();

    let fit_bitwise = artifact.estimates.sigma2_hat == est.sigma2_hat.as_slice()
        && artifact.estimates.loglik == est.loglik
        && artifact.estimates.b_hat == est.solution.b_tilde.iter().copied().collect::<Vec<_>>()
        && artifact
            .estimates
            .u_hat
            .iter()
            .map(|u| u.value)
            .collect::<Vec<_>>()
            == est.solution.u_tilde.iter().copied().collect::<Vec<_>>()
        && artifact.estimates.fisher.to_matrix().unwrap() == est.fisher
        && artifact.estimates.sigma_cov_hat.as_ref().map(|m| m.to_matrix().unwrap())
            == est.sigma_cov_hat;

    // Inference through the binary, one scalar and one two-row contrast.
    fs::write(
        root.join("c1.json"),
        "{ \"rows\": [ { \"dense\": { \"k\": [1.0] } } ] }\n",
    )
    .unwrap();
    fs::write(
        root.join("c2.json"),
        "{ \"rows\": [ { \"dense\": { \"k\": [1.0] } }, \
           { \"select\": { \"terms\": [ {\"name\": \"(Intercept)\", \"coef\": 1.0}, \
                                        {\"name\": \"f1:l1\", \"coef\": 1.0} ] } } ] }\n",
    )
    .unwrap();
    let contrast1 = ContrastSet::fixed_only(DMatrix::from_element(1, 1, 1.0), spec.r()).unwrap();
    let mut l2 = DMatrix::zeros(spec.r(), 2);
    l2[(0, 1)] = 1.0;
    let contrast2 = ContrastSet::new(DMatrix::from_element(1, 2, 1.0), l2).unwrap();

    let runs: [(&str, &str, Method, &ContrastSet); 5] = [
        ("c1.json", "satterthwaite", Method::Satterthwaite, &contrast1),
        ("c1.json", "kr-modified", Method::KenwardRoger(KrVariant::Modified), &contrast1),
        ("c2.json", "kr", Method::KenwardRoger(KrVariant::Plain), &contrast2),
        ("c2.json", "fai-cornelius", Method::FaiCornelius, &contrast2),
        ("c2.json", "exact-chisq", Method::ExactChiSquare, &contrast2),
    ];
    let mut infer_bitwise = true;
    let mut anchor_gap = 0.0f64;
    for (cfile, mflag, method, contrast) in runs {
        let out = lmm(
            root,
            &["infer", "--fit", "fit.json", "--contrast", cfile, "--method", mflag, "--out", "r.json"],
        );
        assert_eq!(out.status.code(), Some(0), "{mflag}: {}", String::from_utf8_lossy(&out.stderr));
        let rep: lmm_cli::artifact::Report =
            serde_json::from_str(&fs::read_to_string(root.join("r.json")).unwrap()).unwrap();

        let w0 = DVector::zeros(contrast.q());
        let res = infer(
            &est.solution,
            contrast,
            est.sigma_cov_hat.as_ref(),
            &w0,
            method,
            0.95,
        )
        .unwrap();
        let nu_match = match (rep.nu, res.df2) {
            (Some(a), Df::Finite(b)) => a == b,
            (None, Df::Infinite) => true,
            _ => false,
        };
        infer_bitwise &= rep.p_value == res.p_value
            && rep.statistic == res.statistic
            && rep.kappa == res.kappa
            && nu_match
            && rep.w_hat == res.w_hat.iter().copied().collect::<Vec<_>>()
            && rep.mse.to_matrix().unwrap() == res.mse_used
            && rep.interval.map(|[lo, hi]| (lo, hi)) == res.interval
            && rep.region.radius2 == res.region.radius2;

        // The balanced one-way anchor through the pipeline: modified KR on
        // the intercept gives kappa = 1 and df = a - 1.
        if mflag == "kr-modified" {
            let nu = rep.nu.unwrap();
            anchor_gap = (rep.kappa - 1.0).abs().max((nu - 3.0).abs());
        }
    }

    // Lossless round-trip: parse, re-serialize, parse again.
    let original = fs::read_to_string(root.join("fit.json")).unwrap();
    lmm_cli::artifact::write_json(&root.join("fit_rt.json"), &artifact).unwrap();
    let rewritten = fs::read_to_string(root.join("fit_rt.json")).unwrap();
    let reparsed: FitArtifact = serde_json::from_str(&rewritten).unwrap();
    let round_trip = original == rewritten && reparsed == artifact;

    report(
        10,
        "command-line pipeline matches the in-memory API",
        sim_deterministic && fit_bitwise && infer_bitwise && round_trip && anchor_gap < 1e-6,
        format!(
            "simulate byte-identical: {sim_deterministic}, fit fields bitwise: {fit_bitwise}, \
             5 inference runs bitwise: {infer_bitwise}, artifact round-trip: {round_trip}, \
             anchor (kappa, df) gap {anchor_gap:.2e}"
        ),
    );
}
