//! The three subcommands. `fit` and `simulate` wrap the estimation and
//! simulation APIs; `infer` reconstructs the fitted solution from the
//! artifact with the same solve call the estimator used, so its numbers
//! match an in-process run bit for bit.
//!
//! Exit codes: 0 success; 1 input or estimability errors; 2 fit did not
//! converge (artifact still written); 3 degrees of freedom undefined
//! (partial report still written).

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use lmm_core::inference::{infer, Df, InferenceResult, KrVariant, Method};
use lmm_core::model::{build_from_table, FixedTerm, LmmSpec, ModelDescription, RandomFactor};
use lmm_core::varcomp::{estimate_ml, estimate_reml, minqe, EstimateOpts, VcEstimate, VcMethod};
use lmm_core::{mme, sim, Error, VarComponents};
use nalgebra::{DMatrix, DVector};
use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use crate::artifact::{
    self, DesignJson, Estimates, FactorEcho, FitArtifact, FitOptions, FixedTermJson, MatrixJson,
    ModelEcho, ModelFile, PartialReport, RegionJson, Report, UEntry,
};
use crate::contrast::read_contrast_file;
use crate::table::{read_csv, write_csv};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FitMethod {
    Reml,
    Ml,
    MinqeI,
    MinqeUi,
}

impl FitMethod {
    fn as_str(self) -> &'static str {
        match self {
            FitMethod::Reml => "reml",
            FitMethod::Ml => "ml",
            FitMethod::MinqeI => "minqe-i",
            FitMethod::MinqeUi => "minqe-ui",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InferMethod {
    Satterthwaite,
    FaiCornelius,
    Kr,
    KrModified,
    ExactChisq,
}

impl InferMethod {
    fn as_str(self) -> &'static str {
        match self {
            InferMethod::Satterthwaite => "satterthwaite",
            InferMethod::FaiCornelius => "fai-cornelius",
            InferMethod::Kr => "kr",
            InferMethod::KrModified => "kr-modified",
            InferMethod::ExactChisq => "exact-chisq",
        }
    }

    fn to_core(self) -> Method {
        match self {
            InferMethod::Satterthwaite => Method::Satterthwaite,
            InferMethod::FaiCornelius => Method::FaiCornelius,
            InferMethod::Kr => Method::KenwardRoger(KrVariant::Plain),
            InferMethod::KrModified => Method::KenwardRoger(KrVariant::Modified),
            InferMethod::ExactChisq => Method::ExactChiSquare,
        }
    }
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// CSV data file with a header row.
    #[arg(long)]
    pub data: PathBuf,
    /// JSON model description (response, fixed terms, random factors).
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value_t = FitMethod::Reml)]
    pub method: FitMethod,
    /// Convergence threshold on the variance-component updates.
    #[arg(long, default_value_t = 1e-8)]
    pub eps: f64,
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
    /// Start values sigma2_1,...,sigma2_{s+1} for the iterative methods.
    #[arg(long, value_delimiter = ',')]
    pub start: Option<Vec<f64>>,
    /// Prior values for the MINQE methods (defaults to the start heuristic).
    #[arg(long, value_delimiter = ',')]
    pub prior: Option<Vec<f64>>,
    /// Output path of the fit artifact (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Fit artifact produced by `lmm fit`.
    #[arg(long)]
    pub fit: PathBuf,
    /// JSON contrast file: dense rows or symbolic selectors.
    #[arg(long)]
    pub contrast: PathBuf,
    #[arg(long, value_enum)]
    pub method: InferMethod,
    /// Null value, one entry per contrast row (defaults to zeros).
    #[arg(long, value_delimiter = ',')]
    pub null: Option<Vec<f64>>,
    /// Confidence/prediction level.
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Output path of the report (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Level counts, one per random factor.
    #[arg(long, value_delimiter = ',')]
    pub levels: Vec<usize>,
    /// Observations per combination of factor levels.
    #[arg(long, default_value_t = 1)]
    pub reps: usize,
    /// True variance components sigma2_1,...,sigma2_s and the error last.
    #[arg(long, value_delimiter = ',')]
    pub sigma2: Vec<f64>,
    /// True intercept.
    #[arg(long, value_delimiter = ',')]
    pub beta: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output path of the dataset (CSV).
    #[arg(long)]
    pub out: PathBuf,
}

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

fn vec_summary(v: &DVector<f64>) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
    format!("[{}]", parts.join(", "))
}

pub fn run_fit(args: &FitArgs) -> Result<u8> {
    let table = read_csv(&args.data)?;
    let model_file = artifact::read_model_file(&args.model)?;
    let description = ModelDescription {
        response: model_file.response.clone(),
        intercept: model_file.intercept,
        fixed_terms: model_file
            .fixed
            .iter()
            .map(|t| match t {
                FixedTermJson::Numeric(name) => FixedTerm::Numeric(name.clone()),
                FixedTermJson::Categorical(name) => FixedTerm::Categorical(name.clone()),
            })
            .collect(),
        random_factors: model_file.random.clone(),
    };
    let spec = build_from_table(&table, &description)?;
    let y = spec.y.clone();

    let est = match args.method {
        FitMethod::Reml | FitMethod::Ml => {
            if args.prior.is_some() {
                bail!("--prior applies to the MINQE methods; use --start here");
            }
            let opts = EstimateOpts {
                start: args.start.clone(),
                eps: args.eps,
                max_iter: args.max_iter,
            };
            if args.method == FitMethod::Reml {
                estimate_reml(&spec, &y, &opts)?
            } else {
                estimate_ml(&spec, &y, &opts)?
            }
        }
        FitMethod::MinqeI | FitMethod::MinqeUi => {
            if args.start.is_some() {
                bail!("--start applies to the iterative methods; use --prior here");
            }
            let prior_vals = match &args.prior {
                Some(v) => v.clone(),
                None => vec![sample_variance(&y) / (spec.s() as f64 + 1.0); spec.s() + 1],
            };
            let prior =
                VarComponents::new(prior_vals).context("MINQE prior must be positive")?;
            let kind = if args.method == FitMethod::MinqeI {
                VcMethod::MinqeI
            } else {
                VcMethod::MinqeUI
            };
            minqe(&spec, &y, &prior, kind)?
        }
    };

    let art = build_artifact(args, &spec, &model_file, &est);
    artifact::write_json(&args.out, &art)?;

    println!("method: {}", args.method.as_str());
    println!(
        "converged: {} ({} iteration{})",
        est.converged,
        est.iterations,
        if est.iterations == 1 { "" } else { "s" }
    );
    println!("sigma2_hat: {}", vec_summary(&DVector::from_vec(est.sigma2_hat.as_slice().to_vec())));
    if let Some(ll) = est.loglik {
        println!("loglik: {ll:.6}");
    }
    for w in &est.warnings {
        println!("warning: {w}");
    }
    println!("wrote {}", args.out.display());
    Ok(if est.converged { 0 } else { 2 })
}

fn build_artifact(
    args: &FitArgs,
    spec: &LmmSpec,
    model_file: &ModelFile,
    est: &VcEstimate,
) -> FitArtifact {
    let mut u_hat = Vec::new();
    for (i, factor) in spec.random_factors.iter().enumerate() {
        let ui = est.solution.u_tilde_block(i);
        for (j, level) in factor.column_labels.iter().enumerate() {
            u_hat.push(UEntry {
                factor: factor.name.clone(),
                level: level.clone(),
                value: ui[j],
            });
        }
    }
    FitArtifact {
        schema: artifact::FIT_SCHEMA.to_string(),
        created_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .unwrap_or_default()
            .as_secs(),
        method: args.method.as_str().to_string(),
        options: FitOptions {
            eps: args.eps,
            max_iter: args.max_iter,
            start: args.start.clone(),
            prior: args.prior.clone(),
        },
        model: ModelEcho {
            response: model_file.response.clone(),
            intercept: model_file.intercept,
            fixed_terms: model_file.fixed.clone(),
            fixed_labels: spec.fixed_labels.clone(),
            random_factors: spec
                .random_factors
                .iter()
                .map(|f| FactorEcho {
                    name: f.name.clone(),
                    levels: f.column_labels.clone(),
                })
                .collect(),
        },
        design: DesignJson {
            y: spec.y.iter().copied().collect(),
            x: MatrixJson::from_matrix(&spec.x),
            z_blocks: spec.z_blocks.iter().map(MatrixJson::from_matrix).collect(),
        },
        estimates: Estimates {
            sigma2_hat: est.sigma2_hat.as_slice().to_vec(),
            fisher: MatrixJson::from_matrix(&est.fisher),
            sigma_cov_hat: est.sigma_cov_hat.as_ref().map(MatrixJson::from_matrix),
            loglik: est.loglik,
            iterations: est.iterations,
            converged: est.converged,
            warnings: est.warnings.iter().map(ToString::to_string).collect(),
            b_hat: est.solution.b_tilde.iter().copied().collect(),
            u_hat,
        },
    }
}

pub fn run_infer(args: &InferArgs) -> Result<u8> {
    let art = artifact::read_fit_artifact(&args.fit)?;
    let spec = art.to_spec()?;
    let vc = art.sigma2_hat()?;
    let y = spec.y.clone();
    // The same call the estimator made, on bit-identical inputs; the
    // reconstructed solution therefore equals the in-process one exactly.
    let sol = mme::solve_mme_with_y(&spec, &vc, &y)?;

    let contrast = read_contrast_file(&args.contrast, &art.model)?;
    let q = contrast.q();
    let w0 = match &args.null {
        Some(v) if v.len() == q => DVector::from_vec(v.clone()),
        Some(v) => bail!(
            "--null has {} entries but the contrast file has {q} rows",
            v.len()
        ),
        None => DVector::zeros(q),
    };
    let sigma = art
        .estimates
        .sigma_cov_hat
        .as_ref()
        .map(|m| m.to_matrix())
        .transpose()?;

    match infer(&sol, &contrast, sigma.as_ref(), &w0, args.method.to_core(), args.level) {
        Ok(res) => {
            let report = build_report(args, &res);
            artifact::write_json(&args.out, &report)?;
            print_report(&report);
            println!("wrote {}", args.out.display());
            Ok(0)
        }
        Err(err @ (Error::DfUndefined(_) | Error::ZeroVarianceOfVariance(_))) => {
            let w_hat = mme::blup(&sol, &contrast)?;
            let mse = mme::mse_blup(&sol, &contrast)?;
            let report = PartialReport {
                schema: artifact::PARTIAL_REPORT_SCHEMA.to_string(),
                method: args.method.as_str().to_string(),
                level: args.level,
                w_hat: w_hat.iter().copied().collect(),
                w0: w0.iter().copied().collect(),
                mse_plugin: MatrixJson::from_matrix(&mse),
                flags: vec![err.to_string()],
            };
            artifact::write_json(&args.out, &report)?;
            eprintln!("degrees of freedom undefined: {err}");
            println!("w_hat: {}", vec_summary(&w_hat));
            println!("wrote partial report {}", args.out.display());
            Ok(3)
        }
        Err(other) => Err(other.into()),
    }
}

fn build_report(args: &InferArgs, res: &InferenceResult) -> Report {
    Report {
        schema: artifact::REPORT_SCHEMA.to_string(),
        method: args.method.as_str().to_string(),
        level: res.level,
        q: res.df1,
        w_hat: res.w_hat.iter().copied().collect(),
        w0: res.w0.iter().copied().collect(),
        mse: MatrixJson::from_matrix(&res.mse_used),
        statistic: res.statistic,
        kappa: res.kappa,
        nu: match res.df2 {
            Df::Finite(v) => Some(v),
            Df::Infinite => None,
        },
        p_value: res.p_value,
        interval: res.interval.map(|(lo, hi)| [lo, hi]),
        region: RegionJson {
            center: res.region.center.iter().copied().collect(),
            shape: MatrixJson::from_matrix(&res.region.shape),
            radius2: res.region.radius2,
        },
        flags: res.flags.iter().map(ToString::to_string).collect(),
    }
}

fn print_report(report: &Report) {
    println!("method: {}", report.method);
    println!(
        "w_hat: [{}]  w0: [{}]",
        report
            .w_hat
            .iter()
            .map(|v| format!("{v:.6}"))
            .collect::<Vec<_>>()
            .join(", "),
        report
            .w0
            .iter()
            .map(|v| format!("{v:.6}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    let nu = report
        .nu
        .map(|v| format!("{v:.6}"))
        .unwrap_or_else(|| "inf".to_string());
    println!(
        "statistic: {:.6} (kappa = {:.6}, df = ({}, {nu}))",
        report.statistic, report.kappa, report.q
    );
    println!("p = {:.6}", report.p_value);
    if let Some([lo, hi]) = report.interval {
        println!("{:.1}% interval: [{lo:.6}, {hi:.6}]", 100.0 * report.level);
    }
    for flag in &report.flags {
        println!("note: {flag}");
    }
}

pub fn run_simulate(args: &SimulateArgs) -> Result<u8> {
    if args.levels.is_empty() {
        bail!("--levels needs at least one factor size");
    }
    if args.levels.iter().any(|&a| a < 2) {
        bail!("every random factor needs at least 2 levels");
    }
    if args.reps == 0 {
        bail!("--reps must be positive");
    }
    let s = args.levels.len();
    if args.sigma2.len() != s + 1 {
        bail!(
            "--sigma2 needs {} values ({s} random component{} plus the error), got {}",
            s + 1,
            if s == 1 { "" } else { "s" },
            args.sigma2.len()
        );
    }
    let vc = VarComponents::new(args.sigma2.clone())
        .context("true variance components must be positive")?;
    if args.beta.len() != 1 {
        bail!(
            "--beta needs exactly 1 value (the design is intercept-only), got {}",
            args.beta.len()
        );
    }

    let cells: usize = args.levels.iter().product();
    let n = cells * args.reps;
    // Full factorial over the factors, `reps` rows per cell, factor level
    // index in mixed radix with the last factor varying fastest.
    let mut strides = vec![1usize; s];
    for i in (0..s.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * args.levels[i + 1];
    }
    let level_of = |row: usize, factor: usize| (row / args.reps / strides[factor]) % args.levels[factor];

    let x = DMatrix::from_element(n, 1, 1.0);
    let mut z_blocks = Vec::with_capacity(s);
    let mut factors = Vec::with_capacity(s);
    for (i, &a) in args.levels.iter().enumerate() {
        let z = DMatrix::from_fn(n, a, |row, col| {
            if level_of(row, i) == col {
                1.0
            } else {
                0.0
            }
        });
        z_blocks.push(z);
        factors.push(RandomFactor {
            name: format!("f{}", i + 1),
            column_labels: (1..=a).map(|l| format!("l{l}")).collect(),
        });
    }
    let spec = LmmSpec::with_labels(
        DVector::zeros(n),
        x,
        z_blocks,
        vec!["(Intercept)".to_string()],
        factors,
    )?;
    let beta = DVector::from_vec(args.beta.clone());
    let draw = sim::draw_replicate(&spec, &beta, &vc, args.seed, 0)?;

    let mut columns = vec!["y".to_string()];
    columns.extend(spec.random_factors.iter().map(|f| f.name.clone()));
    let rows: Vec<Vec<String>> = (0..n)
        .map(|row| {
            let mut cells = vec![format!("{}", draw.y[row])];
            for (i, factor) in spec.random_factors.iter().enumerate() {
                cells.push(factor.column_labels[level_of(row, i)].clone());
            }
            cells
        })
        .collect();
    write_csv(&args.out, &columns, &rows)?;

    println!(
        "wrote {}: {n} rows, {s} factor{} ({}), {} rep{} per cell, seed {}",
        args.out.display(),
        if s == 1 { "" } else { "s" },
        args.levels
            .iter()
            .map(|a| format!("{a} levels"))
            .collect::<Vec<_>>()
            .join(" x "),
        args.reps,
        if args.reps == 1 { "" } else { "s" },
        args.seed
    );
    Ok(0)
}
