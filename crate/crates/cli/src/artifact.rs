//! On-disk formats: the fit artifact and the inference reports. Every
//! struct rejects unknown fields so schema drift is caught on read, and all
//! numbers go through serde_json's shortest-round-trip formatting, so a
//! write/read cycle reproduces every f64 bit for bit.

use anyhow::{bail, Context, Result};
use lmm_core::model::{LmmSpec, RandomFactor, VarComponents};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const FIT_SCHEMA: &str = "lmm.fit.v1";
pub const REPORT_SCHEMA: &str = "lmm.report.v1";
pub const PARTIAL_REPORT_SCHEMA: &str = "lmm.report.partial.v1";

/// Dense row-major matrix payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixJson {
    pub nrows: usize,
    pub ncols: usize,
    pub rows: Vec<Vec<f64>>,
}

impl MatrixJson {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        MatrixJson {
            nrows: m.nrows(),
            ncols: m.ncols(),
            rows: (0..m.nrows())
                .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
                .collect(),
        }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.rows.len() != self.nrows || self.rows.iter().any(|r| r.len() != self.ncols) {
            bail!(
                "matrix payload claims {} x {} but the row data disagree",
                self.nrows,
                self.ncols
            );
        }
        Ok(DMatrix::from_fn(self.nrows, self.ncols, |i, j| {
            self.rows[i][j]
        }))
    }
}

/// One fixed-effect model term as written in the model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedTermJson {
    /// Numeric column used as a single regressor.
    Numeric(String),
    /// Categorical column expanded to the full indicator set.
    Categorical(String),
}

/// Model file: response, fixed terms, random factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub response: String,
    #[serde(default = "default_intercept")]
    pub intercept: bool,
    #[serde(default)]
    pub fixed: Vec<FixedTermJson>,
    pub random: Vec<String>,
}

fn default_intercept() -> bool {
    true
}

/// Model echo inside the artifact: the request plus the resolved column
/// maps contrast files are matched against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEcho {
    pub response: String,
    pub intercept: bool,
    pub fixed_terms: Vec<FixedTermJson>,
    pub fixed_labels: Vec<String>,
    pub random_factors: Vec<FactorEcho>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorEcho {
    pub name: String,
    pub levels: Vec<String>,
}

/// The validated design, embedded so inference needs nothing beyond the
/// artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignJson {
    pub y: Vec<f64>,
    pub x: MatrixJson,
    pub z_blocks: Vec<MatrixJson>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitOptions {
    pub eps: f64,
    pub max_iter: usize,
    pub start: Option<Vec<f64>>,
    pub prior: Option<Vec<f64>>,
}

/// One predicted random effect, keyed the way users wrote the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UEntry {
    pub factor: String,
    pub level: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Estimates {
    pub sigma2_hat: Vec<f64>,
    pub fisher: MatrixJson,
    /// Covariance of the variance-component estimates; absent when the
    /// information matrix was numerically singular.
    pub sigma_cov_hat: Option<MatrixJson>,
    pub loglik: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub warnings: Vec<String>,
    pub b_hat: Vec<f64>,
    pub u_hat: Vec<UEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitArtifact {
    pub schema: String,
    pub created_unix: u64,
    pub method: String,
    pub options: FitOptions,
    pub model: ModelEcho,
    pub design: DesignJson,
    pub estimates: Estimates,
}

impl FitArtifact {
    /// Rebuilds the validated model exactly as it was fitted.
    pub fn to_spec(&self) -> Result<LmmSpec> {
        let y = DVector::from_vec(self.design.y.clone());
        let x = self.design.x.to_matrix()?;
        let z_blocks = self
            .design
            .z_blocks
            .iter()
            .map(|z| z.to_matrix())
            .collect::<Result<Vec<_>>>()?;
        let factors = self
            .model
            .random_factors
            .iter()
            .map(|f| RandomFactor {
                name: f.name.clone(),
                column_labels: f.levels.clone(),
            })
            .collect();
        LmmSpec::with_labels(y, x, z_blocks, self.model.fixed_labels.clone(), factors)
            .context("artifact design failed validation")
    }

    pub fn sigma2_hat(&self) -> Result<VarComponents> {
        VarComponents::new(self.estimates.sigma2_hat.clone())
            .context("artifact variance components are invalid")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionJson {
    pub center: Vec<f64>,
    pub shape: MatrixJson,
    pub radius2: f64,
}

/// Full inference report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub schema: String,
    pub method: String,
    pub level: f64,
    pub q: usize,
    pub w_hat: Vec<f64>,
    pub w0: Vec<f64>,
    pub mse: MatrixJson,
    pub statistic: f64,
    pub kappa: f64,
    /// Denominator df; `None` encodes the infinite-df limit.
    pub nu: Option<f64>,
    pub p_value: f64,
    pub interval: Option<[f64; 2]>,
    pub region: RegionJson,
    pub flags: Vec<String>,
}

/// What gets written when the df machinery declines: the estimate and its
/// plug-in MSE are still reported, with the reason in `flags`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialReport {
    pub schema: String,
    pub method: String,
    pub level: f64,
    pub w_hat: Vec<f64>,
    pub w0: Vec<f64>,
    pub mse_plugin: MatrixJson,
    pub flags: Vec<String>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).context("serializing JSON")?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_fit_artifact(path: &Path) -> Result<FitArtifact> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let artifact: FitArtifact = serde_json::from_str(&text)
        .with_context(|| format!("parsing fit artifact {}", path.display()))?;
    if artifact.schema != FIT_SCHEMA {
        bail!(
            "unsupported fit artifact schema {:?} (expected {FIT_SCHEMA:?})",
            artifact.schema
        );
    }
    Ok(artifact)
}

pub fn read_model_file(path: &Path) -> Result<ModelFile> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing model file {}", path.display()))
}
