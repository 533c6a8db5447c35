//! Model definition and validation: the simple linear mixed model
//! `y = Xb + Z1 u1 + ... + Zs us + e` with `var(ui) = sigma2_i I` and
//! `var(e) = sigma2_{s+1} I`, plus design construction from tabular data
//! and estimability checks for fixed-effect contrasts.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// Default relative tolerance for estimability decisions, applied against
/// the Frobenius norm of K.
pub const DEFAULT_ESTIMABILITY_RTOL: f64 = 1e-8;

/// Identity of one random-effect block: the factor name and one label per
/// column of its design block (for indicator blocks, the level names in
/// first-appearance order).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RandomFactor {
    pub name: String,
    pub column_labels: Vec<String>,
}

/// The simple linear mixed model: response, fixed design, and the ordered
/// random-effect design blocks. Immutable after construction; `new` enforces
/// the structural invariants.
#[derive(Debug, Clone)]
pub struct LmmSpec {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub z_blocks: Vec<DMatrix<f64>>,
    pub fixed_labels: Vec<String>,
    pub random_factors: Vec<RandomFactor>,
}

impl LmmSpec {
    /// Build a spec with auto-generated labels and validate it.
    pub fn new(y: DVector<f64>, x: DMatrix<f64>, z_blocks: Vec<DMatrix<f64>>) -> Result<Self> {
        let fixed_labels = (0..x.ncols()).map(|j| format!("x{}", j + 1)).collect();
        let random_factors = z_blocks
            .iter()
            .enumerate()
            .map(|(i, z)| RandomFactor {
                name: format!("u{}", i + 1),
                column_labels: (0..z.ncols()).map(|c| format!("{}", c + 1)).collect(),
            })
            .collect();
        Self::with_labels(y, x, z_blocks, fixed_labels, random_factors)
    }

    /// Build a spec with caller-supplied labels and validate it.
    pub fn with_labels(
        y: DVector<f64>,
        x: DMatrix<f64>,
        z_blocks: Vec<DMatrix<f64>>,
        fixed_labels: Vec<String>,
        random_factors: Vec<RandomFactor>,
    ) -> Result<Self> {
        let spec = LmmSpec {
            y,
            x,
            z_blocks,
            fixed_labels,
            random_factors,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Same design and labels with a new response vector.
    pub fn with_response(&self, y: DVector<f64>) -> Result<Self> {
        Self::with_labels(
            y,
            self.x.clone(),
            self.z_blocks.clone(),
            self.fixed_labels.clone(),
            self.random_factors.clone(),
        )
    }

    /// Check every structural invariant; returns `&self` so the call chains.
    pub fn validate(&self) -> Result<&Self> {
        let n = self.y.len();
        if n < 2 {
            return Err(Error::Degenerate(format!("n = {n}, need at least 2 observations")));
        }
        if self.x.ncols() == 0 {
            return Err(Error::EmptyDesign("X has no columns (p = 0)".into()));
        }
        if self.z_blocks.is_empty() {
            return Err(Error::EmptyDesign("no random-effect blocks (s = 0)".into()));
        }
        if self.x.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "X has {} rows but y has length {n}",
                self.x.nrows()
            )));
        }
        for (i, z) in self.z_blocks.iter().enumerate() {
            if z.nrows() != n {
                return Err(Error::DimensionMismatch(format!(
                    "Z block {} has {} rows but y has length {n}",
                    i + 1,
                    z.nrows()
                )));
            }
            if z.ncols() == 0 {
                return Err(Error::EmptyDesign(format!("Z block {} has no columns", i + 1)));
            }
            if z.iter().all(|&v| v == 0.0) {
                return Err(Error::Degenerate(format!("Z block {} is identically zero", i + 1)));
            }
        }
        if self.x.iter().all(|&v| v == 0.0) {
            return Err(Error::Degenerate("X is identically zero".into()));
        }
        if self.fixed_labels.len() != self.x.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "{} fixed labels for {} columns of X",
                self.fixed_labels.len(),
                self.x.ncols()
            )));
        }
        if self.random_factors.len() != self.z_blocks.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} random factor labels for {} Z blocks",
                self.random_factors.len(),
                self.z_blocks.len()
            )));
        }
        for (f, z) in self.random_factors.iter().zip(&self.z_blocks) {
            if f.column_labels.len() != z.ncols() {
                return Err(Error::DimensionMismatch(format!(
                    "factor '{}' has {} column labels for {} columns",
                    f.name,
                    f.column_labels.len(),
                    z.ncols()
                )));
            }
        }
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Number of random-effect blocks.
    pub fn s(&self) -> usize {
        self.z_blocks.len()
    }

    /// Total number of random-effect columns, r = sum r_i.
    pub fn r(&self) -> usize {
        self.z_blocks.iter().map(|z| z.ncols()).sum()
    }

    pub fn r_sizes(&self) -> Vec<usize> {
        self.z_blocks.iter().map(|z| z.ncols()).collect()
    }

    /// Concatenated random design Z = (Z1, ..., Zs), n x r.
    pub fn z_concat(&self) -> DMatrix<f64> {
        let n = self.n();
        let r = self.r();
        let mut z = DMatrix::zeros(n, r);
        let mut off = 0;
        for block in &self.z_blocks {
            z.view_mut((0, off), (n, block.ncols())).copy_from(block);
            off += block.ncols();
        }
        z
    }

    pub fn layout(&self) -> BlockLayout {
        BlockLayout {
            p: self.p(),
            r_sizes: self.r_sizes(),
        }
    }
}

/// Index arithmetic for the stacked (fixed, random-1, ..., random-s) block
/// structure used by the MME matrix and everything derived from it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    pub p: usize,
    pub r_sizes: Vec<usize>,
}

impl BlockLayout {
    pub fn s(&self) -> usize {
        self.r_sizes.len()
    }

    pub fn r(&self) -> usize {
        self.r_sizes.iter().sum()
    }

    /// Side length of the MME system, p + r.
    pub fn total(&self) -> usize {
        self.p + self.r()
    }

    /// Offset of random block `i` (0-based) within the stacked vector.
    pub fn random_offset(&self, i: usize) -> usize {
        self.p + self.r_sizes[..i].iter().sum::<usize>()
    }

    /// Offset of random block `i` within the r-vector alone.
    pub fn within_r_offset(&self, i: usize) -> usize {
        self.r_sizes[..i].iter().sum::<usize>()
    }
}

/// Variance components (sigma2_1, ..., sigma2_s, sigma2_{s+1}): the s
/// random-effect variances followed by the error variance. All entries are
/// strictly positive; the estimators assume an interior parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct VarComponents {
    values: Vec<f64>,
}

impl VarComponents {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::DimensionMismatch(format!(
                "need at least 2 variance components (s >= 1), got {}",
                values.len()
            )));
        }
        for &v in &values {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::NonPositiveVariance(v));
            }
        }
        Ok(VarComponents { values })
    }

    /// Number of random-effect components (s).
    pub fn s(&self) -> usize {
        self.values.len() - 1
    }

    /// Variance of random block `i`, 0-based.
    pub fn random(&self, i: usize) -> f64 {
        self.values[i]
    }

    /// Error variance sigma2_{s+1}.
    pub fn error(&self) -> f64 {
        *self.values.last().expect("nonempty by construction")
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Diagonal of G = diag(sigma2_i I_{r_i}) as a length-r vector.
    pub fn g_diag(&self, layout: &BlockLayout) -> DVector<f64> {
        let mut g = DVector::zeros(layout.r());
        for i in 0..layout.s() {
            let off = layout.within_r_offset(i);
            for k in 0..layout.r_sizes[i] {
                g[off + k] = self.random(i);
            }
        }
        g
    }

    /// Check that the number of components matches the spec (s + 1).
    pub fn check_against(&self, spec: &LmmSpec) -> Result<()> {
        if self.len() != spec.s() + 1 {
            return Err(Error::DimensionMismatch(format!(
                "{} variance components for a model with s = {} random blocks",
                self.len(),
                spec.s()
            )));
        }
        Ok(())
    }
}

/// A set of q linear functions w = K'b + L'u, stored columnwise:
/// K is p x q, L is r x q, and Lambda = (K', L')' stacks them.
#[derive(Debug, Clone)]
pub struct ContrastSet {
    pub k: DMatrix<f64>,
    pub l: DMatrix<f64>,
}

impl ContrastSet {
    /// Validate shapes and the full-column-rank requirement on Lambda.
    pub fn new(k: DMatrix<f64>, l: DMatrix<f64>) -> Result<Self> {
        let q = k.ncols();
        if q == 0 {
            return Err(Error::EmptyDesign("contrast set has q = 0 columns".into()));
        }
        if l.ncols() != q {
            return Err(Error::DimensionMismatch(format!(
                "K has {q} columns but L has {}",
                l.ncols()
            )));
        }
        let set = ContrastSet { k, l };
        let rank = linalg::rank(&set.lambda(), 1e-10);
        if rank < q {
            return Err(Error::ContrastRankDeficient { rank, q });
        }
        Ok(set)
    }

    /// Fixed-effects-only contrast (L = 0).
    pub fn fixed_only(k: DMatrix<f64>, r: usize) -> Result<Self> {
        let q = k.ncols();
        Self::new(k, DMatrix::zeros(r, q))
    }

    pub fn q(&self) -> usize {
        self.k.ncols()
    }

    /// Lambda = (K', L')', size (p+r) x q.
    pub fn lambda(&self) -> DMatrix<f64> {
        let p = self.k.nrows();
        let r = self.l.nrows();
        let q = self.q();
        let mut lam = DMatrix::zeros(p + r, q);
        lam.view_mut((0, 0), (p, q)).copy_from(&self.k);
        lam.view_mut((p, 0), (r, q)).copy_from(&self.l);
        lam
    }

    pub fn check_against(&self, spec: &LmmSpec) -> Result<()> {
        if self.k.nrows() != spec.p() {
            return Err(Error::DimensionMismatch(format!(
                "K has {} rows but p = {}",
                self.k.nrows(),
                spec.p()
            )));
        }
        if self.l.nrows() != spec.r() {
            return Err(Error::DimensionMismatch(format!(
                "L has {} rows but r = {}",
                self.l.nrows(),
                spec.r()
            )));
        }
        Ok(())
    }
}

/// Relative projection residual of each column of K onto the row space of
/// X, measured against ||K||_F. Zero for estimable columns.
pub fn estimability_residuals(k: &DMatrix<f64>, x: &DMatrix<f64>) -> Vec<f64> {
    let norm_k = k.norm();
    if norm_k == 0.0 {
        return vec![0.0; k.ncols()];
    }
    let basis = linalg::row_space_basis(x);
    let projected = &basis * (basis.transpose() * k);
    let resid = k - projected;
    resid.column_iter().map(|c| c.norm() / norm_k).collect()
}

/// True iff every column of K lies in the row space of X: the condition
/// K = X'A for some A, which makes K'b estimable. `rtol` is relative to
/// ||K||_F; pass [`DEFAULT_ESTIMABILITY_RTOL`] for the stock threshold.
pub fn check_estimability(k: &DMatrix<f64>, x: &DMatrix<f64>, rtol: f64) -> bool {
    estimability_residuals(k, x).iter().all(|&r| r <= rtol)
}

/// Error unless every column of K is estimable; reports the worst column.
pub fn require_estimable(k: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<()> {
    let residuals = estimability_residuals(k, x);
    for (j, &r) in residuals.iter().enumerate() {
        if r > DEFAULT_ESTIMABILITY_RTOL {
            return Err(Error::NotEstimable {
                column: j,
                residual: r,
            });
        }
    }
    Ok(())
}

/// Parsed tabular data: named columns of string cells. The CLI fills this
/// from CSV; tests construct it directly.
#[derive(Debug, Clone)]
pub struct DataTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl DataTable {
    fn column_index(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    fn numeric_column(&self, name: &str) -> Result<Vec<f64>> {
        let idx = self.column_index(name)?;
        self.rows
            .iter()
            .map(|row| {
                row[idx].trim().parse::<f64>().map_err(|_| Error::NonNumeric {
                    column: name.to_string(),
                    value: row[idx].clone(),
                })
            })
            .collect()
    }

    fn string_column(&self, name: &str) -> Result<Vec<&str>> {
        let idx = self.column_index(name)?;
        Ok(self.rows.iter().map(|row| row[idx].trim()).collect())
    }
}

/// One fixed-effect term: a categorical column (expanded to the full dummy
/// set, no reference level dropped) or a numeric column used as-is.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FixedTerm {
    Categorical(String),
    Numeric(String),
}

/// Declarative model description for [`build_from_table`].
#[derive(Debug, Clone)]
pub struct ModelDescription {
    pub response: String,
    pub intercept: bool,
    pub fixed_terms: Vec<FixedTerm>,
    pub random_factors: Vec<String>,
}

/// Distinct values in first-appearance order.
fn levels_in_order<'a>(values: &[&'a str]) -> Vec<&'a str> {
    let mut seen = Vec::new();
    for &v in values {
        if !seen.contains(&v) {
            seen.push(v);
        }
    }
    seen
}

/// Build design matrices from tabular records. Fixed categorical terms use
/// the full indicator set (the downstream solver tolerates rank-deficient X
/// through g-inverses); random factors become one indicator column per
/// level, levels ordered by first appearance.
pub fn build_from_table(table: &DataTable, model: &ModelDescription) -> Result<LmmSpec> {
    let n = table.rows.len();
    if n < 2 {
        return Err(Error::Degenerate(format!("table has {n} rows, need at least 2")));
    }
    let y = DVector::from_vec(table.numeric_column(&model.response)?);

    let mut x_cols: Vec<(String, Vec<f64>)> = Vec::new();
    if model.intercept {
        x_cols.push(("(Intercept)".to_string(), vec![1.0; n]));
    }
    for term in &model.fixed_terms {
        match term {
            FixedTerm::Numeric(name) => {
                x_cols.push((name.clone(), table.numeric_column(name)?));
            }
            FixedTerm::Categorical(name) => {
                let values = table.string_column(name)?;
                for level in levels_in_order(&values) {
                    let col = values
                        .iter()
                        .map(|&v| if v == level { 1.0 } else { 0.0 })
                        .collect();
                    x_cols.push((format!("{name}:{level}"), col));
                }
            }
        }
    }
    if x_cols.is_empty() {
        return Err(Error::EmptyDesign(
            "model has neither intercept nor fixed terms".into(),
        ));
    }

    let mut z_blocks = Vec::new();
    let mut random_meta = Vec::new();
    for name in &model.random_factors {
        let values = table.string_column(name)?;
        let levels = levels_in_order(&values);
        if levels.len() < 2 {
            return Err(Error::SingleLevelFactor(name.clone()));
        }
        let mut z = DMatrix::zeros(n, levels.len());
        for (row, &v) in values.iter().enumerate() {
            let j = levels.iter().position(|&l| l == v).expect("level recorded");
            z[(row, j)] = 1.0;
        }
        z_blocks.push(z);
        random_meta.push(RandomFactor {
            name: name.clone(),
            column_labels: levels.into_iter().map(str::to_string).collect(),
        });
    }
    if z_blocks.is_empty() {
        return Err(Error::EmptyDesign("model has no random factors".into()));
    }

    let p = x_cols.len();
    let fixed_labels: Vec<String> = x_cols.iter().map(|(l, _)| l.clone()).collect();
    let mut x = DMatrix::zeros(n, p);
    for (j, (_, col)) in x_cols.into_iter().enumerate() {
        x.set_column(j, &DVector::from_vec(col));
    }

    LmmSpec::with_labels(y, x, z_blocks, fixed_labels, random_meta)
}
