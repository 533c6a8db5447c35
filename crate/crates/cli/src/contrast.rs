//! Contrast files: each row is one contrast, written either as dense
//! coefficient vectors over the fixed and random columns, or as symbolic
//! terms resolved against the fit's recorded column maps. Fixed labels are
//! matched first, then `factor:level` selectors for the random columns.

use anyhow::{bail, Context, Result};
use lmm_core::model::ContrastSet;
use nalgebra::DMatrix;
use serde::Deserialize;
use std::fs;
use std::path::Path;

use crate::artifact::ModelEcho;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastFile {
    pub rows: Vec<ContrastRow>,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastRow {
    Dense(DenseRow),
    Select(SelectRow),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseRow {
    /// Length p, over the fixed columns.
    pub k: Vec<f64>,
    /// Length r, over the stacked random columns; omitted means zero.
    #[serde(default)]
    pub l: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectRow {
    pub terms: Vec<Term>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Term {
    pub name: String,
    pub coef: f64,
}

pub fn read_contrast_file(path: &Path, model: &ModelEcho) -> Result<ContrastSet> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: ContrastFile = serde_json::from_str(&text)
        .with_context(|| format!("parsing contrast file {}", path.display()))?;
    resolve(&file, model)
}

pub fn resolve(file: &ContrastFile, model: &ModelEcho) -> Result<ContrastSet> {
    if file.rows.is_empty() {
        bail!("contrast file has no rows");
    }
    let p = model.fixed_labels.len();
    let r: usize = model.random_factors.iter().map(|f| f.levels.len()).sum();
    let q = file.rows.len();
    let mut k = DMatrix::zeros(p, q);
    let mut l = DMatrix::zeros(r, q);

    for (col, row) in file.rows.iter().enumerate() {
        match row {
            ContrastRow::Dense(dense) => {
                if dense.k.len() != p {
                    bail!(
                        "contrast row {}: k has {} entries but the fit has {p} fixed columns",
                        col + 1,
                        dense.k.len()
                    );
                }
                if !dense.l.is_empty() && dense.l.len() != r {
                    bail!(
                        "contrast row {}: l has {} entries but the fit has {r} random columns",
                        col + 1,
                        dense.l.len()
                    );
                }
                for (i, &v) in dense.k.iter().enumerate() {
                    k[(i, col)] = v;
                }
                for (i, &v) in dense.l.iter().enumerate() {
                    l[(i, col)] = v;
                }
            }
            ContrastRow::Select(select) => {
                if select.terms.is_empty() {
                    bail!("contrast row {}: no terms", col + 1);
                }
                for term in &select.terms {
                    let (idx, fixed) = locate(model, &term.name).with_context(|| {
                        format!("contrast row {}: term {:?}", col + 1, term.name)
                    })?;
                    if fixed {
                        k[(idx, col)] += term.coef;
                    } else {
                        l[(idx, col)] += term.coef;
                    }
                }
            }
        }
    }
    ContrastSet::new(k, l).context("assembling the contrast set")
}

/// Column index of a symbolic name: fixed label, or `factor:level` over the
/// stacked random columns. Returns (index, is_fixed).
fn locate(model: &ModelEcho, name: &str) -> Result<(usize, bool)> {
    if let Some(idx) = model.fixed_labels.iter().position(|c| c == name) {
        return Ok((idx, true));
    }
    if let Some((factor, level)) = name.split_once(':') {
        let mut offset = 0;
        for f in &model.random_factors {
            if f.name == factor {
                if let Some(j) = f.levels.iter().position(|lv| lv == level) {
                    return Ok((offset + j, false));
                }
                bail!(
                    "factor {factor:?} has no level {level:?} (levels: {})",
                    f.levels.join(", ")
                );
            }
            offset += f.levels.len();
        }
    }
    bail!(
        "name matches no fixed column and no factor:level selector (fixed columns: {})",
        model.fixed_labels.join(", ")
    )
}
