//! CSV ingestion into the core's string table, and the writer used by the
//! simulator. Comma separated, header row, UTF-8; numerics are written with
//! Rust's shortest-round-trip float formatting so re-reading a file
//! reproduces the exact values that were simulated.

use anyhow::{bail, Context, Result};
use lmm_core::model::DataTable;
use std::fs::File;
use std::path::Path;

pub fn read_csv(path: &Path) -> Result<DataTable> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let columns: Vec<String> = reader
        .headers()
        .context("reading CSV header")?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if columns.is_empty() {
        bail!("{} has an empty header row", path.display());
    }
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.with_context(|| format!("reading CSV record {}", line + 2))?;
        if record.len() != columns.len() {
            bail!(
                "row {} has {} fields but the header has {}",
                line + 2,
                record.len(),
                columns.len()
            );
        }
        rows.push(record.iter().map(|c| c.to_string()).collect());
    }
    Ok(DataTable { columns, rows })
}

pub fn write_csv(path: &Path, columns: &[String], rows: &[Vec<String>]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut writer = csv::Writer::from_writer(file);
    writer.write_record(columns).context("writing CSV header")?;
    for row in rows {
        writer.write_record(row).context("writing CSV row")?;
    }
    writer.flush().context("flushing CSV")?;
    Ok(())
}
