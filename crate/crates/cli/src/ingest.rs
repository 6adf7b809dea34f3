//! CSV sample ingestion: one observation per row, `d` numeric columns,
//! optional header.

use std::path::Path;

use anyhow::{bail, Context, Result};
use ppfactor_core::linalg::Matrix;

/// A parsed sample with ingestion bookkeeping.
#[derive(Debug)]
pub struct Ingested {
    /// Row-major m x d data, non-finite rows removed.
    pub data: Matrix,
    /// Rows dropped because a field parsed to NaN or infinity.
    pub dropped_nonfinite: usize,
    /// Whether a non-numeric first row was treated as a header.
    pub header_skipped: bool,
}

/// Read an m x d sample from a CSV file.
///
/// The first row is consumed as a header when any of its fields is not a
/// number. Rows containing NaN or infinite values are dropped and counted
/// rather than failing the run; a row with the wrong number of columns or
/// non-numeric text elsewhere is an error naming the row.
pub fn ingest_sample(path: &Path, d: usize) -> Result<Ingested> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .with_context(|| format!("opening data file {}", path.display()))?;

    let mut flat: Vec<f64> = Vec::new();
    let mut kept = 0usize;
    let mut dropped = 0usize;
    let mut header_skipped = false;
    let mut first_content_row = true;

    for (idx, record) in rdr.records().enumerate() {
        let line = idx + 1;
        let record =
            record.with_context(|| format!("{} row {line}: malformed CSV", path.display()))?;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let parsed: Option<Vec<f64>> = record
            .iter()
            .map(|f| f.parse::<f64>().ok())
            .collect();
        let values = match parsed {
            Some(v) => v,
            None if first_content_row => {
                header_skipped = true;
                first_content_row = false;
                continue;
            }
            None => bail!(
                "{} row {line}: non-numeric field in a data row",
                path.display()
            ),
        };
        first_content_row = false;
        if values.len() != d {
            bail!(
                "{} row {line}: expected {d} columns, found {}",
                path.display(),
                values.len()
            );
        }
        if values.iter().all(|x| x.is_finite()) {
            flat.extend_from_slice(&values);
            kept += 1;
        } else {
            dropped += 1;
        }
    }

    if kept == 0 {
        bail!("{}: no usable data rows", path.display());
    }
    let data = Matrix::from_rows(kept, d, flat).map_err(|e| anyhow::anyhow!("{e}"))?;
    Ok(Ingested {
        data,
        dropped_nonfinite: dropped,
        header_skipped,
    })
}
