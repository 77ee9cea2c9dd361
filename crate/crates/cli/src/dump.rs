//! Image and raw-value dumps of 2-D tensors.
//!
//! Every image is written twice: an 8-bit binary graymap (`P5`) with values
//! min-max normalised to `0..=255`, and a CSV of the unnormalised values. A
//! tensor whose values are all equal has no range to normalise and is drawn
//! as uniform mid-gray (128).

use std::path::{Path, PathBuf};

use flexkernel::{Scalar, Tensor};

use crate::error::CliError;

pub const DEGENERATE_GRAY: u8 = 128;

fn check_2d<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize), CliError> {
    match t.shape() {
        [h, w] => Ok((*h, *w)),
        other => Err(CliError::Runtime(format!("image dumps need a 2-D tensor, got shape {other:?}"))),
    }
}

/// Binary PGM encoding of `t`, rows top to bottom.
pub fn pgm_bytes<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>, CliError> {
    let (h, w) = check_2d(t)?;
    let values: Vec<f64> = t.data().iter().map(|v| v.to_f64_lossy()).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CliError::Numeric("cannot render non-finite values".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            DEGENERATE_GRAY
        }
    }));
    Ok(out)
}

/// One CSV record per row. Values use the shortest decimal form that parses
/// back to the same float.
pub fn csv_bytes<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>, CliError> {
    let (_, w) = check_2d(t)?;
    let mut wr = csv::Writer::from_writer(Vec::new());
    for row in t.data().chunks(w.max(1)) {
        wr.write_record(row.iter().map(|v| v.to_string()))
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    wr.into_inner().map_err(|e| CliError::Runtime(e.to_string()))
}

/// Parses a CSV written by [`csv_bytes`].
pub fn parse_csv<T: Scalar + std::str::FromStr>(bytes: &[u8]) -> Result<Tensor<T>, CliError> {
    let mut rd = csv::ReaderBuilder::new().has_headers(false).from_reader(bytes);
    let mut data = Vec::new();
    let mut rows = 0;
    let mut width = None;
    for rec in rd.records() {
        let rec = rec.map_err(|e| CliError::Runtime(format!("csv: {e}")))?;
        if *width.get_or_insert(rec.len()) != rec.len() {
            return Err(CliError::Runtime("csv rows differ in length".into()));
        }
        for field in rec.iter() {
            data.push(field.parse::<T>().map_err(|_| CliError::Runtime(format!("csv: bad number {field:?}")))?);
        }
        rows += 1;
    }
    Tensor::new([rows, width.unwrap_or(0)], data).map_err(CliError::from)
}

/// Writes `<dir>/<stem>.pgm` and `<dir>/<stem>.csv`.
pub fn dump_image<T: Scalar>(t: &Tensor<T>, dir: &Path, stem: &str) -> Result<Vec<PathBuf>, CliError> {
    let pgm = dir.join(format!("{stem}.pgm"));
    let csv = dir.join(format!("{stem}.csv"));
    std::fs::write(&pgm, pgm_bytes(t)?).map_err(|e| CliError::io(&pgm, e))?;
    std::fs::write(&csv, csv_bytes(t)?).map_err(|e| CliError::io(&csv, e))?;
    Ok(vec![pgm, csv])
}
