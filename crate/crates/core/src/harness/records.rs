//! CSV serialization of trial records.

use std::io::{Read, Write};

use super::config::EstimatorKind;
use super::trial::{Status, TrialRecord};
use crate::error::{Error, Result};

pub const RECORD_HEADER: [&str; 11] =
    ["estimator", "N", "d", "n", "trial", "seed", "status", "mse", "test_loglik", "selected_m", "wallclock_ms"];

fn float_field(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.16e}")).unwrap_or_default()
}

/// Writes the header and one row per record. Returns the row count.
pub fn write_records<W: Write>(out: W, records: &[TrialRecord]) -> Result<usize> {
    let mut w = csv::WriterBuilder::new().from_writer(out);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(RECORD_HEADER).map_err(io)?;
    for r in records {
        w.write_record([
            r.estimator.name().to_string(),
            r.total_size.to_string(),
            r.d.to_string(),
            r.n.to_string(),
            r.trial.to_string(),
            r.seed.to_string(),
            r.status.label(),
            float_field(r.mse),
            float_field(r.test_loglik),
            r.selected_m.map(|m| m.to_string()).unwrap_or_default(),
            r.wallclock_ms.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(records.len())
}

/// Reads records written by [`write_records`]. Columns are located by
/// header name; a missing column is a parse error on line 1.
/// `point_index` is reconstructed from the order of first appearance of
/// each (N, d, n) triple.
pub fn read_records<R: Read>(input: R) -> Result<Vec<TrialRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse { line: 1, message: e.to_string() })?
        .clone();
    let mut col = [0usize; 11];
    for (slot, name) in col.iter_mut().zip(RECORD_HEADER) {
        *slot = header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Parse { line: 1, message: format!("missing column \"{name}\"") })?;
    }
    let mut points: Vec<(usize, usize, usize)> = Vec::new();
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |i: usize| row.get(col[i]).unwrap_or("").trim();
        let bad = |i: usize, what: &str| Error::Parse {
            line,
            message: format!("column {}: {what} \"{}\"", RECORD_HEADER[i], field(i)),
        };
        let int = |i: usize| field(i).parse::<u64>().map_err(|_| bad(i, "not an integer"));
        let opt_float = |i: usize| -> Result<Option<f64>> {
            match field(i) {
                "" => Ok(None),
                s => s.parse::<f64>().map(Some).map_err(|_| bad(i, "not a number")),
            }
        };
        let estimator = EstimatorKind::parse(field(0)).ok_or_else(|| bad(0, "unknown estimator"))?;
        let status = Status::parse(field(6)).ok_or_else(|| bad(6, "unknown status"))?;
        let selected_m = match field(9) {
            "" => None,
            s => Some(s.parse::<usize>().map_err(|_| bad(9, "not an integer"))?),
        };
        let (big_n, d, n) = (int(1)? as usize, int(2)? as usize, int(3)? as usize);
        let point_index = match points.iter().position(|p| *p == (big_n, d, n)) {
            Some(i) => i,
            None => {
                points.push((big_n, d, n));
                points.len() - 1
            }
        };
        out.push(TrialRecord {
            estimator,
            total_size: big_n,
            d,
            n,
            trial: int(4)? as usize,
            seed: int(5)?,
            status,
            mse: opt_float(7)?,
            test_loglik: opt_float(8)?,
            selected_m,
            wallclock_ms: int(10)?,
            weight_clip: None,
            point_index,
        });
    }
    Ok(out)
}
