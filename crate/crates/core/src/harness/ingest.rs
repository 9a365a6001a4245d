//! Loading numeric CSV files as datasets.

use std::path::Path;

use crate::dataset::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CsvSchema {
    /// Skip the first line.
    pub has_header: bool,
    /// Zero-based column holding a label, dropped from the data.
    pub label_column: Option<usize>,
    /// Expected dimension after dropping the label; inferred from the first
    /// data row when unset.
    pub dim: Option<usize>,
    pub delimiter: Option<u8>,
}

pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    ingest_reader(file, schema)
}

pub fn ingest_reader<R: std::io::Read>(input: R, schema: &CsvSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .delimiter(schema.delimiter.unwrap_or(b','))
        .from_reader(input);
    let mut dim = schema.dim;
    let mut values = Vec::new();
    let mut rows = 0usize;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(i as u64 + 1, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(i as u64 + 1, |p| p.line());
        if i == 0 && schema.has_header {
            continue;
        }
        if rec.len() == 1 && rec[0].trim().is_empty() {
            continue;
        }
        if let Some(c) = schema.label_column {
            if c >= rec.len() {
                return Err(Error::Parse { line, message: format!("label column {c} missing ({} fields)", rec.len()) });
            }
        }
        let mut count = 0;
        for (j, field) in rec.iter().enumerate() {
            if Some(j) == schema.label_column {
                continue;
            }
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                line,
                message: format!("field {} is not numeric: \"{field}\"", j + 1),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse { line, message: format!("field {} is not finite", j + 1) });
            }
            values.push(v);
            count += 1;
        }
        match dim {
            None => dim = Some(count),
            Some(p) if p != count => {
                return Err(Error::Parse { line, message: format!("expected {p} values, found {count}") })
            }
            _ => {}
        }
        rows += 1;
    }
    let p = dim.filter(|_| rows > 0).ok_or_else(|| Error::Parse { line: 0, message: "no data rows".into() })?;
    if p == 0 {
        return Err(Error::Parse { line: 0, message: "rows have no numeric fields".into() });
    }
    Dataset::new(p, values)
}
