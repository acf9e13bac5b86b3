//! Timestamp-keyed numeric columns from arbitrary CSV files.

use std::collections::HashMap;
use std::path::Path;

use chrono::{DateTime, Utc};
use nabqr_core::dataio::parse_timestamp;
use nabqr_core::error::CellError;
use nabqr_core::{Error, Result};

/// Named columns indexed by timestamp; empty cells read as NaN.
#[derive(Debug, Clone)]
pub struct Table {
    pub rows: HashMap<DateTime<Utc>, Vec<f64>>,
}

impl Table {
    pub fn get(&self, ts: &DateTime<Utc>, col: usize) -> f64 {
        self.rows.get(ts).map_or(f64::NAN, |r| r[col])
    }
}

/// Reads `timestamp` plus the requested columns. Columns listed in
/// `optional` may be absent; they then read as NaN everywhere.
pub fn read_columns(path: &Path, required: &[&str], optional: &[&str]) -> Result<Table> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let ts_col = find("timestamp").ok_or_else(|| Error::Config(format!("{}: missing column `timestamp`", path.display())))?;
    let mut cols = Vec::new();
    for name in required {
        cols.push(Some(
            find(name).ok_or_else(|| Error::Config(format!("{}: missing column `{name}`", path.display())))?,
        ));
    }
    for name in optional {
        let c = find(name);
        if c.is_none() {
            log::debug!("{}: no `{name}` column", path.display());
        }
        cols.push(c);
    }
    let mut rows = HashMap::new();
    let mut bad = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let Some(ts) = parse_timestamp(&rec[ts_col]) else {
            bad.push(cell(line, "timestamp", &rec[ts_col]));
            continue;
        };
        let mut values = Vec::with_capacity(cols.len());
        for (k, c) in cols.iter().enumerate() {
            let v = match c.map(|c| rec[c].trim()) {
                None | Some("") => f64::NAN,
                Some(text) => text.parse::<f64>().unwrap_or_else(|_| {
                    let name = required.iter().chain(optional).nth(k).copied().unwrap_or("");
                    bad.push(cell(line, name, text));
                    f64::NAN
                }),
            };
            values.push(v);
        }
        if rows.insert(ts, values).is_some() {
            bad.push(cell(line, "timestamp", &rec[ts_col]));
        }
    }
    if !bad.is_empty() {
        return Err(Error::Malformed(bad));
    }
    Ok(Table { rows })
}

fn cell(line: usize, column: &str, text: &str) -> CellError {
    CellError {
        line,
        column: column.to_string(),
        text: text.to_string(),
    }
}
