//! Dataset ingestion, cleaning filters, the train/test split and a
//! synthetic data generator.

mod filters;
mod simulate;
mod split;

use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, Utc};
use ndarray::Array2;

use crate::error::{CellError, Error, Result};
use crate::quantile::{check_hourly, EnsembleMatrix, ObservationSeries};

pub use filters::{clean, countertrade_filter, glitch_filter, CleaningConfig, CleaningReport, CountertradeFilter, GlitchFilter};
pub use simulate::{simulate, SimConfig, Simulation};
pub use split::{split, SplitRanges, SplitSpec};

/// One area's aligned hourly series.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub area: String,
    pub observations: ObservationSeries,
    pub ensembles: EnsembleMatrix,
    pub spot: Option<Vec<f64>>,
    pub countertrade: Option<Vec<f64>>,
    pub imbalance: Option<Vec<f64>>,
}

impl RawDataset {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn timestamps(&self) -> &[DateTime<Utc>] {
        &self.observations.timestamps
    }

    /// Contiguous sub-range of hours.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        let cut = |v: &Option<Vec<f64>>| v.as_ref().map(|v| v[range.clone()].to_vec());
        Self {
            area: self.area.clone(),
            observations: ObservationSeries {
                timestamps: self.observations.timestamps[range.clone()].to_vec(),
                values: self.observations.values[range.clone()].to_vec(),
                valid: self.observations.valid[range.clone()].to_vec(),
            },
            ensembles: self.ensembles.slice(range.clone()),
            spot: cut(&self.spot),
            countertrade: cut(&self.countertrade),
            imbalance: cut(&self.imbalance),
        }
    }
}

const OPTIONAL: [&str; 4] = ["spot", "countertrade", "imbalance", "valid"];

/// Parses RFC 3339 or a naive `YYYY-MM-DD[T ]HH:MM[:SS]` timestamp as UTC.
pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.with_timezone(&Utc));
    }
    ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .map(|n| n.and_utc())
}

/// Column layout of an input table.
struct Layout {
    timestamp: usize,
    actual: usize,
    members: Vec<usize>,
    optional: [Option<usize>; 4],
}

fn layout(headers: &csv::StringRecord) -> Result<Layout> {
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let timestamp = find("timestamp").ok_or_else(|| Error::Config("missing column `timestamp`".into()))?;
    let actual = find("actual").ok_or_else(|| Error::Config("missing column `actual`".into()))?;
    let mut members = Vec::new();
    while let Some(c) = find(&format!("ens_{:02}", members.len())) {
        members.push(c);
    }
    if members.is_empty() {
        return Err(Error::Config("no ensemble columns `ens_00`, `ens_01`, ...".into()));
    }
    let optional = OPTIONAL.map(find);
    let known: Vec<usize> = [timestamp, actual]
        .into_iter()
        .chain(members.iter().copied())
        .chain(optional.iter().flatten().copied())
        .collect();
    for (i, h) in headers.iter().enumerate() {
        if !known.contains(&i) {
            log::warn!("ignoring unknown column `{h}`");
        }
    }
    Ok(Layout {
        timestamp,
        actual,
        members,
        optional,
    })
}

/// Reads a dataset table. Empty cells are missing: a missing observation
/// or ensemble value marks the hour invalid (ensemble gaps are filled with
/// the nearest earlier row so the matrix stays finite).
pub fn read_csv<R: Read>(reader: R, area: &str) -> Result<RawDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let lay = layout(rdr.headers()?)?;
    let headers = rdr.headers()?.clone();
    let m = lay.members.len();
    let mut bad = Vec::new();
    let mut timestamps = Vec::new();
    let mut actual = Vec::new();
    let mut valid = Vec::new();
    let mut members: Vec<f64> = Vec::new();
    let mut optional: [Vec<f64>; 4] = Default::default();

    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = row + 2;
        let mut cell = |col: usize| -> Option<f64> {
            let text = rec.get(col).unwrap_or("");
            if text.is_empty() || text.eq_ignore_ascii_case("nan") {
                return None;
            }
            match text.parse::<f64>() {
                Ok(v) if v.is_finite() => Some(v),
                _ => {
                    bad.push(CellError {
                        line,
                        column: headers.get(col).unwrap_or("").to_string(),
                        text: text.to_string(),
                    });
                    None
                }
            }
        };
        let ts_text = rec.get(lay.timestamp).unwrap_or("");
        let ts = parse_timestamp(ts_text);
        let y = cell(lay.actual);
        let mut ok = y.is_some();
        let ens: Vec<Option<f64>> = lay.members.iter().map(|&c| cell(c)).collect();
        let opt: Vec<Option<f64>> = lay.optional.iter().map(|c| c.and_then(&mut cell)).collect();
        match ts {
            Some(t) => timestamps.push(t),
            None => {
                bad.push(CellError {
                    line,
                    column: "timestamp".into(),
                    text: ts_text.into(),
                });
                continue;
            }
        }
        let prev = members.len().checked_sub(m);
        for (j, v) in ens.into_iter().enumerate() {
            let v = v.unwrap_or_else(|| {
                ok = false;
                prev.map(|p| members[p + j]).unwrap_or(f64::NAN)
            });
            members.push(v);
        }
        for (k, v) in opt.into_iter().enumerate() {
            optional[k].push(v.unwrap_or(f64::NAN));
        }
        if lay.optional[3].is_some() && optional[3].last() == Some(&0.0) {
            ok = false;
        }
        actual.push(y.unwrap_or(f64::NAN));
        valid.push(ok);
    }
    if !bad.is_empty() {
        return Err(Error::Malformed(bad));
    }
    check_hourly(&timestamps)?;
    // rows before the first complete ensemble row take the next complete one
    let t = timestamps.len();
    let mut members = Array2::from_shape_vec((t, m), members).expect("rectangular");
    if let Some(first) = (0..t).find(|&i| members.row(i).iter().all(|v| v.is_finite())) {
        for i in 0..first {
            for j in 0..m {
                if !members[[i, j]].is_finite() {
                    members[[i, j]] = members[[first, j]];
                }
            }
        }
    } else if t > 0 {
        return Err(Error::NonFinite("every ensemble row has missing members".into()));
    }
    let take = |k: usize, v: &mut [Vec<f64>; 4]| lay.optional[k].map(|_| std::mem::take(&mut v[k]));
    let spot = take(0, &mut optional);
    let countertrade = take(1, &mut optional);
    let imbalance = take(2, &mut optional);
    Ok(RawDataset {
        area: area.to_string(),
        observations: ObservationSeries::new(timestamps.clone(), actual, valid)?,
        ensembles: EnsembleMatrix::new(timestamps, members)?,
        spot,
        countertrade,
        imbalance,
    })
}

pub fn load_csv(path: &Path) -> Result<RawDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let area = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_csv(std::io::BufReader::new(file), &area)
}

fn fmt(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        String::new()
    }
}

/// Writes the table layout read by [`read_csv`]. A `valid` column is
/// added when any hour is invalid.
pub fn write_csv<W: Write>(dataset: &RawDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let with_valid = dataset.observations.valid.iter().any(|v| !v);
    let mut header = vec!["timestamp".to_string(), "actual".to_string()];
    header.extend((0..dataset.ensembles.width()).map(|j| format!("ens_{j:02}")));
    let extras: Vec<(&str, &Vec<f64>)> = [
        ("spot", &dataset.spot),
        ("countertrade", &dataset.countertrade),
        ("imbalance", &dataset.imbalance),
    ]
    .into_iter()
    .filter_map(|(n, v)| v.as_ref().map(|v| (n, v)))
    .collect();
    header.extend(extras.iter().map(|(n, _)| n.to_string()));
    if with_valid {
        header.push("valid".into());
    }
    w.write_record(&header)?;
    let obs = &dataset.observations;
    for t in 0..dataset.len() {
        let mut rec = vec![
            obs.timestamps[t].format("%Y-%m-%dT%H:%M:%SZ").to_string(),
            fmt(obs.values[t]),
        ];
        rec.extend(dataset.ensembles.members.row(t).iter().map(|&v| fmt(v)));
        rec.extend(extras.iter().map(|(_, v)| fmt(v[t])));
        if with_valid {
            rec.push(if obs.valid[t] { "1" } else { "0" }.into());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub fn save_csv(dataset: &RawDataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(dataset, std::io::BufWriter::new(file))
}

#[cfg(test)]
mod tests;
