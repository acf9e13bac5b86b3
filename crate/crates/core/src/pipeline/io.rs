//! Long-format forecast tables: one row per (target hour, level).

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::{DateTime, Utc};
use ndarray::Array2;

use crate::dataio::parse_timestamp;
use crate::error::{CellError, Error, Result};
use crate::quantile::QuantileLevels;
use crate::scoring::QuantileForecast;
use crate::taqr::Horizon;

const FMT: &str = "%Y-%m-%dT%H:%M:%SZ";

/// Writes `timestamp,level,value,issue_time` rows.
pub fn write_forecast_csv<W: Write>(forecast: &QuantileForecast, horizon: Horizon, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["timestamp", "level", "value", "issue_time"])?;
    for (t, ts) in forecast.timestamps.iter().enumerate() {
        let target = ts.format(FMT).to_string();
        let issued = horizon.issue_time(*ts).format(FMT).to_string();
        for (q, tau) in forecast.levels.iter().enumerate() {
            w.write_record([&target, &tau.to_string(), &forecast.values[[t, q]].to_string(), &issued])?;
        }
    }
    w.flush().map_err(|e| Error::io("<forecast writer>", e))?;
    Ok(())
}

/// Reads a table written by [`write_forecast_csv`]. Every target hour must
/// carry the same set of levels.
pub fn read_forecast_csv<R: Read>(reader: R) -> Result<QuantileForecast> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Config(format!("forecast table lacks a {name} column")))
    };
    let (ct, cl, cv) = (col("timestamp")?, col("level")?, col("value")?);
    let mut rows: BTreeMap<DateTime<Utc>, Vec<(f64, f64)>> = BTreeMap::new();
    let mut bad = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let cell = |c: usize| rec.get(c).unwrap_or("").trim();
        let ts = parse_timestamp(cell(ct));
        let tau = cell(cl).parse::<f64>().ok();
        let v = cell(cv).parse::<f64>().ok();
        for (ok, c) in [(ts.is_some(), ct), (tau.is_some(), cl), (v.is_some(), cv)] {
            if !ok {
                bad.push(CellError {
                    line,
                    column: headers[c].to_string(),
                    text: cell(c).to_string(),
                });
            }
        }
        if let (Some(ts), Some(tau), Some(v)) = (ts, tau, v) {
            rows.entry(ts).or_default().push((tau, v));
        }
    }
    if !bad.is_empty() {
        return Err(Error::Malformed(bad));
    }
    let first = rows
        .values()
        .next()
        .ok_or(Error::InsufficientData { required: 1, available: 0 })?;
    let mut taus: Vec<f64> = first.iter().map(|p| p.0).collect();
    taus.sort_by(f64::total_cmp);
    let levels = QuantileLevels::new(taus.clone())?;
    let mut values = Array2::zeros((rows.len(), taus.len()));
    for (t, (ts, mut pairs)) in rows.iter().map(|(k, v)| (k, v.clone())).enumerate() {
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        if pairs.len() != taus.len() || pairs.iter().zip(&taus).any(|(p, tau)| p.0 != *tau) {
            return Err(Error::Shape(format!("levels at {ts} differ from the first hour")));
        }
        for (q, (_, v)) in pairs.into_iter().enumerate() {
            values[[t, q]] = v;
        }
    }
    QuantileForecast::new(rows.into_keys().collect(), levels, values)
}
