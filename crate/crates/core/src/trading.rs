//! Spot-versus-imbalance backtest driven by the gap between the adaptive
//! median and the raw ensemble median.

use std::io::Write;

use chrono::{DateTime, Timelike, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetMode {
    #[default]
    Scalar,
    HourOfDay,
}

/// Mean prediction error subtracted from the signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum Offset {
    Scalar(f64),
    /// Indexed by UTC hour of day.
    HourOfDay(Vec<f64>),
}

impl Offset {
    pub fn at(&self, timestamp: DateTime<Utc>) -> f64 {
        match self {
            Offset::Scalar(o) => *o,
            Offset::HourOfDay(v) => v[timestamp.hour() as usize],
        }
    }
}

/// Mean of `pred_median - actual` over the rows in `index`, skipping
/// non-finite pairs.
pub fn compute_offset(
    timestamps: &[DateTime<Utc>],
    pred_median: &[f64],
    actual: &[f64],
    index: &[usize],
    mode: OffsetMode,
) -> Result<Offset> {
    if pred_median.len() != actual.len() || timestamps.len() != actual.len() {
        return Err(Error::Shape("offset inputs are not aligned".into()));
    }
    let mut sum = [0.0f64; 24];
    let mut count = [0usize; 24];
    for &i in index {
        if i >= actual.len() {
            return Err(Error::Shape(format!("offset index {i} out of range")));
        }
        let d = pred_median[i] - actual[i];
        if d.is_finite() {
            let h = match mode {
                OffsetMode::Scalar => 0,
                OffsetMode::HourOfDay => timestamps[i].hour() as usize,
            };
            sum[h] += d;
            count[h] += 1;
        }
    }
    match mode {
        OffsetMode::Scalar => {
            if count[0] == 0 {
                return Err(Error::InsufficientData { required: 1, available: 0 });
            }
            Ok(Offset::Scalar(sum[0] / count[0] as f64))
        }
        OffsetMode::HourOfDay => {
            if let Some(h) = (0..24).find(|&h| count[h] == 0) {
                return Err(Error::Config(format!("no offset training rows at hour {h}")));
            }
            Ok(Offset::HourOfDay((0..24).map(|h| sum[h] / count[h] as f64).collect()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Sell day-ahead, buy back at the imbalance price.
    SellSpot,
    /// Buy day-ahead, sell at the imbalance price.
    BuySpot,
}

impl Direction {
    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::SellSpot => "sell_spot",
            Direction::BuySpot => "buy_spot",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trade {
    pub hour: DateTime<Utc>,
    pub direction: Direction,
    pub spot: f64,
    pub imbalance: f64,
    pub pnl: f64,
    pub cum_pnl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeLedger {
    pub trades: Vec<Trade>,
    /// Hours not traded because a price or signal was missing.
    pub skipped: Vec<DateTime<Utc>>,
    /// Hours inside the dead-band.
    pub abstained: usize,
    pub size: f64,
}

impl TradeLedger {
    pub fn total(&self) -> f64 {
        self.trades.last().map_or(0.0, |t| t.cum_pnl)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["hour", "direction", "spot", "imbalance", "pnl", "cum_pnl"])?;
        for t in &self.trades {
            w.write_record([
                t.hour.format("%Y-%m-%dT%H:%M:%SZ").to_string(),
                t.direction.as_str().to_string(),
                t.spot.to_string(),
                t.imbalance.to_string(),
                t.pnl.to_string(),
                t.cum_pnl.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<ledger writer>", e))?;
        Ok(())
    }
}

/// Hour-aligned series for a backtest.
#[derive(Debug, Clone, Copy)]
pub struct BacktestInput<'a> {
    pub timestamps: &'a [DateTime<Utc>],
    pub pred_median: &'a [f64],
    pub raw_median: &'a [f64],
    pub spot: &'a [f64],
    pub imbalance: &'a [f64],
}

/// Trades `size` MWh every hour: sell spot when the offset-adjusted
/// prediction exceeds the raw median, otherwise buy spot. Hours with
/// `|signal| < dead_band` are not traded.
pub fn backtest(input: &BacktestInput<'_>, offset: &Offset, size: f64, dead_band: Option<f64>) -> Result<TradeLedger> {
    let n = input.timestamps.len();
    if [input.pred_median.len(), input.raw_median.len(), input.spot.len(), input.imbalance.len()]
        .iter()
        .any(|&l| l != n)
    {
        return Err(Error::Shape("backtest series are not aligned".into()));
    }
    if !size.is_finite() {
        return Err(Error::Domain(format!("trade size {size}")));
    }
    if let Offset::HourOfDay(v) = offset {
        if v.len() != 24 {
            return Err(Error::Shape(format!("{} hourly offsets", v.len())));
        }
    }
    let mut ledger = TradeLedger {
        trades: Vec::with_capacity(n),
        skipped: Vec::new(),
        abstained: 0,
        size,
    };
    let mut cum = 0.0;
    for i in 0..n {
        let ts = input.timestamps[i];
        let signal = input.pred_median[i] - offset.at(ts) - input.raw_median[i];
        let (spot, imb) = (input.spot[i], input.imbalance[i]);
        if !(signal.is_finite() && spot.is_finite() && imb.is_finite()) {
            ledger.skipped.push(ts);
            continue;
        }
        if dead_band.is_some_and(|b| signal.abs() < b) {
            ledger.abstained += 1;
            continue;
        }
        let (direction, pnl) = if signal > 0.0 {
            (Direction::SellSpot, (spot - imb) * size)
        } else {
            (Direction::BuySpot, (imb - spot) * size)
        };
        cum += pnl;
        ledger.trades.push(Trade {
            hour: ts,
            direction,
            spot,
            imbalance: imb,
            pnl,
            cum_pnl: cum,
        });
    }
    if !ledger.skipped.is_empty() {
        log::warn!("{} hours skipped for missing prices or signals", ledger.skipped.len());
    }
    Ok(ledger)
}

#[cfg(test)]
mod tests {
    use chrono::{Duration, TimeZone};
    use proptest::prelude::*;

    use super::*;

    fn hours(n: usize) -> Vec<DateTime<Utc>> {
        let t0 = Utc.with_ymd_and_hms(2024, 3, 1, 0, 0, 0).unwrap();
        (0..n as i64).map(|i| t0 + Duration::hours(i)).collect()
    }

    #[test]
    fn offsets() {
        let ts = hours(48);
        let actual: Vec<f64> = (0..48).map(|i| i as f64).collect();
        let idx: Vec<usize> = (0..48).collect();
        assert_eq!(compute_offset(&ts, &actual, &actual, &idx, OffsetMode::Scalar).unwrap(), Offset::Scalar(0.0));
        let biased: Vec<f64> = actual.iter().map(|a| a + 10.0).collect();
        assert_eq!(compute_offset(&ts, &biased, &actual, &idx, OffsetMode::Scalar).unwrap(), Offset::Scalar(10.0));
        let periodic: Vec<f64> = actual.iter().enumerate().map(|(i, a)| a + (i % 24) as f64 * 0.5).collect();
        let Offset::HourOfDay(v) = compute_offset(&ts, &periodic, &actual, &idx, OffsetMode::HourOfDay).unwrap() else {
            panic!()
        };
        assert_eq!(v, (0..24).map(|h| h as f64 * 0.5).collect::<Vec<_>>());
        assert!(compute_offset(&ts, &actual, &actual, &[], OffsetMode::Scalar).is_err());
    }

    #[test]
    fn sell_branch_arithmetic() {
        let ts = hours(1);
        let input = BacktestInput {
            timestamps: &ts,
            pred_median: &[5.0],
            raw_median: &[4.0],
            spot: &[100.0],
            imbalance: &[80.0],
        };
        let l = backtest(&input, &Offset::Scalar(0.0), 1.0, None).unwrap();
        assert_eq!(l.trades[0].direction, Direction::SellSpot);
        assert_eq!(l.total(), 20.0);
    }

    #[test]
    fn equal_prices_make_nothing() {
        let ts = hours(5);
        let p = [10.0, -3.0, 7.5, 0.0, 2.0];
        let input = BacktestInput {
            timestamps: &ts,
            pred_median: &[1.0, 2.0, 0.0, 9.0, 3.0],
            raw_median: &[2.0; 5],
            spot: &p,
            imbalance: &p,
        };
        assert_eq!(backtest(&input, &Offset::Scalar(0.3), 1.0, None).unwrap().total(), 0.0);
    }

    #[test]
    fn missing_prices_are_skipped_and_dead_band_abstains() {
        let ts = hours(4);
        let input = BacktestInput {
            timestamps: &ts,
            pred_median: &[1.0, 5.0, 5.0, 2.1],
            raw_median: &[2.0; 4],
            spot: &[10.0, f64::NAN, 10.0, 10.0],
            imbalance: &[8.0, 8.0, 8.0, 8.0],
        };
        let l = backtest(&input, &Offset::Scalar(0.0), 1.0, Some(0.5)).unwrap();
        assert_eq!(l.skipped, vec![ts[1]]);
        assert_eq!(l.abstained, 1);
        assert_eq!(l.trades.len(), 2);
        assert_eq!(l.total(), -2.0 + 2.0);
    }

    #[test]
    fn ledger_csv_layout() {
        let ts = hours(2);
        let input = BacktestInput {
            timestamps: &ts,
            pred_median: &[3.0, 1.0],
            raw_median: &[2.0, 2.0],
            spot: &[50.0, 40.0],
            imbalance: &[45.0, 41.5],
        };
        let l = backtest(&input, &Offset::Scalar(0.0), 2.0, None).unwrap();
        let mut buf = Vec::new();
        l.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "hour,direction,spot,imbalance,pnl,cum_pnl\n\
             2024-03-01T00:00:00Z,sell_spot,50,45,10,10\n\
             2024-03-01T01:00:00Z,buy_spot,40,41.5,3,13\n"
        );
    }

    proptest! {
        #[test]
        fn antisymmetry_and_size_linearity(
            rows in proptest::collection::vec((-50.0f64..50.0, -100.0f64..200.0, -100.0f64..200.0), 1..60),
            k in 0u32..4,
        ) {
            let ts = hours(rows.len());
            let sig: Vec<f64> = rows.iter().map(|r| if r.0 == 0.0 { 1.0 } else { r.0 }).collect();
            let neg: Vec<f64> = sig.iter().map(|s| -s).collect();
            let zero = vec![0.0; rows.len()];
            let spot: Vec<f64> = rows.iter().map(|r| r.1).collect();
            let imb: Vec<f64> = rows.iter().map(|r| r.2).collect();
            let a = BacktestInput { timestamps: &ts, pred_median: &sig, raw_median: &zero, spot: &spot, imbalance: &imb };
            let b = BacktestInput { pred_median: &neg, ..a };
            let la = backtest(&a, &Offset::Scalar(0.0), 1.0, None).unwrap();
            let lb = backtest(&b, &Offset::Scalar(0.0), 1.0, None).unwrap();
            for (x, y) in la.trades.iter().zip(&lb.trades) {
                prop_assert_eq!(x.pnl, -y.pnl);
                prop_assert_ne!(x.direction, y.direction);
            }
            prop_assert_eq!(la.total(), -lb.total());
            let size = f64::from(1u32 << k);
            let ls = backtest(&a, &Offset::Scalar(0.0), size, None).unwrap();
            for (x, y) in la.trades.iter().zip(&ls.trades) {
                prop_assert_eq!(x.pnl * size, y.pnl);
                prop_assert_eq!(x.cum_pnl * size, y.cum_pnl);
            }
            let total: f64 = ls.trades.iter().map(|t| t.pnl).fold(0.0, |s, p| s + p);
            prop_assert_eq!(total, ls.total());
            let ls3 = backtest(&a, &Offset::Scalar(0.0), 3.0, None).unwrap();
            for (x, y) in la.trades.iter().zip(&ls3.trades) {
                prop_assert_eq!(x.pnl * 3.0, y.pnl);
            }
        }
    }
}
