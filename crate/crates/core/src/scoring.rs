//! Forecast verification: MAE, CRPS, quantile score, reliability and
//! relative scores.
//!
//! Every scorer takes an optional validity mask; masked timestamps are
//! dropped before anything is computed, so scoring a masked series is the
//! same as scoring the shortened one.

use std::io::Write;

use chrono::{DateTime, Utc};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantile::{pinball, sorted_median, QuantileLevels};

/// Predicted quantiles at fixed nominal levels, one row per timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileForecast {
    pub timestamps: Vec<DateTime<Utc>>,
    pub levels: QuantileLevels,
    /// T x Q, column order follows `levels`.
    pub values: Array2<f64>,
    /// Set once rows have been rearranged to be nondecreasing.
    pub crossing_repaired: bool,
    /// Per row, whether rearrangement changed it.
    pub repaired_rows: Vec<bool>,
}

impl QuantileForecast {
    pub fn new(
        timestamps: Vec<DateTime<Utc>>,
        levels: QuantileLevels,
        values: Array2<f64>,
    ) -> Result<Self> {
        if values.nrows() != timestamps.len() || values.ncols() != levels.len() {
            return Err(Error::Shape(format!(
                "forecast is {}x{} for {} timestamps and {} levels",
                values.nrows(),
                values.ncols(),
                timestamps.len(),
                levels.len()
            )));
        }
        let n = timestamps.len();
        Ok(Self {
            timestamps,
            levels,
            values,
            crossing_repaired: false,
            repaired_rows: vec![false; n],
        })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    /// Fraction of rows that are not nondecreasing across levels.
    pub fn crossing_rate(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let crossed = self
            .values
            .rows()
            .into_iter()
            .filter(|r| r.iter().zip(r.iter().skip(1)).any(|(a, b)| a > b))
            .count();
        crossed as f64 / self.len() as f64
    }

    pub fn column(&self, tau: f64) -> Option<Vec<f64>> {
        self.levels.position(tau).map(|q| self.values.column(q).to_vec())
    }
}

/// How the point forecast used by MAE is taken from a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointRule {
    /// The 0.5 level of a quantile forecast.
    MedianLevel,
    /// Median of the row values (ensembles).
    MemberMedian,
}

/// Scores for one method over one evaluation span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub mae: f64,
    pub crps: f64,
    pub qs_mean: f64,
    pub levels: Vec<f64>,
    pub qs_per_level: Vec<f64>,
    pub reliability: Vec<f64>,
    pub n_scored: usize,
}

impl ScoreReport {
    /// Scores rows `values` (T x Q, interpreted as quantiles at `levels`)
    /// against `y`. CRPS treats each row as an equally weighted ensemble.
    pub fn compute(
        y: &[f64],
        values: ArrayView2<f64>,
        levels: &QuantileLevels,
        mask: Option<&[bool]>,
        point: PointRule,
    ) -> Result<Self> {
        check_aligned(y.len(), values.nrows(), mask)?;
        if values.ncols() != levels.len() {
            return Err(Error::Shape(format!(
                "{} forecast columns for {} levels",
                values.ncols(),
                levels.len()
            )));
        }
        let idx = kept(y.len(), mask)?;
        let point_forecast: Vec<f64> = match point {
            PointRule::MedianLevel => {
                let q = levels.position(0.5).ok_or_else(|| {
                    Error::Domain("median-level point forecast needs the 0.5 level".into())
                })?;
                values.column(q).to_vec()
            }
            PointRule::MemberMedian => values
                .rows()
                .into_iter()
                .map(|r| {
                    let mut v = r.to_vec();
                    v.sort_by(f64::total_cmp);
                    sorted_median(&v)
                })
                .collect(),
        };
        let mae = mae(y, &point_forecast, mask)?;
        let crps = idx
            .iter()
            .map(|&t| crps_ensemble(&values.row(t).to_vec(), y[t]))
            .sum::<f64>()
            / idx.len() as f64;
        let (qs_per_level, qs_mean) = quantile_score_values(y, values, levels, mask)?;
        let reliability = reliability_values(y, values, mask)?;
        Ok(Self {
            mae,
            crps,
            qs_mean,
            levels: levels.as_slice().to_vec(),
            qs_per_level,
            reliability,
            n_scored: idx.len(),
        })
    }

    pub fn for_forecast(y: &[f64], forecast: &QuantileForecast, mask: Option<&[bool]>) -> Result<Self> {
        Self::compute(
            y,
            forecast.values.view(),
            &forecast.levels,
            mask,
            PointRule::MedianLevel,
        )
    }

    /// Scores raw or corrected ensemble members, read as quantiles at
    /// equidistant levels from 0.05 to 0.95.
    pub fn for_ensemble(y: &[f64], members: ArrayView2<f64>, mask: Option<&[bool]>) -> Result<Self> {
        let levels = ensemble_level_assumption(members.ncols())?;
        let mut sorted = members.to_owned();
        for mut row in sorted.rows_mut() {
            let mut v = row.to_vec();
            v.sort_by(f64::total_cmp);
            row.iter_mut().zip(v).for_each(|(d, s)| *d = s);
        }
        Self::compute(y, sorted.view(), &levels, mask, PointRule::MemberMedian)
    }

    /// Largest |observed frequency - nominal level| over all levels.
    pub fn max_reliability_deviation(&self) -> f64 {
        self.levels
            .iter()
            .zip(&self.reliability)
            .map(|(l, f)| (f - l).abs())
            .fold(0.0, f64::max)
    }

    /// Flat rows `(metric, level, value)`; `level` is empty for scalars.
    pub fn flat_rows(&self) -> Vec<(String, Option<f64>, f64)> {
        let mut rows = vec![
            ("mae".to_string(), None, self.mae),
            ("crps".to_string(), None, self.crps),
            ("qs_mean".to_string(), None, self.qs_mean),
            ("n_scored".to_string(), None, self.n_scored as f64),
        ];
        for (l, v) in self.levels.iter().zip(&self.qs_per_level) {
            rows.push(("qs".into(), Some(*l), *v));
        }
        for (l, v) in self.levels.iter().zip(&self.reliability) {
            rows.push(("reliability".into(), Some(*l), *v));
        }
        rows
    }

    /// Writes the flat CSV layout `method,metric,level,value`.
    pub fn write_csv<W: Write>(&self, method: &str, wtr: &mut csv::Writer<W>) -> Result<()> {
        for (metric, level, value) in self.flat_rows() {
            wtr.write_record([
                method.to_string(),
                metric,
                level.map(|l| l.to_string()).unwrap_or_default(),
                value.to_string(),
            ])?;
        }
        Ok(())
    }
}

fn check_aligned(n: usize, m: usize, mask: Option<&[bool]>) -> Result<()> {
    if n != m {
        return Err(Error::Shape(format!("{n} observations, {m} forecasts")));
    }
    if let Some(mask) = mask {
        if mask.len() != n {
            return Err(Error::Shape(format!("{n} observations, mask of {}", mask.len())));
        }
    }
    Ok(())
}

fn kept(n: usize, mask: Option<&[bool]>) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..n).filter(|&t| mask.is_none_or(|m| m[t])).collect();
    if idx.is_empty() {
        return Err(Error::Domain("no valid timestamps to score".into()));
    }
    Ok(idx)
}

/// Mean absolute error over valid timestamps.
pub fn mae(y: &[f64], y_hat: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    check_aligned(y.len(), y_hat.len(), mask)?;
    let idx = kept(y.len(), mask)?;
    Ok(idx.iter().map(|&t| (y[t] - y_hat[t]).abs()).sum::<f64>() / idx.len() as f64)
}

/// CRPS of the empirical step CDF of `members` at observation `y`.
///
/// The CDF jumps by 1/M at each sorted member (ties stack). The integral
/// of (F - 1{u >= y})^2 is summed exactly over the constant segments.
pub fn crps_ensemble(members: &[f64], y: f64) -> f64 {
    let m = members.len();
    if m == 0 {
        return f64::NAN;
    }
    let mut x = members.to_vec();
    if x.windows(2).any(|w| w[0] > w[1]) {
        x.sort_by(f64::total_cmp);
    }
    let mut total = 0.0;
    // (-inf, x_0): F = 0, only the part above y counts
    if y < x[0] {
        total += x[0] - y;
    }
    for i in 0..m {
        let p = (i + 1) as f64 / m as f64;
        let lo = x[i];
        let hi = if i + 1 < m { x[i + 1] } else { f64::INFINITY };
        if y > lo {
            total += p * p * (hi.min(y) - lo);
        }
        if hi > y && i + 1 < m {
            total += (1.0 - p) * (1.0 - p) * (hi - lo.max(y));
        }
    }
    total
}

/// Per-level quantile scores and their mean.
pub fn quantile_score(
    y: &[f64],
    forecast: &QuantileForecast,
    mask: Option<&[bool]>,
) -> Result<(Vec<f64>, f64)> {
    quantile_score_values(y, forecast.values.view(), &forecast.levels, mask)
}

fn quantile_score_values(
    y: &[f64],
    values: ArrayView2<f64>,
    levels: &QuantileLevels,
    mask: Option<&[bool]>,
) -> Result<(Vec<f64>, f64)> {
    check_aligned(y.len(), values.nrows(), mask)?;
    let idx = kept(y.len(), mask)?;
    let per_level: Vec<f64> = levels
        .iter()
        .enumerate()
        .map(|(q, tau)| {
            idx.iter()
                .map(|&t| pinball(y[t] - values[[t, q]], tau))
                .sum::<f64>()
                / idx.len() as f64
        })
        .collect();
    let mean = per_level.iter().sum::<f64>() / per_level.len() as f64;
    Ok((per_level, mean))
}

/// Observed frequency of `y <= q(tau)` per level.
pub fn reliability(y: &[f64], forecast: &QuantileForecast, mask: Option<&[bool]>) -> Result<Vec<f64>> {
    reliability_values(y, forecast.values.view(), mask)
}

fn reliability_values(y: &[f64], values: ArrayView2<f64>, mask: Option<&[bool]>) -> Result<Vec<f64>> {
    check_aligned(y.len(), values.nrows(), mask)?;
    let idx = kept(y.len(), mask)?;
    Ok((0..values.ncols())
        .map(|q| {
            idx.iter().filter(|&&t| y[t] <= values[[t, q]]).count() as f64 / idx.len() as f64
        })
        .collect())
}

/// Model score over baseline score; below 1 is an improvement.
pub fn relative_score(s_model: f64, s_baseline: f64) -> Result<f64> {
    if !(s_baseline > 0.0) || !s_baseline.is_finite() {
        return Err(Error::Domain(format!(
            "relative score needs a positive baseline, got {s_baseline}"
        )));
    }
    Ok(s_model / s_baseline)
}

/// Nominal levels assigned to `m` ensemble members: equidistant over [0.05, 0.95].
pub fn ensemble_level_assumption(m: usize) -> Result<QuantileLevels> {
    QuantileLevels::equidistant(m, 0.05, 0.95)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    /// Oracle: midpoint rule on a grid refined between every breakpoint,
    /// with F evaluated by counting members.
    fn crps_numeric(members: &[f64], y: f64, per_segment: usize) -> f64 {
        let mut pts: Vec<f64> = members.to_vec();
        pts.push(y);
        pts.sort_by(f64::total_cmp);
        let m = members.len() as f64;
        let mut total = 0.0;
        for w in pts.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b <= a {
                continue;
            }
            let h = (b - a) / per_segment as f64;
            for k in 0..per_segment {
                let u = a + (k as f64 + 0.5) * h;
                let f = members.iter().filter(|&&x| x <= u).count() as f64 / m;
                let ind = if u >= y { 1.0 } else { 0.0 };
                total += (f - ind).powi(2) * h;
            }
        }
        total
    }

    #[test]
    fn crps_unit_cases() {
        assert!(crps_ensemble(&[3.0], 3.0).abs() < 1e-12);
        assert!((crps_ensemble(&[5.0], 2.0) - 3.0).abs() < 1e-12);
        assert!((crps_ensemble(&[-1.5], 2.0) - 3.5).abs() < 1e-12);
        assert!((crps_ensemble(&[0.0, 1.0], 0.5) - 0.25).abs() < 1e-12);
        assert!((crps_numeric(&[0.0, 1.0], 0.5, 1000) - 0.25).abs() < 1e-10);
    }

    #[test]
    fn crps_matches_energy_form() {
        let x: [f64; 6] = [0.3, -1.2, 4.0, 4.0, 2.2, 0.0];
        let y: f64 = 1.1;
        let m = x.len() as f64;
        let a: f64 = x.iter().map(|v| (v - y).abs()).sum::<f64>() / m;
        let b: f64 = x
            .iter()
            .flat_map(|u| x.iter().map(move |v| (u - v).abs()))
            .sum::<f64>()
            / (2.0 * m * m);
        assert!((crps_ensemble(&x, y) - (a - b)).abs() < 1e-12);
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0], None).unwrap(), 0.0);
        assert_eq!(mae(&[0.0, 0.0], &[1.0, -1.0], None).unwrap(), 1.0);
        assert!(mae(&[1.0], &[2.0], Some(&[false])).is_err());
        let y = [1.0, 5.0, -2.0];
        let f = [0.0, 7.0, -1.0];
        let shift = |v: &[f64]| v.iter().map(|x| x + 13.5).collect::<Vec<_>>();
        let a = mae(&y, &f, None).unwrap();
        let b = mae(&shift(&y), &shift(&f), None).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    fn forecast(values: Array2<f64>, levels: Vec<f64>) -> QuantileForecast {
        let t0 = DateTime::from_timestamp(0, 0).unwrap();
        let ts = (0..values.nrows())
            .map(|i| t0 + chrono::Duration::hours(i as i64))
            .collect();
        QuantileForecast::new(ts, QuantileLevels::new(levels).unwrap(), values).unwrap()
    }

    #[test]
    fn quantile_score_examples() {
        let y = [1.0, 2.0, 3.0];
        let perfect = forecast(array![[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]], vec![0.1, 0.9]);
        let (per, mean) = quantile_score(&y, &perfect, None).unwrap();
        assert_eq!(per, vec![0.0, 0.0]);
        assert_eq!(mean, 0.0);

        let f = forecast(array![[0.0, 2.0], [2.5, 2.0], [1.0, 4.0]], vec![0.1, 0.9]);
        let (per, mean) = quantile_score(&y, &f, None).unwrap();
        let doubled = forecast(&f.values * 2.0, vec![0.1, 0.9]);
        let y2: Vec<f64> = y.iter().map(|v| v * 2.0).collect();
        let (per2, mean2) = quantile_score(&y2, &doubled, None).unwrap();
        for (a, b) in per.iter().zip(&per2) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
        assert!((2.0 * mean - mean2).abs() < 1e-12);
        assert_eq!(mean, per.iter().sum::<f64>() / 2.0);
    }

    #[test]
    fn constant_quantile_score_minimized_at_empirical_quantile() {
        let y = [4.0, 1.0, 7.0, 3.0, 3.5, 9.0, 0.5];
        for tau in [0.1, 0.25, 0.5, 0.8] {
            let qs = |c: f64| {
                let f = forecast(Array2::from_elem((y.len(), 1), c), vec![tau]);
                quantile_score(&y, &f, None).unwrap().1
            };
            let best = y.iter().map(|&c| qs(c)).fold(f64::INFINITY, f64::min);
            let q = crate::quantile::empirical_quantile(&y, tau).unwrap();
            assert!((qs(q) - best).abs() < 1e-12, "tau {tau}");
        }
    }

    #[test]
    fn reliability_extremes() {
        let y = [1.0, 2.0, 3.0];
        let above = forecast(Array2::from_elem((3, 1), 1e12), vec![0.5]);
        let below = forecast(Array2::from_elem((3, 1), -1e12), vec![0.5]);
        assert_eq!(reliability(&y, &above, None).unwrap(), vec![1.0]);
        assert_eq!(reliability(&y, &below, None).unwrap(), vec![0.0]);
    }

    #[test]
    fn relative_score_examples() {
        assert_eq!(relative_score(3.0, 3.0).unwrap(), 1.0);
        assert!((relative_score(0.602 * 62.761, 62.761).unwrap() - 0.602).abs() < 1e-12);
        let (a, b) = (2.5, 7.0);
        assert!((relative_score(a, b).unwrap() * relative_score(b, a).unwrap() - 1.0).abs() < 1e-15);
        assert!(relative_score(1.0, 0.0).is_err());
        assert!(relative_score(1.0, -1.0).is_err());
    }

    #[test]
    fn ensemble_levels() {
        assert_eq!(ensemble_level_assumption(2).unwrap().as_slice(), &[0.05, 0.95]);
        let l51 = ensemble_level_assumption(51).unwrap();
        for w in l51.as_slice().windows(2) {
            assert!((w[1] - w[0] - 0.018).abs() < 1e-12);
        }
        let l20 = ensemble_level_assumption(20).unwrap();
        assert_eq!(l20.len(), 20);
        assert!((l20.as_slice()[19] - 0.95).abs() < 1e-12);
        assert!(ensemble_level_assumption(1).is_err());
    }

    #[test]
    fn ensemble_median_rule() {
        let y = [0.0];
        let m20: Vec<f64> = (1..=20).map(|v| v as f64).collect();
        let r = ScoreReport::for_ensemble(&y, Array2::from_shape_vec((1, 20), m20).unwrap().view(), None)
            .unwrap();
        assert_eq!(r.mae, 10.5);
        let m51: Vec<f64> = (1..=51).map(|v| v as f64).collect();
        let r = ScoreReport::for_ensemble(&y, Array2::from_shape_vec((1, 51), m51).unwrap().view(), None)
            .unwrap();
        assert_eq!(r.mae, 26.0);
    }

    #[test]
    fn masked_equals_shortened() {
        let y = [1.0, 2.0, 30.0, 4.0, 5.0];
        let v = array![[0.5, 1.5], [2.0, 2.5], [0.0, 1.0], [3.0, 4.5], [4.0, 6.0]];
        let mask = [true, true, false, true, true];
        let f = forecast(v.clone(), vec![0.25, 0.5]);
        let a = ScoreReport::for_forecast(&y, &f, Some(&mask)).unwrap();
        let keep = [0, 1, 3, 4];
        let ys: Vec<f64> = keep.iter().map(|&i| y[i]).collect();
        let short = forecast(v.select(ndarray::Axis(0), &keep), vec![0.25, 0.5]);
        let b = ScoreReport::for_forecast(&ys, &short, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_scored, 4);
    }

    proptest! {
        #[test]
        fn crps_closed_form_matches_integration(
            members in prop::collection::vec(-10.0f64..10.0, 1..12),
            y in -12.0f64..12.0,
        ) {
            let exact = crps_ensemble(&members, y);
            let numeric = crps_numeric(&members, y, 4);
            prop_assert!((exact - numeric).abs() < 1e-8);
            prop_assert!(exact >= 0.0);
        }
    }
}
