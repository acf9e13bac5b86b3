//! Quantile primitives shared by every other module: the check (pinball)
//! loss, the lower empirical quantile and the hourly series containers.

use chrono::{DateTime, Duration, Utc};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The 13 levels NABQR forecasts are evaluated at.
pub const DEFAULT_LEVELS: [f64; 13] = [
    0.05, 0.1, 0.15, 0.25, 0.35, 0.45, 0.5, 0.55, 0.65, 0.75, 0.85, 0.9, 0.95,
];

/// Strictly increasing probabilities inside (0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct QuantileLevels(Vec<f64>);

impl QuantileLevels {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Domain("quantile level set is empty".into()));
        }
        for &tau in &levels {
            check_tau(tau)?;
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain(format!(
                "quantile levels must be strictly increasing: {levels:?}"
            )));
        }
        Ok(Self(levels))
    }

    /// `count` equidistant levels from `lo` to `hi` inclusive.
    pub fn equidistant(count: usize, lo: f64, hi: f64) -> Result<Self> {
        if count < 2 {
            return Err(Error::Domain(format!(
                "need at least 2 equidistant levels, got {count}"
            )));
        }
        let step = (hi - lo) / (count - 1) as f64;
        Self::new((0..count).map(|i| lo + step * i as f64).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.0.iter().copied()
    }

    /// Index of `tau` within the set, matched to 1e-12.
    pub fn position(&self, tau: f64) -> Option<usize> {
        self.0.iter().position(|&l| (l - tau).abs() < 1e-12)
    }
}

impl Default for QuantileLevels {
    fn default() -> Self {
        Self(DEFAULT_LEVELS.to_vec())
    }
}

impl TryFrom<Vec<f64>> for QuantileLevels {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<QuantileLevels> for Vec<f64> {
    fn from(l: QuantileLevels) -> Self {
        l.0
    }
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("quantile level {tau} outside (0,1)")))
    }
}

/// Check loss `m * (tau - 1{m < 0})`.
pub fn check_loss(m: f64, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if !m.is_finite() {
        return Err(Error::NonFinite(format!("residual {m}")));
    }
    Ok(pinball(m, tau))
}

/// Unchecked check loss for hot loops where `tau` is already validated.
#[inline]
pub(crate) fn pinball(m: f64, tau: f64) -> f64 {
    if m < 0.0 {
        m * (tau - 1.0)
    } else {
        m * tau
    }
}

/// Lower empirical quantile `inf { v : F_n(v) >= tau }`.
pub fn empirical_quantile(sample: &[f64], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if sample.is_empty() {
        return Err(Error::Domain("empirical quantile of an empty sample".into()));
    }
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[lower_quantile_index(sorted.len(), tau)])
}

/// Index into a sorted sample of length `n` holding its lower `tau`-quantile.
pub(crate) fn lower_quantile_index(n: usize, tau: f64) -> usize {
    // smallest k (1-based) with k/n >= tau, guarding against k/n rounding
    let mut k = (tau * n as f64).ceil() as usize;
    k = k.clamp(1, n);
    while k > 1 && (k - 1) as f64 / n as f64 >= tau {
        k -= 1;
    }
    while k < n && (k as f64) / (n as f64) < tau {
        k += 1;
    }
    k - 1
}

/// Median of a sample; the mean of the two middle values for even sizes.
pub fn median(sample: &[f64]) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::Domain("median of an empty sample".into()));
    }
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted_median(&sorted))
}

pub(crate) fn sorted_median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Checks that `timestamps` advance by exactly one hour.
pub fn check_hourly(timestamps: &[DateTime<Utc>]) -> Result<()> {
    for w in timestamps.windows(2) {
        if w[1] - w[0] != Duration::hours(1) {
            return Err(Error::Gap {
                after: w[0],
                next: w[1],
            });
        }
    }
    Ok(())
}

/// Hourly observed production with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSeries {
    pub timestamps: Vec<DateTime<Utc>>,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl ObservationSeries {
    pub fn new(timestamps: Vec<DateTime<Utc>>, values: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if values.len() != timestamps.len() || valid.len() != timestamps.len() {
            return Err(Error::Shape(format!(
                "observation series lengths differ: {} timestamps, {} values, {} flags",
                timestamps.len(),
                values.len(),
                valid.len()
            )));
        }
        check_hourly(&timestamps)?;
        if let Some(i) = (0..values.len()).find(|&i| valid[i] && !values[i].is_finite()) {
            return Err(Error::NonFinite(format!(
                "observation at {} is marked valid but is {}",
                timestamps[i], values[i]
            )));
        }
        Ok(Self {
            timestamps,
            values,
            valid,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Restricts validity to hours where `keep` is also true.
    pub fn apply_mask(&mut self, keep: &[bool]) {
        for (v, &k) in self.valid.iter_mut().zip(keep) {
            *v &= k;
        }
    }
}

/// T x M grid of power scenarios on an hourly grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleMatrix {
    pub timestamps: Vec<DateTime<Utc>>,
    pub members: Array2<f64>,
    pub sorted: bool,
}

impl EnsembleMatrix {
    pub fn new(timestamps: Vec<DateTime<Utc>>, members: Array2<f64>) -> Result<Self> {
        if members.nrows() != timestamps.len() {
            return Err(Error::Shape(format!(
                "{} ensemble rows for {} timestamps",
                members.nrows(),
                timestamps.len()
            )));
        }
        if members.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ensemble matrix entry".into()));
        }
        check_hourly(&timestamps)?;
        let sorted = members
            .rows()
            .into_iter()
            .all(|r| r.iter().zip(r.iter().skip(1)).all(|(a, b)| a <= b));
        Ok(Self {
            timestamps,
            members,
            sorted,
        })
    }

    pub fn len(&self) -> usize {
        self.members.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.members.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.members.ncols()
    }

    /// Contiguous sub-range of rows.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            timestamps: self.timestamps[range.clone()].to_vec(),
            members: self.members.slice(ndarray::s![range, ..]).to_owned(),
            sorted: self.sorted,
        }
    }
}

/// Sorts every row ascending; the multiset of each row is preserved.
pub fn sort_rows(ensembles: &EnsembleMatrix) -> EnsembleMatrix {
    let mut out = ensembles.clone();
    if !out.sorted {
        for mut row in out.members.rows_mut() {
            let mut v = row.to_vec();
            v.sort_by(f64::total_cmp);
            row.iter_mut().zip(v).for_each(|(dst, src)| *dst = src);
        }
        out.sorted = true;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn check_loss_examples() {
        assert_eq!(check_loss(2.0, 0.5).unwrap(), 1.0);
        assert!((check_loss(-2.0, 0.9).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(check_loss(0.0, 0.3).unwrap(), 0.0);
        assert!(check_loss(1.0, 0.0).is_err());
        assert!(check_loss(1.0, 1.0).is_err());
        assert!(check_loss(f64::NAN, 0.5).is_err());
    }

    #[test]
    fn empirical_quantile_examples() {
        assert_eq!(empirical_quantile(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.5).unwrap(), 3.0);
        assert_eq!(empirical_quantile(&[1.0, 2.0, 3.0, 4.0], 0.5).unwrap(), 2.0);
        for tau in [0.01, 0.3, 0.99] {
            assert_eq!(empirical_quantile(&[7.0], tau).unwrap(), 7.0);
        }
        assert!(empirical_quantile(&[], 0.5).is_err());
    }

    #[test]
    fn lower_index_exact_boundaries() {
        // 0.1 * 10 is exactly one observation; 0.3 * 10 rounds above 3 in binary
        assert_eq!(lower_quantile_index(10, 0.1), 0);
        assert_eq!(lower_quantile_index(10, 0.3), 2);
        assert_eq!(lower_quantile_index(4, 0.25), 0);
        assert_eq!(lower_quantile_index(20, 0.95), 18);
    }

    #[test]
    fn levels_validation() {
        assert!(QuantileLevels::new(vec![0.1, 0.1]).is_err());
        assert!(QuantileLevels::new(vec![0.5, 0.2]).is_err());
        assert!(QuantileLevels::new(vec![0.0, 0.2]).is_err());
        assert_eq!(QuantileLevels::default().len(), 13);
        let l: QuantileLevels = serde_json::from_str("[0.1,0.9]").unwrap();
        assert_eq!(l.as_slice(), &[0.1, 0.9]);
        assert!(serde_json::from_str::<QuantileLevels>("[0.9,0.1]").is_err());
    }

    fn ts(n: usize) -> Vec<DateTime<Utc>> {
        let t0 = DateTime::from_timestamp(1_700_000_000 / 3600 * 3600, 0).unwrap();
        (0..n).map(|i| t0 + Duration::hours(i as i64)).collect()
    }

    #[test]
    fn sort_rows_examples() {
        let m = EnsembleMatrix::new(ts(3), array![[3.0, 1.0, 2.0], [1.0, 2.0, 3.0], [2.0, 2.0, 1.0]])
            .unwrap();
        assert!(!m.sorted);
        let s = sort_rows(&m);
        assert!(s.sorted);
        assert_eq!(s.members, array![[1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [1.0, 2.0, 2.0]]);
        assert_eq!(sort_rows(&s), s);
    }

    #[test]
    fn series_rejects_gaps() {
        let mut t = ts(3);
        t[2] += Duration::hours(1);
        assert!(matches!(
            ObservationSeries::new(t, vec![0.0; 3], vec![true; 3]),
            Err(Error::Gap { .. })
        ));
    }

    proptest! {
        #[test]
        fn check_loss_nonnegative(m in -1e6f64..1e6, tau in 0.001f64..0.999) {
            let l = check_loss(m, tau).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert_eq!(l == 0.0, m == 0.0);
            let scaled = check_loss(3.0 * m, tau).unwrap();
            prop_assert!((scaled - 3.0 * l).abs() <= 1e-9 * (1.0 + l));
        }

        #[test]
        fn empirical_quantile_minimizes_check_loss(
            sample in prop::collection::vec(-100.0f64..100.0, 1..50),
            tau in 0.01f64..0.99,
        ) {
            let q = empirical_quantile(&sample, tau).unwrap();
            let total = |c: f64| sample.iter().map(|&x| pinball(x - c, tau)).sum::<f64>();
            let best = sample.iter().map(|&c| total(c)).fold(f64::INFINITY, f64::min);
            prop_assert!(total(q) <= best + 1e-9 * (1.0 + best.abs()));
        }

        #[test]
        fn sort_rows_idempotent_and_preserves_rows(
            rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 4), 1..8),
        ) {
            let n = rows.len();
            let flat: Vec<f64> = rows.concat();
            let m = EnsembleMatrix::new(ts(n), Array2::from_shape_vec((n, 4), flat).unwrap()).unwrap();
            let s = sort_rows(&m);
            prop_assert_eq!(sort_rows(&s).members, s.members.clone());
            for (a, b) in m.members.rows().into_iter().zip(s.members.rows()) {
                let mut a = a.to_vec();
                a.sort_by(f64::total_cmp);
                prop_assert_eq!(a, b.to_vec());
            }
        }
    }
}
