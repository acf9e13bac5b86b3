//! Keep-masks for curtailment episodes and ensemble glitches.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::RawDataset;
use crate::quantile::EnsembleMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CountertradeFilter {
    /// Flank level (MW) that must be exceeded before and after a low run.
    pub high: f64,
    /// Countertrade below this (MW) counts as a low run.
    pub low: f64,
    /// Hours added on each side of every flagged run.
    pub pad: usize,
    /// How far (hours) to look past missing values for a flank.
    pub flank_hours: usize,
    /// Negative spot prices are flagged only inside this window, if set.
    pub spot_window: Option<(DateTime<Utc>, DateTime<Utc>)>,
}

impl Default for CountertradeFilter {
    fn default() -> Self {
        Self {
            high: 1700.0,
            low: 25.0,
            pad: 2,
            flank_hours: 24,
            spot_window: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlitchFilter {
    pub low: f64,
    pub high: f64,
    /// A row is flagged when strictly more members than this lie in (low, high).
    pub count: usize,
    pub pad: usize,
}

impl Default for GlitchFilter {
    fn default() -> Self {
        Self {
            low: 358.0,
            high: 370.0,
            count: 9,
            pad: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CleaningConfig {
    pub countertrade: Option<CountertradeFilter>,
    pub glitch: Option<GlitchFilter>,
}

impl CleaningConfig {
    pub fn standard() -> Self {
        Self {
            countertrade: Some(CountertradeFilter::default()),
            glitch: Some(GlitchFilter::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub hours: usize,
    pub removed_countertrade: usize,
    pub removed_glitch: usize,
    pub removed_total: usize,
}

/// Widens every flagged hour by `pad` hours on each side.
fn dilate(flag: &[bool], pad: usize) -> Vec<bool> {
    let n = flag.len();
    let mut out = vec![false; n];
    for (i, _) in flag.iter().enumerate().filter(|(_, f)| **f) {
        let lo = i.saturating_sub(pad);
        let hi = (i + pad).min(n.saturating_sub(1));
        out[lo..=hi].iter_mut().for_each(|v| *v = true);
    }
    out
}

/// First finite value met walking from `start` in direction `step`,
/// skipping missing hours, at most `reach` hours away.
fn nearest_finite(values: &[f64], start: usize, forward: bool, reach: usize) -> Option<f64> {
    let mut i = start;
    for _ in 0..reach {
        if forward {
            i += 1;
            if i >= values.len() {
                return None;
            }
        } else {
            if i == 0 {
                return None;
            }
            i -= 1;
        }
        if values[i].is_finite() {
            return Some(values[i]);
        }
    }
    None
}

/// Keep-mask removing curtailment episodes: maximal runs of countertrade
/// below `low` whose nearest observed neighbours on both sides exceed
/// `high`, and hours with negative spot prices. Flagged runs are padded.
pub fn countertrade_filter(dataset: &RawDataset, config: &CountertradeFilter) -> Vec<bool> {
    let n = dataset.len();
    if dataset.countertrade.is_none() && dataset.spot.is_none() {
        log::warn!("no countertrade or spot series; countertrade filter keeps every hour");
        return vec![true; n];
    }
    let mut flag = vec![false; n];
    if let Some(ct) = &dataset.countertrade {
        let mut t = 0;
        while t < n {
            if !(ct[t].is_finite() && ct[t] < config.low) {
                t += 1;
                continue;
            }
            let start = t;
            while t < n && ct[t].is_finite() && ct[t] < config.low {
                t += 1;
            }
            let end = t - 1;
            let before = nearest_finite(ct, start, false, config.flank_hours);
            let after = nearest_finite(ct, end, true, config.flank_hours);
            if before.is_some_and(|v| v > config.high) && after.is_some_and(|v| v > config.high) {
                flag[start..=end].iter_mut().for_each(|f| *f = true);
            }
        }
    }
    if let Some(spot) = &dataset.spot {
        let ts = dataset.timestamps();
        for t in 0..n {
            let in_window = config
                .spot_window
                .is_none_or(|(a, b)| ts[t] >= a && ts[t] <= b);
            if in_window && spot[t] < 0.0 {
                flag[t] = true;
            }
        }
    }
    dilate(&flag, config.pad).into_iter().map(|f| !f).collect()
}

/// Keep-mask removing hours where more than `count` members sit strictly
/// inside (`low`, `high`), padded on each side.
pub fn glitch_filter(ensembles: &EnsembleMatrix, config: &GlitchFilter) -> Vec<bool> {
    let flag: Vec<bool> = ensembles
        .members
        .rows()
        .into_iter()
        .map(|r| r.iter().filter(|&&v| v > config.low && v < config.high).count() > config.count)
        .collect();
    dilate(&flag, config.pad).into_iter().map(|f| !f).collect()
}

/// Applies the configured filters (logical AND of their keep-masks) to the
/// dataset's validity mask.
pub fn clean(dataset: &mut RawDataset, config: &CleaningConfig) -> CleaningReport {
    let n = dataset.len();
    let ct = config
        .countertrade
        .as_ref()
        .map(|c| countertrade_filter(dataset, c))
        .unwrap_or_else(|| vec![true; n]);
    let gl = config
        .glitch
        .as_ref()
        .map(|c| glitch_filter(&dataset.ensembles, c))
        .unwrap_or_else(|| vec![true; n]);
    let keep: Vec<bool> = ct.iter().zip(&gl).map(|(a, b)| *a && *b).collect();
    dataset.observations.apply_mask(&keep);
    CleaningReport {
        hours: n,
        removed_countertrade: ct.iter().filter(|k| !**k).count(),
        removed_glitch: gl.iter().filter(|k| !**k).count(),
        removed_total: keep.iter().filter(|k| !**k).count(),
    }
}
