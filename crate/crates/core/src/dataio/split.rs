use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hours in each consecutive role, in order: corrector training, TAQR
/// seed fit, TAQR window fill, and out-of-sample test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub nn_train: usize,
    pub taqr_init_params: usize,
    pub taqr_init_window: usize,
    pub test: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            nn_train: 14040,
            taqr_init_params: 192,
            taqr_init_window: 4944,
            test: 5112,
        }
    }
}

impl SplitSpec {
    pub fn total(&self) -> usize {
        self.nn_train + self.taqr_init_params + self.taqr_init_window + self.test
    }

    /// Scales every role but the 192-hour seed by `factor`, rounding down.
    pub fn proportional(factor: f64) -> Result<Self> {
        if !(factor > 0.0) || !factor.is_finite() {
            return Err(Error::Config(format!("split factor {factor}")));
        }
        let d = Self::default();
        let scale = |h: usize| (h as f64 * factor).floor() as usize;
        Ok(Self {
            nn_train: scale(d.nn_train),
            taqr_init_params: d.taqr_init_params,
            taqr_init_window: scale(d.taqr_init_window),
            test: scale(d.test),
        })
    }

    /// Largest proportional split that fits `hours` rows; the standard
    /// split when exactly 24288 are available.
    pub fn fit_to(hours: usize) -> Result<Self> {
        let d = Self::default();
        let scaled = d.nn_train + d.taqr_init_window + d.test;
        // at least a day of test hours
        let required = d.taqr_init_params + (24 * scaled).div_ceil(d.test);
        if hours < required {
            return Err(Error::InsufficientData {
                required,
                available: hours,
            });
        }
        Self::proportional((hours - d.taqr_init_params) as f64 / scaled as f64)
    }

    pub fn ranges(&self) -> SplitRanges {
        let a = self.nn_train;
        let b = a + self.taqr_init_params;
        let c = b + self.taqr_init_window;
        let d = c + self.test;
        SplitRanges {
            nn_train: 0..a,
            taqr_init_params: a..b,
            taqr_init_window: b..c,
            test: c..d,
        }
    }
}

/// Row ranges of the four roles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRanges {
    pub nn_train: Range<usize>,
    pub taqr_init_params: Range<usize>,
    pub taqr_init_window: Range<usize>,
    pub test: Range<usize>,
}

impl SplitRanges {
    /// Validates explicit ranges: nonempty, in order, contiguous.
    pub fn new(ranges: [Range<usize>; 4]) -> Result<Self> {
        for (i, r) in ranges.iter().enumerate() {
            if r.is_empty() {
                return Err(Error::Config(format!("split role {i} is empty")));
            }
            if i > 0 && r.start != ranges[i - 1].end {
                return Err(Error::Config(format!(
                    "split role {i} starts at {} but role {} ends at {}",
                    r.start,
                    i - 1,
                    ranges[i - 1].end
                )));
            }
        }
        let [nn_train, taqr_init_params, taqr_init_window, test] = ranges;
        Ok(Self {
            nn_train,
            taqr_init_params,
            taqr_init_window,
            test,
        })
    }

    pub fn as_array(&self) -> [Range<usize>; 4] {
        [
            self.nn_train.clone(),
            self.taqr_init_params.clone(),
            self.taqr_init_window.clone(),
            self.test.clone(),
        ]
    }

    pub fn end(&self) -> usize {
        self.test.end
    }
}

/// Row ranges for `spec` on a series of `hours` rows.
pub fn split(hours: usize, spec: &SplitSpec) -> Result<SplitRanges> {
    if spec.total() > hours {
        return Err(Error::InsufficientData {
            required: spec.total(),
            available: hours,
        });
    }
    let r = spec.ranges();
    SplitRanges::new(r.as_array())
}
