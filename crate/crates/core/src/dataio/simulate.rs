//! Seeded synthetic wind-farm data.
//!
//! A latent forecast wind speed follows a smoothed AR(1) process around
//! daily and annual cycles. The realized wind is the forecast plus an autocorrelated
//! forecast error, and a logistic power curve maps wind to MW.
//! Ensemble members are drawn from a shrunken copy of the error process
//! (underdispersion), read the forecast at jittered times, and carry a
//! multiplicative bias. Spot, imbalance and countertrade series are generated
//! alongside, with curtailment episodes and ensemble glitches injected at
//! random.

use std::f64::consts::PI;

use chrono::{DateTime, Duration, Datelike, TimeZone, Timelike, Utc};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StatNormal};

use super::RawDataset;
use crate::error::{Error, Result};
use crate::quantile::{EnsembleMatrix, ObservationSeries};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub seed: u64,
    pub hours: usize,
    /// Installed capacity (MW).
    pub capacity: f64,
    pub members: usize,
    pub start: DateTime<Utc>,
    /// Member error spread relative to the true forecast error.
    pub underdispersion: f64,
    /// Multiplicative bias of member power.
    pub bias: f64,
    /// Members read the forecast up to this many hours early or late.
    pub jitter_hours: usize,
    /// Standard deviation of the forecast error in wind speed (m/s).
    pub error_sd: f64,
    /// Steepness of the logistic power curve (per m/s).
    pub curve_slope: f64,
    /// Width of the moving average applied to the forecast anomaly (1 = none).
    pub smooth_hours: usize,
    /// Expected curtailment episodes per 1000 hours.
    pub curtailment_rate: f64,
    /// Expected share of hours hit by ensemble glitches.
    pub glitch_share: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            hours: 24 * 500,
            capacity: 1000.0,
            members: 51,
            start: Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap(),
            underdispersion: 0.5,
            bias: 0.05,
            jitter_hours: 2,
            smooth_hours: 1,
            error_sd: 1.2,
            curve_slope: 0.6,
            curtailment_rate: 1.5,
            glitch_share: 0.015,
        }
    }
}

/// Wind-process parameters (m/s).
const MEAN_WIND: f64 = 8.5;
const DAILY_AMP: f64 = 0.8;
const ANNUAL_AMP: f64 = 1.5;
const FORECAST_PHI: f64 = 0.985;
const FORECAST_SD: f64 = 3.0;
const ERROR_PHI: f64 = 0.9;
/// Power-curve midpoint.
const CURVE_MID: f64 = 9.0;

/// Generated data plus the quantities needed for exact generating quantiles.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub dataset: RawDataset,
    /// Forecast wind speed per hour; the realized wind is this plus a
    /// zero-mean normal error with standard deviation `error_sd`.
    pub forecast_wind: Vec<f64>,
    pub error_sd: f64,
    /// Hours whose observations were curtailed.
    pub curtailed: Vec<bool>,
    /// Hours whose ensembles were overwritten by a glitch.
    pub glitched: Vec<bool>,
    pub capacity: f64,
    pub curve_slope: f64,
}

fn power(capacity: f64, slope: f64, wind: f64) -> f64 {
    capacity / (1.0 + (-slope * (wind - CURVE_MID)).exp())
}

impl Simulation {
    /// The `tau` quantile of the observation at hour `t` given the forecast
    /// wind (exact for uncurtailed hours, since the power curve is monotone).
    pub fn true_quantile(&self, t: usize, tau: f64) -> f64 {
        let n = StatNormal::new(0.0, self.error_sd).expect("positive sd");
        power(self.capacity, self.curve_slope, self.forecast_wind[t] + n.inverse_cdf(tau))
    }
}

pub fn simulate(config: &SimConfig) -> Result<Simulation> {
    if config.hours == 0 || config.members == 0 || !(config.capacity > 0.0) {
        return Err(Error::Config("simulation needs hours, members and a positive capacity".into()));
    }
    if !(config.error_sd > 0.0) {
        return Err(Error::Config("error_sd must be positive".into()));
    }
    if !(config.underdispersion >= 0.0) || !config.bias.is_finite() {
        return Err(Error::Config("underdispersion must be nonnegative and bias finite".into()));
    }
    let n = config.hours;
    let m = config.members;
    let cap = config.capacity;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let timestamps: Vec<DateTime<Utc>> = (0..n as i64).map(|i| config.start + Duration::hours(i)).collect();

    let cycle = |t: &DateTime<Utc>| {
        let h = t.hour() as f64;
        let d = t.ordinal0() as f64;
        MEAN_WIND + DAILY_AMP * (2.0 * PI * (h - 15.0) / 24.0).cos() + ANNUAL_AMP * (2.0 * PI * d / 365.25).cos()
    };
    let innov = |phi: f64, sd: f64| sd * (1.0 - phi * phi).sqrt();

    // forecast wind, with a margin on both sides for jittered reads; the
    // anomaly is a moving average of an AR(1) path, rescaled to FORECAST_SD
    let margin = config.jitter_hours;
    let smooth = config.smooth_hours.max(1);
    let len = n + 2 * margin + smooth - 1;
    let mut a = FORECAST_SD * rng.sample::<f64, _>(StandardNormal);
    let path: Vec<f64> = (0..len)
        .map(|_| {
            a = FORECAST_PHI * a + innov(FORECAST_PHI, FORECAST_SD) * rng.sample::<f64, _>(StandardNormal);
            a
        })
        .collect();
    let shrink = smoothing_sd_ratio(FORECAST_PHI, smooth);
    let mut forecast_ext = Vec::with_capacity(n + 2 * margin);
    for (k, w) in path.windows(smooth).enumerate() {
        let anomaly = w.iter().sum::<f64>() / (smooth as f64 * shrink);
        let t = k as i64 - margin as i64;
        let cyc = cycle(&(config.start + Duration::hours(t)));
        forecast_ext.push((cyc + anomaly).max(0.0));
    }
    let forecast: Vec<f64> = forecast_ext[margin..margin + n].to_vec();

    // realized wind = forecast + AR(1) error with stationary sd config.error_sd
    let mut err = config.error_sd * rng.sample::<f64, _>(StandardNormal);
    let mut actual = Vec::with_capacity(n);
    for f in &forecast {
        err = ERROR_PHI * err + innov(ERROR_PHI, config.error_sd) * rng.sample::<f64, _>(StandardNormal);
        actual.push(power(cap, config.curve_slope, f + err));
    }

    // members: shrunken error paths, jittered forecast reads, biased power
    let shifts: Vec<i64> = (0..m)
        .map(|j| {
            if j == 0 {
                0
            } else {
                rng.random_range(-(margin as i64)..=margin as i64)
            }
        })
        .collect();
    let mut members = Array2::zeros((n, m));
    for j in 0..m {
        let mut e = config.error_sd * rng.sample::<f64, _>(StandardNormal);
        for t in 0..n {
            e = ERROR_PHI * e + innov(ERROR_PHI, config.error_sd) * rng.sample::<f64, _>(StandardNormal);
            let idx = (t as i64 + margin as i64 + shifts[j]) as usize;
            let e_j = if j == 0 { 0.0 } else { config.underdispersion * e };
            let p = power(cap, config.curve_slope, forecast_ext[idx] + e_j) * (1.0 + config.bias);
            members[[t, j]] = p.min(cap);
        }
    }

    // market series
    let price_noise = Normal::new(0.0, 8.0).expect("valid sd");
    let mut spot = Vec::with_capacity(n);
    let mut imbalance = Vec::with_capacity(n);
    for t in 0..n {
        let h = timestamps[t].hour() as f64;
        let share = forecast_to_share(&members, t, cap);
        let s = 55.0 + 15.0 * (2.0 * PI * (h - 8.0) / 24.0).sin() - 70.0 * share.powi(3) + price_noise.sample(&mut rng);
        // a long system (more wind than forecast) settles below spot
        let surprise = (actual[t] - share * cap) / cap;
        let imb = s - 60.0 * surprise + 0.5 * price_noise.sample(&mut rng);
        spot.push(s);
        imbalance.push(imb);
    }

    // countertrade: moderate baseline with curtailment episodes
    let mut countertrade: Vec<f64> = (0..n).map(|_| rng.random_range(100.0..1200.0)).collect();
    let mut curtailed = vec![false; n];
    let episodes = ((n as f64 / 1000.0) * config.curtailment_rate).round() as usize;
    for _ in 0..episodes {
        let lead = rng.random_range(3..=8);
        let low = rng.random_range(2..=10);
        let tail = rng.random_range(3..=8);
        let len = lead + low + tail;
        if n <= len {
            break;
        }
        let s = rng.random_range(0..n - len);
        for t in s..s + lead {
            countertrade[t] = rng.random_range(1750.0..2300.0);
        }
        for t in s + lead..s + lead + low {
            countertrade[t] = rng.random_range(0.0..20.0);
            actual[t] *= rng.random_range(0.05..0.3);
            curtailed[t] = true;
        }
        for t in s + lead + low..s + len {
            countertrade[t] = rng.random_range(1750.0..2300.0);
        }
    }

    // glitches: runs where a block of members sticks near 365 MW
    let mut glitched = vec![false; n];
    let runs = ((n as f64 * config.glitch_share) / 12.0).round() as usize;
    for _ in 0..runs {
        let len = rng.random_range(6..=18).min(n);
        let s = rng.random_range(0..=n - len);
        let k = rng.random_range(15..=30).min(m);
        for t in s..s + len {
            let cols = rand::seq::index::sample(&mut rng, m, k);
            for j in cols {
                members[[t, j]] = 365.0 + rng.random_range(-4.0..4.0);
            }
            glitched[t] = true;
        }
    }

    let dataset = RawDataset {
        area: "SYN".into(),
        observations: ObservationSeries::new(timestamps.clone(), actual, vec![true; n])?,
        ensembles: EnsembleMatrix::new(timestamps, members)?,
        spot: Some(spot),
        countertrade: Some(countertrade),
        imbalance: Some(imbalance),
    };
    Ok(Simulation {
        dataset,
        forecast_wind: forecast,
        error_sd: config.error_sd,
        curtailed,
        glitched,
        capacity: cap,
        curve_slope: config.curve_slope,
    })
}

/// Standard deviation of a `width`-point mean of a unit AR(1) process.
fn smoothing_sd_ratio(phi: f64, width: usize) -> f64 {
    let w = width as f64;
    let cov: f64 = (0..width)
        .flat_map(|i| (0..width).map(move |j| phi.powi((i as i32 - j as i32).abs())))
        .sum();
    cov.sqrt() / w
}

/// Mean member output as a share of capacity.
fn forecast_to_share(members: &Array2<f64>, t: usize, cap: f64) -> f64 {
    members.row(t).mean().unwrap_or(0.0) / cap
}
