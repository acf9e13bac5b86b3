//! Time-adaptive quantile regression.
//!
//! Each quantile level is an independent LP over a sliding window of
//! (design row, observation) pairs. The window is seeded by a small
//! batch solve and then advanced one observation at a time, re-optimizing
//! from the previous vertex.

mod simplex;

use std::collections::VecDeque;

use chrono::{DateTime, Duration, Timelike, Utc};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantile::{check_tau, pinball, QuantileLevels};
use crate::scoring::QuantileForecast;

pub use simplex::{Sign, WindowRow};
use simplex::{independent_columns, initial_basis, Vertex};

/// Rows used to seed the adaptive fit.
pub const DEFAULT_INIT_ROWS: usize = 192;
/// Maximum sliding-window length.
pub const DEFAULT_WINDOW: usize = 5000;
/// Pivot budget per step is this multiple of the coefficient count.
pub const PIVOTS_PER_COEFFICIENT: usize = 50;

/// Result of a from-scratch LP solve.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchFit {
    /// Coefficients; columns dropped for collinearity are zero.
    pub beta: Vec<f64>,
    /// Row indices of the interpolated (basic) observations.
    pub basis: Vec<usize>,
    pub objective: f64,
    /// Columns kept after the rank check.
    pub active: Vec<usize>,
    pub pivots: usize,
}

/// Solves the quantile-regression LP on `x` (n x K) and `y` from scratch.
pub fn qr_batch_solve(x: ArrayView2<f64>, y: &[f64], tau: f64) -> Result<BatchFit> {
    check_tau(tau)?;
    let (n, k) = x.dim();
    if y.len() != n {
        return Err(Error::Shape(format!("{n} design rows, {} observations", y.len())));
    }
    if k == 0 {
        return Err(Error::Shape("design matrix has no columns".into()));
    }
    if n <= k {
        return Err(Error::Underdetermined { rows: n, cols: k });
    }
    let mut rows: VecDeque<WindowRow> = x
        .rows()
        .into_iter()
        .zip(y)
        .enumerate()
        .map(|(i, (r, &yv))| make_row(i as u64, r.to_vec(), yv))
        .collect::<Result<_>>()?;
    let fit = cold_solve(&mut rows, k, tau, cold_cap(n))?;
    Ok(BatchFit {
        basis: positions(&rows, &fit.basis),
        beta: fit.beta,
        objective: fit.objective,
        active: fit.active,
        pivots: fit.pivots,
    })
}

fn make_row(id: u64, x: Vec<f64>, y: f64) -> Result<WindowRow> {
    if !y.is_finite() || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("regression row {id}")));
    }
    Ok(WindowRow {
        id,
        x,
        y,
        sign: Sign::Pos,
    })
}

fn cold_cap(n: usize) -> usize {
    (20 * n).max(1000)
}

fn expand(active: &[usize], beta_a: &[f64], k: usize) -> Vec<f64> {
    let mut beta = vec![0.0; k];
    for (&c, &b) in active.iter().zip(beta_a) {
        beta[c] = b;
    }
    beta
}

/// Window positions of the given ids (the window is sorted by id).
fn positions(rows: &VecDeque<WindowRow>, ids: &[u64]) -> Vec<usize> {
    ids.iter()
        .map(|id| {
            rows.binary_search_by_key(id, |r| r.id)
                .expect("basic observation is in the window")
        })
        .collect()
}

/// A solved vertex: active columns, basic row ids, pivots spent, the
/// full coefficient vector and the objective.
struct Solved {
    active: Vec<usize>,
    basis: Vec<u64>,
    pivots: usize,
    beta: Vec<f64>,
    objective: f64,
}

fn solved(v: &Vertex<'_>, active: Vec<usize>, k: usize) -> Solved {
    Solved {
        basis: v.basis.iter().map(|&p| v.id(p)).collect(),
        pivots: v.pivots,
        beta: expand(&active, &v.beta, k),
        objective: v.objective(),
        active,
    }
}

/// Rank check, initial basis and simplex from scratch.
fn cold_solve(rows: &mut VecDeque<WindowRow>, k: usize, tau: f64, cap: usize) -> Result<Solved> {
    let active = independent_columns(rows, k);
    if active.is_empty() {
        return Err(Error::Rank);
    }
    if rows.len() <= active.len() {
        return Err(Error::Underdetermined {
            rows: rows.len(),
            cols: active.len(),
        });
    }
    let basis = initial_basis(rows, &active, tau)?;
    let mut v = Vertex::new(rows, &active, tau, basis)?;
    v.optimize(cap)?;
    Ok(solved(&v, active.clone(), k))
}

/// Counters describing how a state has been advanced.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub steps: u64,
    pub last_pivots: usize,
    pub total_pivots: u64,
    pub cold_restarts: u64,
}

/// Adaptive fit for one quantile level.
///
/// A state is advanced by exactly one owner; distinct states are independent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaqrState {
    tau: f64,
    k: usize,
    capacity: usize,
    window: VecDeque<WindowRow>,
    active: Vec<usize>,
    basis: Vec<u64>,
    beta: Vec<f64>,
    objective: f64,
    next_id: u64,
    stats: StepStats,
}

/// Outcome of one adaptive step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    /// Out-of-sample prediction made before the window update.
    pub prediction: f64,
    pub pivots: usize,
    pub cold_restart: bool,
}

impl TaqrState {
    /// Solves the seed problem and returns a state whose window holds its rows.
    pub fn warm_start(x0: ArrayView2<f64>, y0: &[f64], tau: f64, capacity: usize) -> Result<Self> {
        check_tau(tau)?;
        let (n, k) = x0.dim();
        if y0.len() != n {
            return Err(Error::Shape(format!("{n} design rows, {} observations", y0.len())));
        }
        if k == 0 {
            return Err(Error::Shape("design matrix has no columns".into()));
        }
        if n <= k {
            return Err(Error::Underdetermined { rows: n, cols: k });
        }
        if capacity < n {
            return Err(Error::Config(format!(
                "window capacity {capacity} is smaller than the {n} seed rows"
            )));
        }
        let mut window: VecDeque<WindowRow> = x0
            .rows()
            .into_iter()
            .zip(y0)
            .enumerate()
            .map(|(i, (r, &yv))| make_row(i as u64, r.to_vec(), yv))
            .collect::<Result<_>>()?;
        let fit = cold_solve(&mut window, k, tau, cold_cap(n))?;
        Ok(Self {
            tau,
            k,
            capacity,
            window,
            active: fit.active,
            basis: fit.basis,
            beta: fit.beta,
            objective: fit.objective,
            next_id: n as u64,
            stats: StepStats {
                last_pivots: fit.pivots,
                total_pivots: fit.pivots as u64,
                ..StepStats::default()
            },
        })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn objective(&self) -> f64 {
        self.objective
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn stats(&self) -> &StepStats {
        &self.stats
    }

    /// Indices of the active columns.
    pub fn active_columns(&self) -> &[usize] {
        &self.active
    }

    /// Design rows and observations currently in the window, oldest first.
    pub fn window_data(&self) -> (Array2<f64>, Vec<f64>) {
        let n = self.window.len();
        let mut x = Array2::zeros((n, self.k));
        for (i, r) in self.window.iter().enumerate() {
            x.row_mut(i).iter_mut().zip(&r.x).for_each(|(d, s)| *d = *s);
        }
        (x, self.window.iter().map(|r| r.y).collect())
    }

    /// Window rows that are currently basic (interpolated).
    pub fn basic_rows(&self) -> Vec<usize> {
        positions(&self.window, &self.basis)
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.k {
            return Err(Error::Shape(format!("{} regressors, expected {}", x.len(), self.k)));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("regressor row".into()));
        }
        Ok(x.iter().zip(&self.beta).map(|(a, b)| a * b).sum())
    }

    /// Predicts at `x_new`, then slides the window and re-optimizes.
    pub fn step(&mut self, x_new: &[f64], y_new: f64) -> Result<StepOutcome> {
        let prediction = self.predict(x_new)?;
        let (pivots, cold_restart) = self.update(x_new, y_new)?;
        Ok(StepOutcome {
            prediction,
            pivots,
            cold_restart,
        })
    }

    /// Appends one observation (evicting the oldest when full) and
    /// re-optimizes. Returns the pivots spent and whether a cold solve
    /// was needed.
    pub fn update(&mut self, x_new: &[f64], y_new: f64) -> Result<(usize, bool)> {
        if x_new.len() != self.k {
            return Err(Error::Shape(format!("{} regressors, expected {}", x_new.len(), self.k)));
        }
        let row = make_row(self.next_id, x_new.to_vec(), y_new)?;
        self.next_id += 1;
        self.window.push_back(row);

        let cap = PIVOTS_PER_COEFFICIENT * self.k;
        let warm = self.warm_update(cap);
        let (fit, cold) = match warm {
            Ok(fit) => (fit, false),
            Err(Error::IterationCap(_)) | Err(Error::Rank) => {
                log::debug!("tau {}: warm update failed, cold solve", self.tau);
                while self.window.len() > self.capacity {
                    self.window.pop_front();
                }
                let cap = cold_cap(self.window.len());
                self.stats.cold_restarts += 1;
                (cold_solve(&mut self.window, self.k, self.tau, cap)?, true)
            }
            Err(e) => return Err(e),
        };
        let pivots = fit.pivots;
        self.active = fit.active;
        self.basis = fit.basis;
        self.beta = fit.beta;
        self.objective = fit.objective;
        self.stats.steps += 1;
        self.stats.last_pivots = pivots;
        self.stats.total_pivots += pivots as u64;
        Ok((pivots, cold))
    }

    fn warm_update(&mut self, cap: usize) -> Result<Solved> {
        let mut pivots = 0;
        if self.window.len() > self.capacity {
            let oldest = self.window[0].id;
            if let Some(j) = self.basis.iter().position(|&b| b == oldest) {
                let pos = positions(&self.window, &self.basis);
                let mut v = Vertex::new(&mut self.window, &self.active, self.tau, pos)?;
                v.forced_exchange(j)?;
                pivots += v.pivots;
                self.basis = v.basis.iter().map(|&p| v.id(p)).collect();
            }
            self.window.pop_front();
        }
        let newest = self.window.len() - 1;
        let pos = positions(&self.window, &self.basis);
        let mut v = Vertex::new(&mut self.window, &self.active, self.tau, pos)?;
        if v.resid[newest].abs() <= v.tol {
            // an interpolated arrival can sit on either side; keep the vertex optimal if possible
            v.set_sign(newest, Sign::Pos);
            v.refresh()?;
            if !v.is_optimal() {
                v.set_sign(newest, Sign::Neg);
                v.refresh()?;
                if !v.is_optimal() {
                    v.set_sign(newest, Sign::Pos);
                    v.refresh()?;
                }
            }
        }
        v.optimize(cap.saturating_sub(pivots))?;
        let mut fit = solved(&v, self.active.clone(), self.k);
        fit.pivots += pivots;
        Ok(fit)
    }

    /// Check-loss objective of `beta` over the window, recomputed directly.
    pub fn window_objective(&self, beta: &[f64]) -> f64 {
        self.window
            .iter()
            .map(|r| {
                let fit: f64 = r.x.iter().zip(beta).map(|(a, b)| a * b).sum();
                pinball(r.y - fit, self.tau)
            })
            .sum()
    }
}

/// How far ahead forecasts are issued.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Horizon {
    /// One step ahead; coefficients are refreshed every hour.
    Rolling,
    /// Forecasts for each calendar day are issued at `issue_hour` on the
    /// previous day, using only observations strictly before the issue
    /// time. Coefficients stay frozen across the 24 target hours.
    DayAhead { issue_hour: u32 },
}

impl Default for Horizon {
    fn default() -> Self {
        Horizon::DayAhead { issue_hour: 12 }
    }
}

impl Horizon {
    /// Latest instant whose observations may inform a forecast for `target`.
    pub fn issue_time(&self, target: DateTime<Utc>) -> DateTime<Utc> {
        match *self {
            Horizon::Rolling => target,
            Horizon::DayAhead { issue_hour } => {
                let midnight = target
                    - Duration::hours(target.hour() as i64)
                    - Duration::minutes(target.minute() as i64)
                    - Duration::seconds(target.second() as i64);
                midnight - Duration::hours(24 - issue_hour as i64)
            }
        }
    }
}

/// A row awaiting assimilation: forecast already issued, observation
/// possibly still unknown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingRow {
    pub timestamp: DateTime<Utc>,
    pub x: Vec<f64>,
    pub y: Option<f64>,
}

/// Independent adaptive fits for a set of levels plus the queue of
/// issued-but-unassimilated rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveQuantiles {
    levels: QuantileLevels,
    horizon: Horizon,
    states: Vec<TaqrState>,
    pending: VecDeque<PendingRow>,
    last_timestamp: Option<DateTime<Utc>>,
}

impl AdaptiveQuantiles {
    /// Seeds one state per level from `x0`/`y0`.
    pub fn warm_start(
        x0: ArrayView2<f64>,
        y0: &[f64],
        levels: &QuantileLevels,
        capacity: usize,
        horizon: Horizon,
    ) -> Result<Self> {
        let states = levels
            .iter()
            .map(|tau| TaqrState::warm_start(x0, y0, tau, capacity))
            .collect::<Result<_>>()?;
        Ok(Self {
            levels: levels.clone(),
            horizon,
            states,
            pending: VecDeque::new(),
            last_timestamp: None,
        })
    }

    pub fn levels(&self) -> &QuantileLevels {
        &self.levels
    }

    pub fn states(&self) -> &[TaqrState] {
        &self.states
    }

    pub fn horizon(&self) -> Horizon {
        self.horizon
    }

    pub fn last_timestamp(&self) -> Option<DateTime<Utc>> {
        self.last_timestamp
    }

    /// Assimilates pending rows observed strictly before `cutoff`. Rows
    /// without an observation are dropped.
    fn assimilate_before(&mut self, cutoff: DateTime<Utc>) -> Result<()> {
        while self.pending.front().is_some_and(|p| p.timestamp < cutoff) {
            let row = self.pending.pop_front().expect("front exists");
            if let Some(y) = row.y {
                for state in &mut self.states {
                    state.update(&row.x, y)?;
                }
            }
        }
        Ok(())
    }

    /// Records a late-arriving observation for an issued row.
    pub fn observe(&mut self, timestamp: DateTime<Utc>, y: f64) -> bool {
        match self.pending.iter_mut().find(|p| p.timestamp == timestamp) {
            Some(p) => {
                p.y = Some(y);
                true
            }
            None => false,
        }
    }

    /// Issues forecasts for consecutive rows `(timestamp, x, y)`; `y` is
    /// queued and only assimilated once a later issue time has passed it.
    pub fn forecast(&mut self, rows: &[(DateTime<Utc>, Vec<f64>, Option<f64>)]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((rows.len(), self.states.len()));
        for (i, (ts, x, y)) in rows.iter().enumerate() {
            if let Some(last) = self.last_timestamp {
                if *ts <= last {
                    return Err(Error::OutOfOrder {
                        expected: last + Duration::hours(1),
                        got: *ts,
                    });
                }
            }
            self.assimilate_before(self.horizon.issue_time(*ts))?;
            for (q, state) in self.states.iter().enumerate() {
                out[[i, q]] = state.predict(x)?;
            }
            self.pending.push_back(PendingRow {
                timestamp: *ts,
                x: x.clone(),
                y: *y,
            });
            self.last_timestamp = Some(*ts);
        }
        Ok(out)
    }
}

/// Runs adaptive quantile regression over a full series.
///
/// The first `n_init` rows (valid ones only) seed the fit; every later
/// row gets an out-of-sample forecast. Invalid rows are forecast but never
/// enter a window.
#[allow(clippy::too_many_arguments)]
pub fn run_taqr(
    timestamps: &[DateTime<Utc>],
    x: ArrayView2<f64>,
    y: &[f64],
    valid: &[bool],
    levels: &QuantileLevels,
    n_init: usize,
    n_full: usize,
    horizon: Horizon,
) -> Result<QuantileForecast> {
    let t = x.nrows();
    if y.len() != t || valid.len() != t || timestamps.len() != t {
        return Err(Error::Shape("run_taqr inputs are not aligned".into()));
    }
    if t <= n_init {
        return Err(Error::InsufficientData {
            required: n_init + 1,
            available: t,
        });
    }
    let seed: Vec<usize> = (0..n_init).filter(|&i| valid[i]).collect();
    let x0 = x.select(ndarray::Axis(0), &seed);
    let y0: Vec<f64> = seed.iter().map(|&i| y[i]).collect();
    let mut model = AdaptiveQuantiles::warm_start(x0.view(), &y0, levels, n_full, horizon)?;
    let rows: Vec<_> = (n_init..t)
        .map(|i| (timestamps[i], x.row(i).to_vec(), valid[i].then_some(y[i])))
        .collect();
    let values = model.forecast(&rows)?;
    QuantileForecast::new(timestamps[n_init..].to_vec(), levels.clone(), values)
}
