//! End-to-end orchestration: correct the ensembles, run adaptive quantile
//! regression on the corrected basis, compare against the raw ensembles
//! and the baselines, and keep the state needed to continue online.

mod io;

use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, Utc};
use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::baselines::{qgb_fit_levels, qgb_predict_rows, qrf_fit, qrf_predict_rows, BoostConfig, ForestConfig};
use crate::dataio::{clean, split, CleaningConfig, CleaningReport, RawDataset, SplitRanges, SplitSpec};
use crate::error::{Error, Result};
use crate::nncorrect::{sort_in_place, Corrector, LagSpec, TrainConfig};
use crate::quantile::{sort_rows, EnsembleMatrix, QuantileLevels, DEFAULT_LEVELS};
use crate::scoring::{relative_score, PointRule, QuantileForecast, ScoreReport};
use crate::taqr::{AdaptiveQuantiles, Horizon, DEFAULT_INIT_ROWS, DEFAULT_WINDOW};

pub use io::{read_forecast_csv, write_forecast_csv};

/// Comparison methods run next to NABQR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Comparisons {
    /// Adaptive quantile regression on the sorted raw members.
    pub taqr_raw: bool,
    pub qrf: Option<ForestConfig>,
    pub qgb: Option<BoostConfig>,
}

impl Default for Comparisons {
    fn default() -> Self {
        Self {
            taqr_raw: true,
            qrf: Some(ForestConfig::default()),
            qgb: Some(BoostConfig::default()),
        }
    }
}

impl Comparisons {
    pub fn none() -> Self {
        Self {
            taqr_raw: false,
            qrf: None,
            qgb: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub lags: LagSpec,
    pub train: TrainConfig,
    /// Rows seeding the adaptive fit; must match the split's seed role.
    pub taqr_init: usize,
    /// Sliding-window capacity of the adaptive fit.
    pub window: usize,
    /// Levels of the published forecast.
    pub levels: QuantileLevels,
    pub horizon: Horizon,
    /// Sort each published row across levels.
    pub repair: bool,
    /// Feed the corrected members to the adaptive fit; when off the raw
    /// sorted members are used instead.
    pub correction: bool,
    pub cleaning: CleaningConfig,
    /// Explicit split; when absent the default proportions are fitted to
    /// the dataset length.
    pub split: Option<SplitSpec>,
    pub comparisons: Comparisons,
    /// Retrain the corrector every this many test days (off by default).
    pub retrain_every_days: Option<usize>,
    /// Master seed: the corrector uses it directly, the forest uses seed + 1.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            lags: LagSpec::default(),
            train: TrainConfig::default(),
            taqr_init: DEFAULT_INIT_ROWS,
            window: DEFAULT_WINDOW,
            levels: QuantileLevels::new(DEFAULT_LEVELS.to_vec()).expect("valid default levels"),
            horizon: Horizon::default(),
            repair: true,
            correction: true,
            cleaning: CleaningConfig::standard(),
            split: None,
            comparisons: Comparisons::default(),
            retrain_every_days: None,
            seed: 42,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.taqr_init == 0 || self.window < self.taqr_init {
            return Err(Error::Config(format!(
                "window {} must hold the {} seed rows",
                self.window, self.taqr_init
            )));
        }
        if self.repair && self.levels.position(0.5).is_none() {
            log::warn!("published levels lack 0.5; MAE will not be available");
        }
        if let Some(s) = &self.split {
            if s.taqr_init_params != self.taqr_init {
                return Err(Error::Config(format!(
                    "split seeds the adaptive fit with {} rows, config expects {}",
                    s.taqr_init_params, self.taqr_init
                )));
            }
        }
        if self.retrain_every_days == Some(0) {
            return Err(Error::Config("retrain_every_days must be positive".into()));
        }
        Ok(())
    }

    /// Training settings with the master seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    fn split_spec(&self, hours: usize) -> Result<SplitSpec> {
        match self.split {
            Some(s) => Ok(s),
            None => {
                // the scaled roles share what the seed role leaves over
                let seed = SplitSpec::default().taqr_init_params;
                let mut s = SplitSpec::fit_to((hours + seed).saturating_sub(self.taqr_init))?;
                s.taqr_init_params = self.taqr_init;
                Ok(s)
            }
        }
    }
}

/// Applies the configured cleaning and computes the split.
pub fn prepare(dataset: &RawDataset, config: &PipelineConfig) -> Result<(RawDataset, SplitRanges, CleaningReport)> {
    let mut cleaned = dataset.clone();
    let report = clean(&mut cleaned, &config.cleaning);
    let spec = config.split_spec(cleaned.len())?;
    let ranges = split(cleaned.len(), &spec)?;
    Ok((cleaned, ranges, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Raw,
    Qrnn,
    Taqr,
    Qrf,
    Qgb,
    Nabqr,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Raw => "raw",
            Method::Qrnn => "qrnn",
            Method::Taqr => "taqr",
            Method::Qrf => "qrf",
            Method::Qgb => "qgb",
            Method::Nabqr => "nabqr",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    pub report: ScoreReport,
}

/// Scores relative to the raw ensembles; below 1 is an improvement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeRow {
    pub method: Method,
    pub mae: f64,
    pub qs: f64,
    pub crps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub area: String,
    pub test_start: DateTime<Utc>,
    pub test_end: DateTime<Utc>,
    pub reports: Vec<MethodReport>,
    pub relative: Vec<RelativeRow>,
    /// Fraction of adaptive-fit rows that crossed before repair.
    pub nabqr_crossing_rate: f64,
    /// Fraction of corrected rows that needed sorting.
    pub corrector_crossing_rate: Option<f64>,
    pub cleaning: Option<CleaningReport>,
}

impl ReportBundle {
    pub fn get(&self, method: Method) -> Option<&ScoreReport> {
        self.reports.iter().find(|r| r.method == method).map(|r| &r.report)
    }

    pub fn relative(&self, method: Method) -> Option<&RelativeRow> {
        self.relative.iter().find(|r| r.method == method)
    }

    /// Plain-text table: the raw row in absolute terms, every other method
    /// relative to it.
    pub fn table(&self) -> String {
        let mut out = format!("{:<8}{:>10}{:>10}{:>10}\n", "method", "MAE", "QS", "CRPS");
        if let Some(raw) = self.get(Method::Raw) {
            out += &format!("{:<8}{:>10.3}{:>10.3}{:>10.3}\n", "raw", raw.mae, raw.qs_mean, raw.crps);
        }
        for r in &self.relative {
            out += &format!("{:<8}{:>10.3}{:>10.3}{:>10.3}\n", r.method.name(), r.mae, r.qs, r.crps);
        }
        out
    }

    pub fn write_scores_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["method", "metric", "level", "value"])?;
        for r in &self.reports {
            r.report.write_csv(r.method.name(), &mut w)?;
        }
        for r in &self.relative {
            for (metric, v) in [("rs_mae", r.mae), ("rs_qs", r.qs), ("rs_crps", r.crps)] {
                w.write_record([r.method.name(), metric, "", &v.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io("<scores writer>", e))?;
        Ok(())
    }
}

/// Everything needed to continue forecasting one day at a time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    pub format: String,
    pub version: u32,
    pub corrector: Option<Corrector>,
    pub lags: LagSpec,
    /// Timestamps of the trailing sorted raw rows kept for lag windows.
    pub history_timestamps: Vec<DateTime<Utc>>,
    pub history: Array2<f64>,
    pub model: AdaptiveQuantiles,
    pub repair: bool,
}

const STATE_FORMAT: &str = "nabqr-state";
const STATE_VERSION: u32 = 1;

/// Forecast block produced by [`online_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineOutput {
    pub forecast: QuantileForecast,
    /// Crossing rate of the block before repair.
    pub crossing_rate: f64,
    /// Observations that matched no pending hour.
    pub unmatched: usize,
}

impl PipelineState {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        if s.format != STATE_FORMAT || s.version != STATE_VERSION {
            return Err(Error::Config(format!("unsupported state {} v{}", s.format, s.version)));
        }
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Swaps in a retrained corrector for subsequent blocks.
    pub fn set_corrector(&mut self, corrector: Corrector) -> Result<()> {
        if corrector.lags != self.lags {
            return Err(Error::Config("replacement corrector uses a different lag set".into()));
        }
        if let Some(old) = &self.corrector {
            if old.width() != corrector.width() {
                return Err(Error::Shape("replacement corrector changes the basis width".into()));
            }
        }
        self.corrector = Some(corrector);
        Ok(())
    }

    /// Seeds the adaptive fit and runs it through the window-fill role,
    /// stopping right before the test rows.
    pub fn initialize(
        dataset: &RawDataset,
        ranges: &SplitRanges,
        config: &PipelineConfig,
        corrector: Option<Corrector>,
    ) -> Result<Self> {
        let sorted = sort_rows(&dataset.ensembles);
        let span = ranges.taqr_init_params.start..ranges.taqr_init_window.end;
        let design = design_matrix(corrector.as_ref(), &sorted, span.clone(), config.lags.max_lag())
            .map_err(|e| Error::stage("correct", e))?;
        let (model, _) = adaptive_run(dataset, ranges, &design.values, span.start, config)?;
        Ok(Self::assemble(corrector, &sorted, span.end, model, config))
    }

    fn assemble(
        corrector: Option<Corrector>,
        sorted: &EnsembleMatrix,
        end: usize,
        model: AdaptiveQuantiles,
        config: &PipelineConfig,
    ) -> Self {
        let start = end.saturating_sub(config.lags.max_lag());
        Self {
            format: STATE_FORMAT.into(),
            version: STATE_VERSION,
            corrector,
            lags: config.lags.clone(),
            history_timestamps: sorted.timestamps[start..end].to_vec(),
            history: sorted.members.slice(s![start..end, ..]).to_owned(),
            model,
            repair: config.repair,
        }
    }
}

/// Issues forecasts for the consecutive hours of `block` (typically one
/// UTC day of raw ensemble rows). `observations` are attached to hours
/// already issued; they must arrive before the issue time that first
/// needs them.
pub fn online_step(
    state: &mut PipelineState,
    block: &EnsembleMatrix,
    observations: &[(DateTime<Utc>, f64)],
) -> Result<OnlineOutput> {
    if block.is_empty() {
        return Err(Error::Shape("empty forecast block".into()));
    }
    if let Some(&last) = state.history_timestamps.last() {
        let expected = last + Duration::hours(1);
        if block.timestamps[0] != expected {
            return Err(Error::OutOfOrder {
                expected,
                got: block.timestamps[0],
            });
        }
    }
    if block.width() != state.history.ncols() && state.history.nrows() > 0 {
        return Err(Error::Shape(format!(
            "{} members, state holds {}",
            block.width(),
            state.history.ncols()
        )));
    }
    let mut unmatched = 0;
    for &(ts, y) in observations {
        if !y.is_finite() || !state.model.observe(ts, y) {
            unmatched += 1;
        }
    }
    if unmatched > 0 {
        log::warn!("{unmatched} observations matched no pending hour");
    }
    let sorted_block = sort_rows(block);
    let h = state.history.nrows();
    let stacked = EnsembleMatrix::new(
        state.history_timestamps.iter().chain(&block.timestamps).copied().collect(),
        concatenate(Axis(0), &[state.history.view(), sorted_block.members.view()])
            .map_err(|e| Error::Shape(e.to_string()))?,
    )?;
    let design = design_matrix(state.corrector.as_ref(), &stacked, h..stacked.len(), state.lags.max_lag())?;
    let rows: Vec<_> = block
        .timestamps
        .iter()
        .zip(design.values.rows())
        .map(|(ts, x)| (*ts, x.to_vec(), None))
        .collect();
    let values = state.model.forecast(&rows)?;
    let mut forecast = QuantileForecast::new(block.timestamps.clone(), state.model.levels().clone(), values)?;
    let crossing_rate = forecast.crossing_rate();
    if state.repair {
        repair_crossings(&mut forecast);
    }
    let keep = state.lags.max_lag().min(stacked.len());
    let from = stacked.len() - keep;
    state.history_timestamps = stacked.timestamps[from..].to_vec();
    state.history = stacked.members.slice(s![from.., ..]).to_owned();
    Ok(OnlineOutput {
        forecast,
        crossing_rate,
        unmatched,
    })
}

/// Sorts every row across levels and records which rows changed.
pub fn repair_crossings(forecast: &mut QuantileForecast) {
    let mut changed = vec![false; forecast.len()];
    for (t, mut row) in forecast.values.rows_mut().into_iter().enumerate() {
        let mut v = row.to_vec();
        v.sort_by(f64::total_cmp);
        if row.iter().zip(&v).any(|(a, b)| a.to_bits() != b.to_bits()) {
            changed[t] = true;
            row.iter_mut().zip(&v).for_each(|(d, s)| *d = *s);
        }
    }
    if !forecast.crossing_repaired {
        forecast.repaired_rows = changed;
    } else {
        for (r, c) in forecast.repaired_rows.iter_mut().zip(changed) {
            *r |= c;
        }
    }
    forecast.crossing_repaired = true;
}

/// Fraction of rows changed by repair.
pub fn repair_rate(forecast: &QuantileForecast) -> f64 {
    if forecast.is_empty() {
        return 0.0;
    }
    forecast.repaired_rows.iter().filter(|r| **r).count() as f64 / forecast.len() as f64
}

/// Regression design `[1, basis]` for rows `range` of `sorted`.
struct Design {
    values: Array2<f64>,
    /// Fraction of corrected rows that needed sorting.
    crossing_rate: Option<f64>,
}

fn design_matrix(
    corrector: Option<&Corrector>,
    sorted: &EnsembleMatrix,
    range: std::ops::Range<usize>,
    max_lag: usize,
) -> Result<Design> {
    let (basis, crossing_rate) = match corrector {
        Some(c) => {
            if range.start < max_lag {
                return Err(Error::InsufficientData {
                    required: max_lag,
                    available: range.start,
                });
            }
            let mut v = c.correct_rows(&sorted.timestamps, sorted.members.view(), range)?;
            let rate = sort_in_place(&mut v);
            (v, Some(rate))
        }
        None => (sorted.members.slice(s![range, ..]).to_owned(), None),
    };
    Ok(Design {
        values: with_intercept(basis.view()),
        crossing_rate,
    })
}

fn with_intercept(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::ones((x.nrows(), x.ncols() + 1));
    out.slice_mut(s![.., 1..]).assign(&x);
    out
}

/// Seeds the adaptive fit on the seed role and forecasts every later row
/// of `design`, which starts at dataset row `offset`. Returns the model
/// and the forecasts from the window-fill role onwards.
fn adaptive_run(
    dataset: &RawDataset,
    ranges: &SplitRanges,
    design: &Array2<f64>,
    offset: usize,
    config: &PipelineConfig,
) -> Result<(AdaptiveQuantiles, Array2<f64>)> {
    let obs = &dataset.observations;
    let seed: Vec<usize> = ranges.taqr_init_params.clone().filter(|&i| obs.valid[i]).collect();
    let k = design.ncols();
    if seed.len() <= k {
        return Err(Error::stage(
            "taqr",
            Error::InsufficientData {
                required: k + 1,
                available: seed.len(),
            },
        ));
    }
    let local: Vec<usize> = seed.iter().map(|i| i - offset).collect();
    let x0 = design.select(Axis(0), &local);
    let y0: Vec<f64> = seed.iter().map(|&i| obs.values[i]).collect();
    let mut model = AdaptiveQuantiles::warm_start(x0.view(), &y0, &config.levels, config.window, config.horizon)
        .map_err(|e| Error::stage("taqr", e))?;
    let from = ranges.taqr_init_window.start;
    let rows: Vec<_> = (from..offset + design.nrows())
        .map(|i| {
            (
                obs.timestamps[i],
                design.row(i - offset).to_vec(),
                obs.valid[i].then_some(obs.values[i]),
            )
        })
        .collect();
    let values = model.forecast(&rows).map_err(|e| Error::stage("taqr", e))?;
    Ok((model, values))
}

/// Where run artifacts go and whether a saved corrector may be reused.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub artifacts: Option<PathBuf>,
    pub resume: bool,
}

/// Output of [`run_nabqr`].
#[derive(Debug, Clone)]
pub struct PipelineRun {
    /// Published NABQR forecast over the test role.
    pub forecast: QuantileForecast,
    /// Other quantile forecasts over the test role.
    pub comparisons: Vec<(Method, QuantileForecast)>,
    /// Sorted corrected members over the test role.
    pub corrected: Option<Array2<f64>>,
    pub reports: ReportBundle,
    /// State after the last test hour, ready for [`online_step`].
    pub state: PipelineState,
}

const CORRECTOR_FILE: &str = "corrector.json";

/// Runs the full pipeline on a cleaned dataset with the given split.
pub fn run_nabqr(dataset: &RawDataset, ranges: &SplitRanges, config: &PipelineConfig, options: &RunOptions) -> Result<PipelineRun> {
    config.validate()?;
    if ranges.end() > dataset.len() {
        return Err(Error::InsufficientData {
            required: ranges.end(),
            available: dataset.len(),
        });
    }
    if ranges.taqr_init_params.len() != config.taqr_init {
        return Err(Error::Config(format!(
            "split seeds the adaptive fit with {} rows, config expects {}",
            ranges.taqr_init_params.len(),
            config.taqr_init
        )));
    }
    if let Some(dir) = &options.artifacts {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let sorted = sort_rows(&dataset.ensembles);
    let test = ranges.test.clone();
    let span = ranges.taqr_init_params.start..test.end;

    // corrector
    let corrector = if config.correction {
        Some(train_or_resume(dataset, ranges, config, options).map_err(|e| Error::stage("train", e))?)
    } else {
        None
    };

    // adaptive fit on the corrected basis
    let (design, retrained) = nabqr_design(dataset, &sorted, ranges, config, corrector.clone())
        .map_err(|e| Error::stage("correct", e))?;
    let (model, values) = adaptive_run(dataset, ranges, &design.values, span.start, config)?;
    let skip = test.start - ranges.taqr_init_window.start;
    let ts_test = dataset.timestamps()[test.clone()].to_vec();
    let mut forecast = QuantileForecast::new(
        ts_test.clone(),
        config.levels.clone(),
        values.slice(s![skip.., ..]).to_owned(),
    )?;
    let nabqr_crossing_rate = forecast.crossing_rate();
    if config.repair {
        repair_crossings(&mut forecast);
    }
    let final_corrector = retrained.or(corrector);
    let state = PipelineState::assemble(final_corrector, &sorted, test.end, model, config);
    let corrected = design
        .crossing_rate
        .map(|_| design.values.slice(s![test.start - span.start.., 1..]).to_owned());

    // comparisons
    let mut comparisons = Vec::new();
    if config.comparisons.taqr_raw {
        let raw = design_matrix(None, &sorted, span.clone(), 0)?;
        let (_, v) = adaptive_run(dataset, ranges, &raw.values, span.start, config)
            .map_err(|e| Error::stage("taqr_raw", e))?;
        let mut fc = QuantileForecast::new(ts_test.clone(), config.levels.clone(), v.slice(s![skip.., ..]).to_owned())?;
        if config.repair {
            repair_crossings(&mut fc);
        }
        comparisons.push((Method::Taqr, fc));
    }
    if config.comparisons.qrf.is_some() || config.comparisons.qgb.is_some() {
        let train_rows: Vec<usize> = (0..test.start).filter(|&i| dataset.observations.valid[i]).collect();
        let x_train = sorted.members.select(Axis(0), &train_rows);
        let y_train: Vec<f64> = train_rows.iter().map(|&i| dataset.observations.values[i]).collect();
        let x_test = sorted.members.slice(s![test.clone(), ..]);
        if let Some(fc) = &config.comparisons.qrf {
            let cfg = ForestConfig {
                seed: config.seed.wrapping_add(1),
                ..*fc
            };
            let model = qrf_fit(x_train.view(), &y_train, &cfg).map_err(|e| Error::stage("qrf", e))?;
            let v = qrf_predict_rows(&model, x_test, &config.levels).map_err(|e| Error::stage("qrf", e))?;
            comparisons.push((Method::Qrf, QuantileForecast::new(ts_test.clone(), config.levels.clone(), v)?));
        }
        if let Some(bc) = &config.comparisons.qgb {
            let models = qgb_fit_levels(x_train.view(), &y_train, &config.levels, bc).map_err(|e| Error::stage("qgb", e))?;
            let v = qgb_predict_rows(&models, x_test).map_err(|e| Error::stage("qgb", e))?;
            let mut fc = QuantileForecast::new(ts_test.clone(), config.levels.clone(), v)?;
            if config.repair {
                repair_crossings(&mut fc);
            }
            comparisons.push((Method::Qgb, fc));
        }
    }

    // scores
    let obs = &dataset.observations;
    let y = &obs.values[test.clone()];
    let mask = &obs.valid[test.clone()];
    let score = |e| Error::stage("score", e);
    let mut reports = vec![MethodReport {
        method: Method::Raw,
        report: ScoreReport::for_ensemble(y, sorted.members.slice(s![test.clone(), ..]), Some(mask)).map_err(score)?,
    }];
    if let (Some(c), Some(v)) = (&state.corrector, &corrected) {
        reports.push(MethodReport {
            method: Method::Qrnn,
            report: ScoreReport::compute(y, v.view(), &c.levels, Some(mask), PointRule::MemberMedian).map_err(score)?,
        });
    }
    for (m, fc) in &comparisons {
        reports.push(MethodReport {
            method: *m,
            report: ScoreReport::for_forecast(y, fc, Some(mask)).map_err(score)?,
        });
    }
    reports.push(MethodReport {
        method: Method::Nabqr,
        report: ScoreReport::for_forecast(y, &forecast, Some(mask)).map_err(score)?,
    });
    let raw = reports[0].report.clone();
    let relative = reports[1..]
        .iter()
        .map(|r| {
            Ok(RelativeRow {
                method: r.method,
                mae: relative_score(r.report.mae, raw.mae)?,
                qs: relative_score(r.report.qs_mean, raw.qs_mean)?,
                crps: relative_score(r.report.crps, raw.crps)?,
            })
        })
        .collect::<Result<Vec<_>>>()
        .map_err(score)?;
    let bundle = ReportBundle {
        area: dataset.area.clone(),
        test_start: ts_test[0],
        test_end: *ts_test.last().expect("nonempty test role"),
        reports,
        relative,
        nabqr_crossing_rate,
        corrector_crossing_rate: design.crossing_rate,
        cleaning: None,
    };

    let run = PipelineRun {
        forecast,
        comparisons,
        corrected,
        reports: bundle,
        state,
    };
    if let Some(dir) = &options.artifacts {
        write_artifacts(dir, &run, config).map_err(|e| Error::stage("artifacts", e))?;
    }
    Ok(run)
}

fn train_or_resume(dataset: &RawDataset, ranges: &SplitRanges, config: &PipelineConfig, options: &RunOptions) -> Result<Corrector> {
    let saved = options.artifacts.as_ref().map(|d| d.join(CORRECTOR_FILE));
    if options.resume {
        if let Some(path) = saved.as_ref().filter(|p| p.exists()) {
            log::info!("reusing corrector {}", path.display());
            return Corrector::load(path);
        }
    }
    let c = Corrector::train(
        &dataset.ensembles,
        &dataset.observations,
        ranges.nn_train.clone(),
        &config.lags,
        &config.train_config(),
    )?;
    if let Some(path) = saved {
        c.save(&path)?;
    }
    Ok(c)
}

/// Design over the seed, window-fill and test roles. With periodic
/// retraining, each block of test days uses a corrector fitted on the
/// `nn_train`-long stretch right before it. Returns the last retrained
/// corrector, if any.
fn nabqr_design(
    dataset: &RawDataset,
    sorted: &EnsembleMatrix,
    ranges: &SplitRanges,
    config: &PipelineConfig,
    corrector: Option<Corrector>,
) -> Result<(Design, Option<Corrector>)> {
    let span = ranges.taqr_init_params.start..ranges.test.end;
    let max_lag = config.lags.max_lag();
    let (Some(base), Some(days)) = (corrector.as_ref(), config.retrain_every_days) else {
        return Ok((design_matrix(corrector.as_ref(), sorted, span, max_lag)?, None));
    };
    let mut first = design_matrix(Some(base), sorted, span.start..ranges.test.start, max_lag)?;
    let mut blocks = vec![first.values.view().to_owned()];
    let mut crossed = first.crossing_rate.unwrap_or(0.0) * first.values.nrows() as f64;
    let mut latest = None;
    let mut start = ranges.test.start;
    while start < ranges.test.end {
        let end = (start + 24 * days).min(ranges.test.end);
        let c = if start == ranges.test.start {
            base.clone()
        } else {
            let from = start.saturating_sub(ranges.nn_train.len());
            let c = Corrector::train(
                &dataset.ensembles,
                &dataset.observations,
                from..start,
                &config.lags,
                &config.train_config(),
            )?;
            latest = Some(c.clone());
            c
        };
        let d = design_matrix(Some(&c), sorted, start..end, max_lag)?;
        crossed += d.crossing_rate.unwrap_or(0.0) * d.values.nrows() as f64;
        blocks.push(d.values);
        start = end;
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    first.values = concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
    first.crossing_rate = Some(crossed / first.values.nrows() as f64);
    Ok((first, latest))
}

fn write_artifacts(dir: &Path, run: &PipelineRun, config: &PipelineConfig) -> Result<()> {
    let create = |name: &str| {
        let p = dir.join(name);
        std::fs::File::create(&p)
            .map(std::io::BufWriter::new)
            .map_err(|e| Error::io(p, e))
    };
    write_forecast_csv(&run.forecast, config.horizon, create("forecast_nabqr.csv")?)?;
    for (m, fc) in &run.comparisons {
        write_forecast_csv(fc, config.horizon, create(&format!("forecast_{}.csv", m.name()))?)?;
    }
    run.reports.write_scores_csv(create("scores.csv")?)?;
    let path = dir.join("report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&run.reports)?).map_err(|e| Error::io(path, e))?;
    run.state.save(&dir.join("state.json"))
}
