//! Ensemble correction with an LSTM trained under a multi-quantile loss.
//!
//! For each hour `t` the network reads the sorted raw ensemble at the
//! lagged hours `t - lag` (oldest first) and emits a nondecreasing vector
//! of corrected members, one per target level.

mod lstm;
mod train;

use std::ops::Range;
use std::path::Path;

use chrono::{DateTime, Utc};
use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantile::{empirical_quantile, sort_rows, EnsembleMatrix, ObservationSeries, QuantileLevels};

pub use lstm::{batch_loss, loss_and_gradient, lstm_cell, model_forward, LstmParams, TENSOR_NAMES};
pub use train::EpochRecord;

/// Width of the corrected ensemble.
pub const CORRECTED_WIDTH: usize = 20;
/// Hidden units of the recurrent layer.
pub const DEFAULT_UNITS: usize = 256;

/// Positive hour offsets read by the network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct LagSpec(Vec<usize>);

impl LagSpec {
    pub fn new(mut lags: Vec<usize>) -> Result<Self> {
        if lags.is_empty() || lags.contains(&0) {
            return Err(Error::Config("lags must be a nonempty set of positive offsets".into()));
        }
        lags.sort_unstable();
        lags.dedup();
        Ok(Self(lags))
    }

    pub fn lags(&self) -> &[usize] {
        &self.0
    }

    pub fn max_lag(&self) -> usize {
        *self.0.last().expect("nonempty")
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Row offsets in network order: deepest lag first.
    fn steps(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().rev().copied()
    }
}

impl Default for LagSpec {
    fn default() -> Self {
        Self(vec![1, 2, 3, 6, 12, 24, 48])
    }
}

impl TryFrom<Vec<usize>> for LagSpec {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LagSpec> for Vec<usize> {
    fn from(l: LagSpec) -> Self {
        l.0
    }
}

/// What each output is trained against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Every output against the observation, under its own level.
    #[default]
    Observation,
    /// Output `i` against the `q_i` quantile of the raw members together
    /// with the observation.
    AugmentedQuantile,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Loss levels; their count is the output width.
    pub levels: QuantileLevels,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Trailing fraction of the samples held out for validation loss.
    pub validation_fraction: f64,
    pub target_mode: TargetMode,
    pub optimizer: Optimizer,
    /// Global gradient-norm clip; zero disables clipping.
    pub clip_norm: f64,
    pub units: usize,
    pub dense_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            levels: QuantileLevels::equidistant(CORRECTED_WIDTH, 0.05, 0.95).expect("valid levels"),
            epochs: 20,
            batch_size: 64,
            learning_rate: 0.5,
            seed: 42,
            validation_fraction: 0.1,
            target_mode: TargetMode::Observation,
            optimizer: Optimizer::Sgd,
            clip_norm: 1.0,
            units: DEFAULT_UNITS,
            dense_width: CORRECTED_WIDTH,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation fraction {} outside [0, 1)",
                self.validation_fraction
            )));
        }
        if self.units == 0 || self.dense_width == 0 {
            return Err(Error::Config("network widths must be positive".into()));
        }
        Ok(())
    }
}

/// Mean pinball loss over levels for one sample.
pub fn quantile_loss(y_target: &[f64], y_hat: &[f64], levels: &QuantileLevels) -> Result<f64> {
    if y_target.len() != levels.len() || y_hat.len() != levels.len() {
        return Err(Error::Shape(format!(
            "{} targets, {} outputs, {} levels",
            y_target.len(),
            y_hat.len(),
            levels.len()
        )));
    }
    let sum: f64 = y_target
        .iter()
        .zip(y_hat)
        .zip(levels.iter())
        .map(|((t, h), tau)| crate::quantile::pinball(t - h, tau))
        .sum();
    Ok(sum / levels.len() as f64)
}

/// Network inputs and targets for a set of hours.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    /// N x L x F standardized lag windows.
    pub inputs: Array3<f64>,
    /// N x Q scaled targets.
    pub targets: Array2<f64>,
    /// Row index of each sample in the source series.
    pub index: Vec<usize>,
}

/// Per-feature affine map applied to sorted members before the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    fn fit(members: ArrayView2<f64>) -> Self {
        let n = members.nrows() as f64;
        let mean: Vec<f64> = members.mean_axis(Axis(0)).expect("nonempty").to_vec();
        let scale = members
            .columns()
            .into_iter()
            .zip(&mean)
            .map(|(c, m)| {
                let sd = (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    /// Standardized lag window for row `t` of `sorted` (L x F).
    fn window(&self, sorted: ArrayView2<f64>, t: usize, lags: &LagSpec) -> Array2<f64> {
        let f = sorted.ncols();
        let mut w = Array2::zeros((lags.len(), f));
        for (i, lag) in lags.steps().enumerate() {
            let src = sorted.row(t - lag);
            for j in 0..f {
                w[[i, j]] = (src[j] - self.mean[j]) / self.scale[j];
            }
        }
        w
    }

    fn windows(&self, sorted: ArrayView2<f64>, rows: &[usize], lags: &LagSpec) -> Array3<f64> {
        let mut out = Array3::zeros((rows.len(), lags.len(), sorted.ncols()));
        for (n, &t) in rows.iter().enumerate() {
            out.index_axis_mut(Axis(0), n).assign(&self.window(sorted, t, lags));
        }
        out
    }
}

/// Outcome of applying a corrector to an ensemble series.
#[derive(Debug, Clone)]
pub struct Correction {
    /// Corrected members from the first hour with full lag history.
    pub ensembles: EnsembleMatrix,
    /// Row offset of `ensembles` in the input series.
    pub offset: usize,
    /// Fraction of rows that needed sorting.
    pub crossing_rate: f64,
    /// Output columns that were identically zero.
    pub zero_columns: Vec<usize>,
}

/// Summary of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub n_train: usize,
    pub n_validation: usize,
    pub history: Vec<EpochRecord>,
}

const CHECKPOINT_FORMAT: &str = "nabqr-corrector";
const CHECKPOINT_VERSION: u32 = 1;

/// A trained network together with everything needed to apply it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corrector {
    format: String,
    version: u32,
    pub params: LstmParams,
    pub lags: LagSpec,
    pub levels: QuantileLevels,
    pub standardizer: Standardizer,
    /// Targets are divided by this before training; outputs are multiplied back.
    pub target_scale: f64,
    pub target_mode: TargetMode,
    pub seed: u64,
    pub report: TrainReport,
}

fn sorted_members(ensembles: &EnsembleMatrix) -> EnsembleMatrix {
    if ensembles.sorted {
        ensembles.clone()
    } else {
        sort_rows(ensembles)
    }
}

/// Builds network samples for rows `rows` (each must have full lag history).
pub fn build_training_set(
    sorted: ArrayView2<f64>,
    y: &[f64],
    rows: &[usize],
    lags: &LagSpec,
    standardizer: &Standardizer,
    levels: &QuantileLevels,
    mode: TargetMode,
    target_scale: f64,
) -> Result<TrainingSet> {
    if let Some(&t) = rows.iter().find(|&&t| t < lags.max_lag() || t >= sorted.nrows()) {
        return Err(Error::Domain(format!("row {t} lacks lag history")));
    }
    let inputs = standardizer.windows(sorted, rows, lags);
    let mut targets = Array2::zeros((rows.len(), levels.len()));
    for (n, &t) in rows.iter().enumerate() {
        match mode {
            TargetMode::Observation => targets.row_mut(n).fill(y[t] / target_scale),
            TargetMode::AugmentedQuantile => {
                let mut aug = sorted.row(t).to_vec();
                aug.push(y[t]);
                for (j, tau) in levels.iter().enumerate() {
                    targets[[n, j]] = empirical_quantile(&aug, tau)? / target_scale;
                }
            }
        }
    }
    Ok(TrainingSet {
        inputs,
        targets,
        index: rows.to_vec(),
    })
}

impl Corrector {
    /// Trains on the hours in `range` that are valid and have full lag
    /// history. Standardization and target scale come from `range` only.
    pub fn train(
        ensembles: &EnsembleMatrix,
        observations: &ObservationSeries,
        range: Range<usize>,
        lags: &LagSpec,
        config: &TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if ensembles.len() != observations.len() || range.end > ensembles.len() {
            return Err(Error::Shape("training range exceeds the series".into()));
        }
        let sorted = sorted_members(ensembles);
        let members = sorted.members.view();
        let rows: Vec<usize> = range
            .clone()
            .filter(|&t| t >= lags.max_lag() && observations.valid[t])
            .collect();
        let n_val = (rows.len() as f64 * config.validation_fraction).floor() as usize;
        if rows.len() - n_val < 1 {
            return Err(Error::InsufficientData {
                required: lags.max_lag() + 2,
                available: range.len(),
            });
        }
        let standardizer = Standardizer::fit(members.slice(s![range.clone(), ..]));
        let target_scale = rows
            .iter()
            .map(|&t| observations.values[t].abs())
            .fold(0.0, f64::max);
        let target_scale = if target_scale > 0.0 { target_scale } else { 1.0 };
        let set = build_training_set(
            members,
            &observations.values,
            &rows,
            lags,
            &standardizer,
            &config.levels,
            config.target_mode,
            target_scale,
        )?;
        let n_train = rows.len() - n_val;
        let train_x = set.inputs.slice(s![..n_train, .., ..]).to_owned();
        let train_y = set.targets.slice(s![..n_train, ..]).to_owned();
        let val_x = set.inputs.slice(s![n_train.., .., ..]).to_owned();
        let val_y = set.targets.slice(s![n_train.., ..]).to_owned();
        let val = (n_val > 0).then_some((&val_x, &val_y));

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut init = LstmParams::init(
            members.ncols(),
            config.units,
            config.dense_width,
            config.levels.len(),
            &mut rng,
        );
        center_output_bias(&mut init, &train_y, &config.levels)?;
        let (params, initial_loss, history) = train::fit(init, &train_x, &train_y, val, config, &mut rng)?;
        let final_loss = history
            .iter()
            .map(|h| h.train_loss)
            .fold(initial_loss, f64::min);
        Ok(Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            params,
            lags: lags.clone(),
            levels: config.levels.clone(),
            standardizer,
            target_scale,
            target_mode: config.target_mode,
            seed: config.seed,
            report: TrainReport {
                initial_loss,
                final_loss,
                n_train,
                n_validation: n_val,
                history,
            },
        })
    }

    pub fn width(&self) -> usize {
        self.params.outputs()
    }

    /// Corrected members for rows `range` of `sorted` (which must have
    /// lag history), computed one UTC day at a time. Rows are returned
    /// before sorting.
    pub fn correct_rows(
        &self,
        timestamps: &[DateTime<Utc>],
        sorted: ArrayView2<f64>,
        range: Range<usize>,
    ) -> Result<Array2<f64>> {
        if sorted.ncols() != self.params.features() {
            return Err(Error::Shape(format!(
                "{} ensemble members, corrector expects {}",
                sorted.ncols(),
                self.params.features()
            )));
        }
        if range.start < self.lags.max_lag() || range.end > sorted.nrows() {
            return Err(Error::InsufficientData {
                required: self.lags.max_lag() + range.len(),
                available: sorted.nrows(),
            });
        }
        let mut out = Array2::zeros((range.len(), self.width()));
        for chunk in day_chunks(timestamps, range.clone()) {
            let rows: Vec<usize> = chunk.clone().collect();
            let x = self.standardizer.windows(sorted, &rows, &self.lags);
            let tape = lstm::forward_batch(&self.params, x.view());
            out.slice_mut(s![chunk.start - range.start..chunk.end - range.start, ..])
                .assign(&(tape.out * self.target_scale));
        }
        Ok(out)
    }

    /// Corrects every hour that has full lag history. Output rows are sorted.
    pub fn correct(&self, ensembles: &EnsembleMatrix) -> Result<Correction> {
        let sorted = sorted_members(ensembles);
        let start = self.lags.max_lag();
        if ensembles.len() <= start {
            return Err(Error::InsufficientData {
                required: start + 1,
                available: ensembles.len(),
            });
        }
        let mut values = self.correct_rows(&ensembles.timestamps, sorted.members.view(), start..ensembles.len())?;
        let crossing_rate = sort_in_place(&mut values);
        let zero_columns: Vec<usize> = (0..values.ncols())
            .filter(|&j| values.column(j).iter().all(|&v| v == 0.0))
            .collect();
        if !zero_columns.is_empty() {
            log::warn!("corrected columns {zero_columns:?} are identically zero");
        }
        let corrected = EnsembleMatrix::new(ensembles.timestamps[start..].to_vec(), values)?;
        Ok(Correction {
            ensembles: corrected,
            offset: start,
            crossing_rate,
            zero_columns,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                c.format, c.version
            )));
        }
        c.params.validate()?;
        if c.params.outputs() != c.levels.len() || c.standardizer.mean.len() != c.params.features() {
            return Err(Error::Shape("checkpoint metadata disagrees with tensors".into()));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Starts every output near its level's quantile of the training targets
/// (taking the sigmoid layer at its midpoint), so no rectifier begins dead.
fn center_output_bias(params: &mut LstmParams, targets: &Array2<f64>, levels: &QuantileLevels) -> Result<()> {
    for (j, tau) in levels.iter().enumerate() {
        let col = targets.column(j).to_vec();
        let q = empirical_quantile(&col, tau)?;
        params.b2[j] = q - 0.5 * params.w2.column(j).sum();
    }
    Ok(())
}

/// Sorts each row; returns the fraction of rows that changed.
pub(crate) fn sort_in_place(values: &mut Array2<f64>) -> f64 {
    if values.nrows() == 0 {
        return 0.0;
    }
    let mut changed = 0usize;
    for mut row in values.rows_mut() {
        let mut v = row.to_vec();
        if v.windows(2).any(|w| w[0] > w[1]) {
            changed += 1;
            v.sort_by(f64::total_cmp);
            row.iter_mut().zip(v).for_each(|(d, s)| *d = s);
        }
    }
    changed as f64 / values.nrows() as f64
}

/// Splits `range` at UTC midnights.
pub(crate) fn day_chunks(timestamps: &[DateTime<Utc>], range: Range<usize>) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = range.start;
    for t in range.start + 1..range.end {
        if timestamps[t].date_naive() != timestamps[t - 1].date_naive() {
            out.push(start..t);
            start = t;
        }
    }
    if start < range.end {
        out.push(start..range.end);
    }
    out
}

#[cfg(test)]
mod tests;
