//! Ensemble correction and adaptive quantile regression for probabilistic
//! wind power forecasting.
//!
//! The pipeline corrects a raw weather ensemble with an LSTM trained under
//! a multi-quantile loss, then feeds the corrected members into
//! time-adaptive quantile regression (TAQR) to produce calibrated quantile
//! forecasts.

pub mod baselines;
pub mod dataio;
pub mod error;
pub mod nncorrect;
pub mod pipeline;
pub mod quantile;
pub mod scoring;
pub mod taqr;
pub mod trading;

pub use error::{Error, ErrorKind, Result};
pub use quantile::{EnsembleMatrix, ObservationSeries, QuantileLevels};
pub use scoring::{QuantileForecast, ScoreReport};
