use std::collections::HashMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use nabqr_core::dataio::{self, RawDataset};
use nabqr_core::nncorrect::Corrector;
use nabqr_core::pipeline::{self, PipelineConfig, RunOptions};
use nabqr_core::quantile::median;
use nabqr_core::trading::{self, BacktestInput, OffsetMode};
use nabqr_core::{Error, QuantileForecast, QuantileLevels, Result, ScoreReport};
use serde::Serialize;

use crate::args::{BacktestArgs, CleanArgs, OffsetModeArg, PipelineFlags, RunArgs, ScoreArgs, SimulateArgs, TrainArgs};
use crate::config::{self, ConfigFile};
use crate::manifest::{self, RunManifest};
use crate::tables;

fn pipeline_config(file: Option<&Path>, flags: &PipelineFlags) -> Result<PipelineConfig> {
    let mut config = ConfigFile::load(file)?.pipeline;
    config::apply(flags, &mut config)?;
    Ok(config)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

pub fn simulate(args: &SimulateArgs) -> Result<()> {
    let mut m = RunManifest::start("simulate");
    let mut sim = ConfigFile::load(args.config.as_deref())?.simulation;
    if let Some(path) = &args.config {
        m.input(path)?;
    }
    if let Some(v) = args.seed {
        sim.seed = v;
    }
    if let Some(v) = args.hours {
        sim.hours = v;
    }
    if let Some(v) = args.capacity {
        sim.capacity = v;
    }
    let s = dataio::simulate(&sim)?;
    dataio::save_csv(&s.dataset, &args.out)?;
    log::info!("wrote {} hours to {}", s.dataset.len(), args.out.display());
    m.config(&sim)?;
    m.seed("simulation", sim.seed);
    m.artifact(&args.out)?;
    m.finish(&manifest::beside(&args.out))
}

#[derive(Serialize)]
struct CleanSummary {
    #[serde(flatten)]
    report: dataio::CleaningReport,
    removed_hours: Vec<DateTime<Utc>>,
}

pub fn clean(args: &CleanArgs) -> Result<()> {
    let mut m = RunManifest::start("clean");
    let config = pipeline_config(args.config.as_deref(), &args.pipeline)?;
    let mut data = dataio::load_csv(&args.input)?;
    m.input(&args.input)?;
    let before = data.observations.valid.clone();
    let report = dataio::clean(&mut data, &config.cleaning);
    let removed_hours = data
        .timestamps()
        .iter()
        .zip(before.iter().zip(&data.observations.valid))
        .filter(|(_, (b, a))| **b && !**a)
        .map(|(t, _)| *t)
        .collect();
    dataio::save_csv(&data, &args.out)?;
    let summary_path = with_suffix(&args.out, ".report.json");
    write_json(&summary_path, &CleanSummary { report: report.clone(), removed_hours })?;
    println!(
        "removed {} of {} hours ({} countertrade, {} glitch)",
        report.removed_total, report.hours, report.removed_countertrade, report.removed_glitch
    );
    m.config(&config.cleaning)?;
    m.artifact(&args.out)?;
    m.artifact(&summary_path)?;
    m.finish(&manifest::beside(&args.out))
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let mut m = RunManifest::start("train");
    let config = pipeline_config(args.config.as_deref(), &args.pipeline)?;
    let data = dataio::load_csv(&args.input)?;
    m.input(&args.input)?;
    let (cleaned, ranges, _) = pipeline::prepare(&data, &config)?;
    let corrector = Corrector::train(
        &cleaned.ensembles,
        &cleaned.observations,
        ranges.nn_train.clone(),
        &config.lags,
        &config.train_config(),
    )
    .map_err(|e| Error::stage("train", e))?;
    corrector.save(&args.checkpoint)?;
    let r = &corrector.report;
    println!(
        "trained on {} samples ({} validation): loss {:.5} -> {:.5}",
        r.n_train, r.n_validation, r.initial_loss, r.final_loss
    );
    m.config(&config)?;
    m.seed("corrector", config.seed);
    m.artifact(&args.checkpoint)?;
    m.finish(&manifest::beside(&args.checkpoint))
}

pub fn run(args: &RunArgs) -> Result<()> {
    let mut m = RunManifest::start("run");
    let config = pipeline_config(args.config.as_deref(), &args.pipeline)?;
    let data = dataio::load_csv(&args.input)?;
    m.input(&args.input)?;
    std::fs::create_dir_all(&args.outdir).map_err(|e| Error::io(&args.outdir, e))?;
    let mut resume = args.resume;
    if let Some(ckpt) = &args.checkpoint {
        m.input(ckpt)?;
        // validate before handing it over
        let corrector = Corrector::load(ckpt)?;
        corrector.save(&args.outdir.join("corrector.json"))?;
        resume = true;
    }
    let (cleaned, ranges, _) = pipeline::prepare(&data, &config)?;
    let options = RunOptions {
        artifacts: Some(args.outdir.clone()),
        resume,
    };
    let out = pipeline::run_nabqr(&cleaned, &ranges, &config, &options)?;
    print!("{}", out.reports.table());
    m.config(&config)?;
    m.seed("corrector", config.seed);
    if config.comparisons.qrf.is_some() {
        m.seed("forest", config.seed + 1);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(&args.outdir)
        .map_err(|e| Error::io(&args.outdir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != "manifest.json"))
        .collect();
    files.sort();
    for f in &files {
        m.artifact(f)?;
    }
    m.finish(&args.outdir.join("manifest.json"))
}

/// Observations aligned to `timestamps`, with a mask for hours that have one.
fn actuals_for(path: &Path, timestamps: &[DateTime<Utc>]) -> Result<(Vec<f64>, Vec<bool>)> {
    let table = tables::read_columns(path, &["actual"], &["valid"])?;
    let mut y = Vec::with_capacity(timestamps.len());
    let mut mask = Vec::with_capacity(timestamps.len());
    for ts in timestamps {
        let v = table.get(ts, 0);
        let valid = table.get(ts, 1);
        mask.push(v.is_finite() && valid != 0.0);
        y.push(if v.is_finite() { v } else { 0.0 });
    }
    Ok((y, mask))
}

fn select_levels(forecast: QuantileForecast, levels: &[f64]) -> Result<QuantileForecast> {
    let wanted = QuantileLevels::new(levels.to_vec())?;
    let cols = wanted
        .iter()
        .map(|tau| {
            forecast
                .levels
                .position(tau)
                .ok_or_else(|| Error::Config(format!("forecast has no level {tau}")))
        })
        .collect::<Result<Vec<usize>>>()?;
    let values = forecast.values.select(ndarray::Axis(1), &cols);
    QuantileForecast::new(forecast.timestamps, wanted, values)
}

pub fn score(args: &ScoreArgs) -> Result<()> {
    let mut m = RunManifest::start("score");
    let mut forecast = pipeline::read_forecast_csv(File::open(&args.forecast).map_err(|e| Error::io(&args.forecast, e))?)?;
    m.input(&args.forecast)?;
    if let Some(levels) = &args.levels {
        forecast = select_levels(forecast, levels)?;
    }
    let (y, mask) = actuals_for(&args.actuals, &forecast.timestamps)?;
    m.input(&args.actuals)?;
    let missing = mask.iter().filter(|v| !**v).count();
    if missing > 0 {
        log::warn!("{missing} forecast hours have no valid observation and are not scored");
    }
    let report = ScoreReport::for_forecast(&y, &forecast, Some(&mask))?;
    println!(
        "n={} MAE {:.4} CRPS {:.4} QS {:.4} max reliability deviation {:.4}",
        report.n_scored,
        report.mae,
        report.crps,
        report.qs_mean,
        report.max_reliability_deviation()
    );
    let Some(dir) = &args.out else {
        return Ok(());
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join("score.json");
    write_json(&json, &report)?;
    let csv_path = dir.join("scores.csv");
    let mut w = csv::Writer::from_writer(create(&csv_path)?);
    w.write_record(["method", "metric", "level", "value"])?;
    report.write_csv("forecast", &mut w)?;
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    m.config(&args.levels)?;
    m.artifact(&json)?;
    m.artifact(&csv_path)?;
    m.finish(&dir.join("manifest.json"))
}

#[derive(Serialize)]
struct BacktestSummary {
    offset: trading::Offset,
    offset_hours: usize,
    traded_hours: usize,
    skipped_hours: usize,
    abstained_hours: usize,
    size: f64,
    total_pnl: f64,
    mean_pnl: f64,
}

pub fn backtest(args: &BacktestArgs) -> Result<()> {
    let mut m = RunManifest::start("backtest");
    let forecast = pipeline::read_forecast_csv(File::open(&args.forecast).map_err(|e| Error::io(&args.forecast, e))?)?;
    m.input(&args.forecast)?;
    let pred = forecast
        .column(0.5)
        .ok_or_else(|| Error::Config("forecast has no 0.5 level".into()))?;
    let data = dataio::load_csv(&args.raw)?;
    m.input(&args.raw)?;
    let prices = tables::read_columns(&args.prices, &["spot", "imbalance"], &[])?;
    m.input(&args.prices)?;

    let ts = &forecast.timestamps;
    let (raw_median, actual) = raw_series(&data, ts)?;
    let spot: Vec<f64> = ts.iter().map(|t| prices.get(t, 0)).collect();
    let imbalance: Vec<f64> = ts.iter().map(|t| prices.get(t, 1)).collect();

    if ts.len() <= args.offset_hours {
        return Err(Error::InsufficientData {
            required: args.offset_hours + 1,
            available: ts.len(),
        });
    }
    let mode = match args.offset_mode {
        OffsetModeArg::Scalar => OffsetMode::Scalar,
        OffsetModeArg::HourOfDay => OffsetMode::HourOfDay,
    };
    let head: Vec<usize> = (0..args.offset_hours).collect();
    let offset = trading::compute_offset(ts, &pred, &actual, &head, mode)?;
    let k = args.offset_hours;
    let input = BacktestInput {
        timestamps: &ts[k..],
        pred_median: &pred[k..],
        raw_median: &raw_median[k..],
        spot: &spot[k..],
        imbalance: &imbalance[k..],
    };
    let ledger = trading::backtest(&input, &offset, args.size, args.dead_band)?;
    let summary = BacktestSummary {
        offset,
        offset_hours: k,
        traded_hours: ledger.trades.len(),
        skipped_hours: ledger.skipped.len(),
        abstained_hours: ledger.abstained,
        size: ledger.size,
        total_pnl: ledger.total(),
        mean_pnl: if ledger.trades.is_empty() {
            0.0
        } else {
            ledger.total() / ledger.trades.len() as f64
        },
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    let Some(out) = &args.out else {
        return Ok(());
    };
    ledger.write_csv(create(out)?)?;
    let summary_path = with_suffix(out, ".summary.json");
    write_json(&summary_path, &summary)?;
    m.config(&serde_json::json!({
        "size": args.size,
        "offset_hours": args.offset_hours,
        "offset_mode": mode,
        "dead_band": args.dead_band,
    }))?;
    m.artifact(out)?;
    m.artifact(&summary_path)?;
    m.finish(&manifest::beside(out))
}

/// Raw member median and observation at each forecast hour; NaN where the
/// dataset has no valid row.
fn raw_series(data: &RawDataset, timestamps: &[DateTime<Utc>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let index: HashMap<DateTime<Utc>, usize> = data.timestamps().iter().enumerate().map(|(i, t)| (*t, i)).collect();
    let mut raw = Vec::with_capacity(timestamps.len());
    let mut actual = Vec::with_capacity(timestamps.len());
    for ts in timestamps {
        match index.get(ts) {
            Some(&i) => {
                raw.push(median(&data.ensembles.members.row(i).to_vec())?);
                let obs = &data.observations;
                actual.push(if obs.valid[i] { obs.values[i] } else { f64::NAN });
            }
            None => {
                raw.push(f64::NAN);
                actual.push(f64::NAN);
            }
        }
    }
    Ok((raw, actual))
}
