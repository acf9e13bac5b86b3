use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "nabqr", version, about = "Neural-corrected ensembles and adaptive quantile regression for wind power")]
pub struct Cli {
    /// Log more (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic wind-farm dataset.
    Simulate(SimulateArgs),
    /// Apply the curtailment and glitch filters.
    Clean(CleanArgs),
    /// Train the ensemble corrector on the training role.
    Train(TrainArgs),
    /// Run the full pipeline and write forecasts and score reports.
    Run(RunArgs),
    /// Score a forecast table against observations.
    Score(ScoreArgs),
    /// Backtest the spot-versus-imbalance strategy.
    Backtest(BacktestArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Generator seed [default: 1].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of hourly rows [default: 12000].
    #[arg(long)]
    pub hours: Option<usize>,
    /// Installed capacity in MW [default: 1000].
    #[arg(long)]
    pub capacity: Option<f64>,
    /// Output dataset CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON config file; flags override its `simulation` section.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CleanArgs {
    /// Input dataset CSV.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// JSON config file (flags override it).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Cleaned dataset CSV (removed hours get valid = 0).
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub pipeline: PipelineFlags,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Input dataset CSV.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// JSON config file (flags override it).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output corrector checkpoint (JSON).
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub pipeline: PipelineFlags,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Input dataset CSV.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// JSON config file (flags override it).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory for forecasts, scores, state and the run manifest.
    #[arg(long)]
    pub outdir: PathBuf,
    /// Use this corrector checkpoint instead of training one.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Reuse the corrector already saved in the output directory.
    #[arg(long)]
    pub resume: bool,
    #[command(flatten)]
    pub pipeline: PipelineFlags,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Forecast CSV (timestamp, level, value[, issue_time]).
    #[arg(long)]
    pub forecast: PathBuf,
    /// CSV with timestamp and actual columns (a dataset file works).
    #[arg(long)]
    pub actuals: PathBuf,
    /// Comma-separated levels to score; all levels in the forecast when omitted.
    #[arg(long, value_delimiter = ',')]
    pub levels: Option<Vec<f64>>,
    /// Directory for score.json and scores.csv; stdout only when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OffsetModeArg {
    Scalar,
    HourOfDay,
}

#[derive(Debug, Args)]
pub struct BacktestArgs {
    /// Forecast CSV whose 0.5 level is the predicted median.
    #[arg(long)]
    pub forecast: PathBuf,
    /// Dataset CSV with the raw ensembles and actuals.
    #[arg(long)]
    pub raw: PathBuf,
    /// CSV with timestamp, spot and imbalance columns.
    #[arg(long)]
    pub prices: PathBuf,
    /// Traded volume per hour (MWh).
    #[arg(long, default_value_t = 1.0)]
    pub size: f64,
    /// Leading forecast hours used to estimate the offset; trading starts after them.
    #[arg(long, default_value_t = 720)]
    pub offset_hours: usize,
    /// Offset form.
    #[arg(long, value_enum, default_value_t = OffsetModeArg::Scalar)]
    pub offset_mode: OffsetModeArg,
    /// Skip hours whose |signal| (MW) is below this.
    #[arg(long)]
    pub dead_band: Option<f64>,
    /// Ledger CSV (hour, direction, spot, imbalance, pnl, cum_pnl).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HorizonArg {
    DayAhead,
    Rolling,
}

/// Pipeline settings; each flag overrides the config file.
#[derive(Debug, Default, Args)]
pub struct PipelineFlags {
    /// Master seed [default: 42].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Countertrade flank level in MW [default: 1700].
    #[arg(long)]
    pub countertrade_high: Option<f64>,
    /// Countertrade low-run level in MW [default: 25].
    #[arg(long)]
    pub countertrade_low: Option<f64>,
    /// Disable both cleaning filters.
    #[arg(long)]
    pub no_cleaning: bool,
    /// Rows seeding the adaptive fit [default: 192].
    #[arg(long)]
    pub taqr_init: Option<usize>,
    /// Sliding-window length of the adaptive fit [default: 5000].
    #[arg(long)]
    pub window: Option<usize>,
    /// Forecast levels [default: 13 levels 0.05,0.1,0.15,0.25,0.35,0.45,0.5,0.55,0.65,0.75,0.85,0.9,0.95].
    #[arg(long, value_delimiter = ',')]
    pub levels: Option<Vec<f64>>,
    /// Corrector lags in hours [default: 1,2,3,6,12,24,48].
    #[arg(long, value_delimiter = ',')]
    pub lags: Option<Vec<usize>>,
    /// Forecast horizon [default: day-ahead].
    #[arg(long, value_enum)]
    pub horizon: Option<HorizonArg>,
    /// Day-ahead issue hour (UTC) on the previous day [default: 12].
    #[arg(long)]
    pub issue_hour: Option<u32>,
    /// Publish forecasts without crossing repair.
    #[arg(long)]
    pub no_repair: bool,
    /// Feed the raw sorted members to the adaptive fit instead of corrected ones.
    #[arg(long)]
    pub no_correction: bool,
    /// Corrector training epochs [default: 20].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Corrector learning rate [default: 0.5].
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// LSTM units [default: 256].
    #[arg(long)]
    pub units: Option<usize>,
    /// Explicit split as four hour counts: train,seed,window,test [default: fitted to the data, 14040,192,4944,5112 at 24288 hours].
    #[arg(long, value_delimiter = ',')]
    pub split: Option<Vec<usize>>,
    /// Skip the forest and boosting baselines.
    #[arg(long)]
    pub no_baselines: bool,
    /// Skip adaptive regression on the raw members.
    #[arg(long)]
    pub no_taqr_raw: bool,
}
