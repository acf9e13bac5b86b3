//! Versioned JSON config file and flag overrides.

use std::path::Path;

use nabqr_core::dataio::{CountertradeFilter, SimConfig, SplitSpec};
use nabqr_core::nncorrect::LagSpec;
use nabqr_core::pipeline::PipelineConfig;
use nabqr_core::taqr::Horizon;
use nabqr_core::{Error, QuantileLevels, Result};
use serde::{Deserialize, Serialize};

use crate::args::{HorizonArg, PipelineFlags};

pub const SCHEMA: &str = "nabqr-config";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub schema: String,
    pub version: u32,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub simulation: SimConfig,
}

impl Default for ConfigFile {
    fn default() -> Self {
        Self {
            schema: SCHEMA.into(),
            version: VERSION,
            pipeline: PipelineConfig::default(),
            simulation: SimConfig::default(),
        }
    }
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: Self = serde_json::from_str(&text)?;
        if file.schema != SCHEMA || file.version != VERSION {
            return Err(Error::Config(format!(
                "{}: expected schema {SCHEMA} v{VERSION}, found {} v{}",
                path.display(),
                file.schema,
                file.version
            )));
        }
        Ok(file)
    }
}

/// Applies command-line overrides on top of `config`.
pub fn apply(flags: &PipelineFlags, config: &mut PipelineConfig) -> Result<()> {
    if let Some(seed) = flags.seed {
        config.seed = seed;
    }
    if flags.no_cleaning {
        config.cleaning.countertrade = None;
        config.cleaning.glitch = None;
    }
    if flags.countertrade_high.is_some() || flags.countertrade_low.is_some() {
        let ct = config.cleaning.countertrade.get_or_insert_with(CountertradeFilter::default);
        if let Some(v) = flags.countertrade_high {
            ct.high = v;
        }
        if let Some(v) = flags.countertrade_low {
            ct.low = v;
        }
    }
    if let Some(v) = flags.taqr_init {
        config.taqr_init = v;
        if let Some(s) = config.split.as_mut() {
            s.taqr_init_params = v;
        }
    }
    if let Some(v) = flags.window {
        config.window = v;
    }
    if let Some(v) = &flags.levels {
        config.levels = QuantileLevels::new(v.clone())?;
    }
    if let Some(v) = &flags.lags {
        config.lags = LagSpec::new(v.clone())?;
    }
    match (flags.horizon, flags.issue_hour) {
        (Some(HorizonArg::Rolling), Some(_)) => {
            return Err(Error::Config("--issue-hour applies to the day-ahead horizon only".into()))
        }
        (Some(HorizonArg::Rolling), None) => config.horizon = Horizon::Rolling,
        (Some(HorizonArg::DayAhead), h) => {
            config.horizon = Horizon::DayAhead {
                issue_hour: h.unwrap_or(12),
            }
        }
        (None, Some(h)) => config.horizon = Horizon::DayAhead { issue_hour: h },
        (None, None) => {}
    }
    if let Horizon::DayAhead { issue_hour } = config.horizon {
        if issue_hour > 23 {
            return Err(Error::Config(format!("issue hour {issue_hour}")));
        }
    }
    if flags.no_repair {
        config.repair = false;
    }
    if flags.no_correction {
        config.correction = false;
    }
    if let Some(v) = flags.epochs {
        config.train.epochs = v;
    }
    if let Some(v) = flags.learning_rate {
        config.train.learning_rate = v;
    }
    if let Some(v) = flags.units {
        config.train.units = v;
    }
    if let Some(v) = &flags.split {
        if v.len() != 4 {
            return Err(Error::Config(format!("--split takes four hour counts, got {}", v.len())));
        }
        config.split = Some(SplitSpec {
            nn_train: v[0],
            taqr_init_params: v[1],
            taqr_init_window: v[2],
            test: v[3],
        });
        config.taqr_init = v[1];
    }
    if flags.no_baselines {
        config.comparisons.qrf = None;
        config.comparisons.qgb = None;
    }
    if flags.no_taqr_raw {
        config.comparisons.taqr_raw = false;
    }
    config.validate()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_flags_keep_the_file() {
        let mut c = PipelineConfig::default();
        apply(&PipelineFlags::default(), &mut c).unwrap();
        assert_eq!(c, PipelineConfig::default());
    }

    #[test]
    fn flags_override() {
        let mut c = PipelineConfig::default();
        let flags = PipelineFlags {
            seed: Some(7),
            countertrade_high: Some(1500.0),
            levels: Some(vec![0.1, 0.5, 0.9]),
            horizon: Some(HorizonArg::Rolling),
            no_baselines: true,
            split: Some(vec![100, 50, 60, 70]),
            ..PipelineFlags::default()
        };
        apply(&flags, &mut c).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.cleaning.countertrade.as_ref().unwrap().high, 1500.0);
        assert_eq!(c.levels.len(), 3);
        assert_eq!(c.horizon, Horizon::Rolling);
        assert!(c.comparisons.qrf.is_none() && c.comparisons.qgb.is_none());
        assert_eq!(c.taqr_init, 50);
    }

    #[test]
    fn partial_file_fills_defaults_and_schema_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"schema":"nabqr-config","version":1,"pipeline":{"window":3000}}"#).unwrap();
        let f = ConfigFile::load(Some(&p)).unwrap();
        assert_eq!(f.pipeline.window, 3000);
        assert_eq!(f.pipeline.taqr_init, 192);
        std::fs::write(&p, r#"{"schema":"nabqr-config","version":2}"#).unwrap();
        assert!(matches!(ConfigFile::load(Some(&p)), Err(Error::Config(_))));
    }
}
