use nabqr_core::baselines::{BoostConfig, ForestConfig};
use nabqr_core::dataio::{read_csv, simulate, write_csv, SimConfig, SplitSpec};
use nabqr_core::nncorrect::TrainConfig;
use nabqr_core::pipeline::{
    prepare, read_forecast_csv, run_nabqr, write_forecast_csv, Comparisons, Method, PipelineConfig, PipelineState,
    RunOptions,
};
use nabqr_core::QuantileLevels;

fn small_config() -> PipelineConfig {
    PipelineConfig {
        train: TrainConfig {
            levels: QuantileLevels::new(vec![0.1, 0.3, 0.5, 0.7, 0.9]).unwrap(),
            epochs: 2,
            units: 8,
            dense_width: 4,
            ..TrainConfig::default()
        },
        window: 300,
        split: Some(SplitSpec {
            nn_train: 600,
            taqr_init_params: 192,
            taqr_init_window: 200,
            test: 24 * 10,
        }),
        comparisons: Comparisons {
            taqr_raw: true,
            qrf: Some(ForestConfig {
                trees: 10,
                ..ForestConfig::default()
            }),
            qgb: Some(BoostConfig {
                stages: 5,
                ..BoostConfig::default()
            }),
        },
        ..PipelineConfig::default()
    }
}

fn dataset(seed: u64) -> nabqr_core::dataio::RawDataset {
    simulate(&SimConfig {
        hours: 1300,
        seed,
        ..SimConfig::default()
    })
    .unwrap()
    .dataset
}

#[test]
fn small_run_scores_every_method() {
    let config = small_config();
    let (d, ranges, cleaning) = prepare(&dataset(5), &config).unwrap();
    assert_eq!(cleaning.hours, d.len());
    let run = run_nabqr(&d, &ranges, &config, &RunOptions::default()).unwrap();

    assert_eq!(run.forecast.values.dim(), (ranges.test.len(), config.levels.len()));
    assert_eq!(run.forecast.timestamps, d.timestamps()[ranges.test.clone()].to_vec());
    for row in run.forecast.values.rows() {
        assert!(row.iter().all(|v| v.is_finite()));
        assert!(row.windows(2).into_iter().all(|w| w[0] <= w[1]), "crossing row {row}");
    }
    for method in [Method::Raw, Method::Taqr, Method::Qrf, Method::Qgb, Method::Nabqr] {
        let r = run.reports.get(method).unwrap_or_else(|| panic!("no report for {}", method.name()));
        assert!(r.crps.is_finite() && r.crps >= 0.0 && r.n_scored > 0);
        assert_eq!(r.reliability.len(), r.levels.len());
    }
    let rel = run.reports.relative(Method::Nabqr).unwrap();
    assert!(rel.crps > 0.0 && rel.crps.is_finite());
    assert!(run.reports.table().contains("nabqr"));
}

#[test]
fn resumed_run_reuses_the_saved_corrector() {
    let config = PipelineConfig {
        comparisons: Comparisons::none(),
        ..small_config()
    };
    let (d, ranges, _) = prepare(&dataset(6), &config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let options = RunOptions {
        artifacts: Some(dir.path().to_path_buf()),
        resume: false,
    };
    let first = run_nabqr(&d, &ranges, &config, &options).unwrap();
    let saved = std::fs::read(dir.path().join("corrector.json")).unwrap();

    // a different seed would train a different corrector unless the saved one is reused
    let reseeded = PipelineConfig { seed: 99, ..config.clone() };
    let resumed = run_nabqr(
        &d,
        &ranges,
        &reseeded,
        &RunOptions {
            resume: true,
            ..options
        },
    )
    .unwrap();
    assert_eq!(first.forecast.values, resumed.forecast.values);
    assert_eq!(saved, std::fs::read(dir.path().join("corrector.json")).unwrap());

    let state = PipelineState::load(&dir.path().join("state.json")).unwrap();
    assert_eq!(state.to_json().unwrap(), first.state.to_json().unwrap());
}

#[test]
fn dataset_and_forecast_csv_round_trip() {
    let d = dataset(7).slice(0..200);
    let mut buf = Vec::new();
    write_csv(&d, &mut buf).unwrap();
    let back = read_csv(buf.as_slice(), &d.area).unwrap();
    assert_eq!(back.timestamps(), d.timestamps());
    assert_eq!(back.ensembles, d.ensembles);
    assert_eq!(back.observations.valid, d.observations.valid);

    let config = PipelineConfig {
        comparisons: Comparisons::none(),
        ..small_config()
    };
    let (d, ranges, _) = prepare(&dataset(7), &config).unwrap();
    let run = run_nabqr(&d, &ranges, &config, &RunOptions::default()).unwrap();
    let mut buf = Vec::new();
    write_forecast_csv(&run.forecast, config.horizon, &mut buf).unwrap();
    let back = read_forecast_csv(buf.as_slice()).unwrap();
    assert_eq!(back.timestamps, run.forecast.timestamps);
    assert_eq!(back.levels, run.forecast.levels);
    assert_eq!(back.values, run.forecast.values);
}
