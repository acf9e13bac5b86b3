use chrono::{Duration, TimeZone};

use super::*;
use crate::quantile::{QuantileLevels, DEFAULT_LEVELS};
use crate::scoring::{reliability, QuantileForecast};

fn hours(n: usize) -> Vec<DateTime<Utc>> {
    let t0 = Utc.with_ymd_and_hms(2021, 6, 1, 0, 0, 0).unwrap();
    (0..n as i64).map(|i| t0 + Duration::hours(i)).collect()
}

fn dataset(ct: Option<Vec<f64>>, spot: Option<Vec<f64>>, members: Array2<f64>) -> RawDataset {
    let n = members.nrows();
    let ts = hours(n);
    RawDataset {
        area: "T".into(),
        observations: ObservationSeries::new(ts.clone(), vec![1.0; n], vec![true; n]).unwrap(),
        ensembles: EnsembleMatrix::new(ts, members).unwrap(),
        spot,
        countertrade: ct,
        imbalance: None,
    }
}

fn removed(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, k)| !**k).map(|(i, _)| i).collect()
}

#[test]
fn countertrade_four_hour_fixture() {
    let d = dataset(Some(vec![1800.0, 10.0, 10.0, 1800.0]), Some(vec![5.0; 4]), Array2::zeros((4, 3)));
    let unpadded = CountertradeFilter {
        pad: 0,
        ..CountertradeFilter::default()
    };
    assert_eq!(removed(&countertrade_filter(&d, &unpadded)), vec![1, 2]);
    assert_eq!(removed(&countertrade_filter(&d, &CountertradeFilter::default())), vec![0, 1, 2, 3]);
}

#[test]
fn countertrade_needs_both_flanks() {
    let d = dataset(Some(vec![0.0; 10]), Some(vec![1.0; 10]), Array2::zeros((10, 2)));
    assert!(removed(&countertrade_filter(&d, &CountertradeFilter::default())).is_empty());
    let ct = vec![500.0, 1800.0, 10.0, 10.0, 900.0, 500.0, 500.0, 500.0];
    let d = dataset(Some(ct), None, Array2::zeros((8, 2)));
    assert!(removed(&countertrade_filter(&d, &CountertradeFilter::default())).is_empty());
}

#[test]
fn countertrade_flank_skips_missing_hours() {
    let ct = vec![300.0, 1900.0, f64::NAN, 5.0, 5.0, f64::NAN, 1750.0, 300.0, 300.0, 300.0];
    let d = dataset(Some(ct.clone()), None, Array2::zeros((10, 2)));
    let c = CountertradeFilter {
        pad: 0,
        ..CountertradeFilter::default()
    };
    assert_eq!(removed(&countertrade_filter(&d, &c)), vec![3, 4]);
    let near = CountertradeFilter {
        pad: 0,
        flank_hours: 1,
        ..CountertradeFilter::default()
    };
    assert!(removed(&countertrade_filter(&d, &near)).is_empty());
}

#[test]
fn negative_spot_hour_is_padded() {
    let mut spot = vec![30.0; 11];
    spot[5] = -1.0;
    let d = dataset(None, Some(spot), Array2::zeros((11, 2)));
    assert_eq!(removed(&countertrade_filter(&d, &CountertradeFilter::default())), vec![3, 4, 5, 6, 7]);
    let window = CountertradeFilter {
        spot_window: Some((d.timestamps()[6], d.timestamps()[10])),
        ..CountertradeFilter::default()
    };
    assert!(removed(&countertrade_filter(&d, &window)).is_empty());
}

#[test]
fn missing_market_series_keeps_everything() {
    let d = dataset(None, None, Array2::zeros((5, 2)));
    assert_eq!(countertrade_filter(&d, &CountertradeFilter::default()), vec![true; 5]);
}

#[test]
fn glitch_boundary_and_padding() {
    let mut members = Array2::from_elem((12, 20), 100.0);
    for j in 0..10 {
        members[[3, j]] = 365.0;
    }
    for j in 0..9 {
        members[[9, j]] = 365.0;
    }
    // endpoints are outside the open interval
    members[[9, 9]] = 358.0;
    members[[9, 10]] = 370.0;
    let e = EnsembleMatrix::new(hours(12), members).unwrap();
    let mask = glitch_filter(&e, &GlitchFilter::default());
    assert_eq!(removed(&mask), vec![1, 2, 3, 4, 5]);
}

#[test]
fn filters_compose_independently_of_order() {
    let sim = simulate(&SimConfig {
        hours: 3000,
        ..SimConfig::default()
    })
    .unwrap();
    let mut a = sim.dataset.clone();
    let mut b = sim.dataset.clone();
    clean(&mut a, &CleaningConfig::standard());
    let ct = countertrade_filter(&b, &CountertradeFilter::default());
    let gl = glitch_filter(&b.ensembles, &GlitchFilter::default());
    b.observations.apply_mask(&gl);
    b.observations.apply_mask(&ct);
    assert_eq!(a.observations.valid, b.observations.valid);
    let once = a.observations.valid.clone();
    a.observations.apply_mask(&ct);
    assert_eq!(a.observations.valid, once);
    // every injected episode is caught
    for t in 0..3000 {
        if sim.curtailed[t] || sim.glitched[t] {
            assert!(!once[t], "hour {t}");
        }
    }
}

const FIXTURE: &str = "timestamp,actual,ens_00,ens_01,ens_02,spot\n\
2022-01-01T00:00:00Z,1.5,1,2,3,40\n\
2022-01-01T01:00:00Z,2.5,2,3,4,41\n\
2022-01-01T02:00:00Z,,3,4,5,42\n\
2022-01-01T03:00:00Z,4,4,,6,\n";

#[test]
fn reads_fixture_and_marks_missing_cells() {
    let d = read_csv(FIXTURE.as_bytes(), "X").unwrap();
    assert_eq!(d.len(), 4);
    assert_eq!(d.ensembles.width(), 3);
    assert_eq!(d.observations.valid, vec![true, true, false, false]);
    assert_eq!(d.ensembles.members[[3, 1]], 4.0);
    assert!(d.spot.as_ref().unwrap()[3].is_nan());
    assert!(d.countertrade.is_none());
}

#[test]
fn well_formed_table_is_all_valid() {
    let mut text = String::from("timestamp,actual,ens_00,ens_01\n");
    for (i, t) in hours(48).iter().enumerate() {
        text.push_str(&format!("{},{},{},{}\n", t.format("%Y-%m-%d %H:%M:%S"), i, i, i + 1));
    }
    let d = read_csv(text.as_bytes(), "X").unwrap();
    assert_eq!(d.len(), 48);
    assert!(d.observations.valid.iter().all(|v| *v));
}

#[test]
fn gap_is_reported_at_its_position() {
    let text = "timestamp,actual,ens_00\n2022-01-01T00:00:00Z,1,1\n2022-01-01T01:00:00Z,1,1\n2022-01-01T03:00:00Z,1,1\n";
    match read_csv(text.as_bytes(), "X") {
        Err(Error::Gap { after, next }) => {
            assert_eq!(after, Utc.with_ymd_and_hms(2022, 1, 1, 1, 0, 0).unwrap());
            assert_eq!(next, Utc.with_ymd_and_hms(2022, 1, 1, 3, 0, 0).unwrap());
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn malformed_cells_are_listed() {
    let text = "timestamp,actual,ens_00\n2022-01-01T00:00:00Z,abc,1\nnot-a-time,1,1\n2022-01-01T02:00:00Z,1,x\n";
    match read_csv(text.as_bytes(), "X") {
        Err(Error::Malformed(cells)) => {
            assert_eq!(cells.len(), 3);
            assert_eq!((cells[0].line, cells[0].column.as_str()), (2, "actual"));
            assert_eq!(cells[1].column, "timestamp");
            assert_eq!((cells[2].line, cells[2].text.as_str()), (4, "x"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn unknown_columns_are_ignored() {
    let text = "timestamp,weather,actual,ens_00\n2022-01-01T00:00:00Z,sunny,1,2\n";
    let d = read_csv(text.as_bytes(), "X").unwrap();
    assert_eq!(d.observations.values, vec![1.0]);
    assert!(read_csv("timestamp,actual\n".as_bytes(), "X").is_err());
}

fn same_values(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

#[test]
fn csv_round_trip_is_value_identical() {
    let mut sim = simulate(&SimConfig {
        hours: 200,
        ..SimConfig::default()
    })
    .unwrap()
    .dataset;
    sim.observations.valid[17] = false;
    sim.observations.values[18] = f64::NAN;
    sim.observations.valid[18] = false;
    let mut buf = Vec::new();
    write_csv(&sim, &mut buf).unwrap();
    let back = read_csv(buf.as_slice(), "SYN").unwrap();
    assert_eq!(back.observations.timestamps, sim.observations.timestamps);
    assert_eq!(back.observations.valid, sim.observations.valid);
    assert!(same_values(&back.observations.values, &sim.observations.values));
    assert_eq!(back.ensembles, sim.ensembles);
    assert!(same_values(back.spot.as_ref().unwrap(), sim.spot.as_ref().unwrap()));
    assert!(same_values(back.countertrade.as_ref().unwrap(), sim.countertrade.as_ref().unwrap()));
    assert!(same_values(back.imbalance.as_ref().unwrap(), sim.imbalance.as_ref().unwrap()));
}

#[test]
fn split_arithmetic() {
    let spec = SplitSpec::default();
    assert_eq!(spec.total(), 24288);
    let r = split(24288, &spec).unwrap();
    assert_eq!(r.nn_train, 0..14040);
    assert_eq!(r.taqr_init_params, 14040..14232);
    assert_eq!(r.taqr_init_window, 14232..19176);
    assert_eq!(r.test, 19176..24288);
    let tenth = SplitSpec::proportional(0.1).unwrap();
    assert_eq!(
        (tenth.nn_train, tenth.taqr_init_params, tenth.taqr_init_window, tenth.test),
        (1404, 192, 494, 511)
    );
    assert!(matches!(
        split(100, &spec),
        Err(Error::InsufficientData { required: 24288, available: 100 })
    ));
    assert!(SplitRanges::new([0..10, 8..20, 20..30, 30..40]).is_err());
    assert!(SplitRanges::new([0..10, 12..20, 20..30, 30..40]).is_err());
    let fitted = SplitSpec::fit_to(12000).unwrap();
    assert_eq!(
        (fitted.nn_train, fitted.taqr_init_params, fitted.taqr_init_window, fitted.test),
        (6880, 192, 2422, 2505)
    );
    assert_eq!(SplitSpec::fit_to(24288).unwrap(), spec);
    assert!(SplitSpec::fit_to(305).is_err());
    assert!(SplitSpec::fit_to(306).unwrap().test >= 24);
}

#[test]
fn simulation_is_reproducible_and_bounded() {
    let c = SimConfig {
        hours: 1000,
        ..SimConfig::default()
    };
    let a = simulate(&c).unwrap();
    let b = simulate(&c).unwrap();
    assert_eq!(a.dataset, b.dataset);
    assert!(a.dataset.observations.values.iter().all(|&v| (0.0..=1000.0).contains(&v)));
    assert!(a.dataset.ensembles.members.iter().all(|&v| (0.0..=1000.0).contains(&v)));
    let other = simulate(&SimConfig { seed: 2, ..c }).unwrap();
    assert_ne!(a.dataset.observations.values, other.dataset.observations.values);
}

fn levels() -> QuantileLevels {
    QuantileLevels::new(DEFAULT_LEVELS.to_vec()).unwrap()
}

#[test]
fn generating_quantiles_are_reliable() {
    let sim = simulate(&SimConfig {
        hours: 8000,
        curtailment_rate: 0.0,
        ..SimConfig::default()
    })
    .unwrap();
    let lv = levels();
    let ts = sim.dataset.timestamps().to_vec();
    let values = Array2::from_shape_fn((ts.len(), lv.len()), |(t, q)| sim.true_quantile(t, lv.as_slice()[q]));
    let f = QuantileForecast::new(ts, lv.clone(), values).unwrap();
    let freq = reliability(&sim.dataset.observations.values, &f, None).unwrap();
    for (tau, fr) in lv.iter().zip(freq) {
        assert!((fr - tau).abs() <= 0.03, "{tau}: {fr}");
    }
}

#[test]
fn underdispersed_members_overshoot_low_and_undershoot_high() {
    let sim = simulate(&SimConfig {
        hours: 6000,
        bias: 0.0,
        glitch_share: 0.0,
        curtailment_rate: 0.0,
        ..SimConfig::default()
    })
    .unwrap();
    let d = &sim.dataset;
    let r = crate::scoring::ScoreReport::for_ensemble(&d.observations.values, d.ensembles.members.view(), None).unwrap();
    let dev: Vec<f64> = r.reliability.iter().zip(&r.levels).map(|(a, b)| a - b).collect();
    let half = dev.len() / 2;
    let low = dev[..half].iter().cloned().fold(f64::MIN, f64::max);
    let high = dev[half..].iter().cloned().fold(f64::MAX, f64::min);
    assert!(low > 0.05, "{low}");
    assert!(high < -0.05, "{high}");
    assert!(dev[..half / 2].iter().all(|d| *d > 0.0));
}

mod props {
    use proptest::prelude::*;

    use super::*;

    fn ct_value() -> impl Strategy<Value = f64> {
        prop_oneof![0.0..30.0, 1600.0..2000.0, Just(f64::NAN)]
    }

    fn member_value() -> impl Strategy<Value = f64> {
        prop_oneof![350.0..380.0, 0.0..1000.0]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn masks_are_pure_idempotent_and_commute(
            ct in prop::collection::vec(ct_value(), 60..120),
            cells in prop::collection::vec(member_value(), 120 * 12),
        ) {
            let n = ct.len();
            let members = Array2::from_shape_vec((n, 12), cells[..n * 12].to_vec()).unwrap();
            let d = dataset(Some(ct), None, members);
            let c = countertrade_filter(&d, &CountertradeFilter::default());
            let g = glitch_filter(&d.ensembles, &GlitchFilter::default());
            prop_assert_eq!(&c, &countertrade_filter(&d, &CountertradeFilter::default()));

            let mut cg = d.observations.clone();
            cg.apply_mask(&c);
            cg.apply_mask(&g);
            let mut gc = d.observations.clone();
            gc.apply_mask(&g);
            gc.apply_mask(&c);
            prop_assert_eq!(&cg.valid, &gc.valid);
            let and: Vec<bool> = c.iter().zip(&g).map(|(a, b)| *a && *b).collect();
            prop_assert_eq!(&cg.valid, &and);

            let mut cleaned = d.clone();
            clean(&mut cleaned, &CleaningConfig::standard());
            prop_assert_eq!(&cleaned.observations.valid, &and);
            let once = cleaned.observations.valid.clone();
            clean(&mut cleaned, &CleaningConfig::standard());
            prop_assert_eq!(cleaned.observations.valid, once);
        }

        #[test]
        fn fitted_split_is_contiguous_and_fits(hours in 306usize..40_000) {
            let s = SplitSpec::fit_to(hours).unwrap();
            prop_assert_eq!(s.taqr_init_params, 192);
            prop_assert!(s.total() <= hours);
            prop_assert!(s.test >= 24);
            let r = split(hours, &s).unwrap();
            prop_assert_eq!(r.nn_train.start, 0);
            prop_assert_eq!(r.nn_train.end, r.taqr_init_params.start);
            prop_assert_eq!(r.taqr_init_params.end, r.taqr_init_window.start);
            prop_assert_eq!(r.taqr_init_window.end, r.test.start);
            prop_assert_eq!(r.end(), s.total());
        }
    }
}
