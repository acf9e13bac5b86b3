use chrono::{Duration, TimeZone};
use ndarray::{Array1, Array3};
use rand::Rng;

use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_params(f: usize, u: usize, d: usize, o: usize, seed: u64) -> LstmParams {
    let mut r = rng(seed);
    let mut p = LstmParams::init(f, u, d, o, &mut r);
    for s in p.slices_mut() {
        s.iter_mut().for_each(|v| *v += r.random_range(-0.3..0.3));
    }
    p
}

fn timestamps(n: usize) -> Vec<DateTime<Utc>> {
    let t0 = Utc.with_ymd_and_hms(2022, 1, 1, 0, 0, 0).unwrap();
    (0..n as i64).map(|i| t0 + Duration::hours(i)).collect()
}

#[test]
fn table_four_parameter_count() {
    let p = LstmParams::zeros(51, 256, 20, 20);
    assert_eq!(p.w_x.dim(), (51, 1024));
    assert_eq!(p.w_h.dim(), (256, 1024));
    assert_eq!(p.n_params(), 320_952);
}

#[test]
fn zero_cell_is_zero() {
    let p = LstmParams::zeros(4, 3, 2, 2);
    let (h, c) = lstm_cell(&p, Array1::from(vec![1.0, -2.0, 3.0, 0.5]).view(), Array1::zeros(3).view(), Array1::zeros(3).view())
        .unwrap();
    assert!(h.iter().chain(c.iter()).all(|&v| v == 0.0));
    let out = model_forward(&p, Array2::ones((7, 4)).view(), true).unwrap();
    assert!(out.iter().all(|&v| v == 0.0));
}

#[test]
fn saturated_forget_gate_keeps_cell() {
    let mut p = LstmParams::zeros(2, 4, 2, 2);
    p.b.slice_mut(s![4..8]).fill(30.0);
    let c_prev = Array1::from(vec![0.7, -1.3, 2.0, 0.0]);
    let (_, c) = lstm_cell(&p, Array1::from(vec![5.0, -5.0]).view(), Array1::zeros(4).view(), c_prev.view()).unwrap();
    for (a, b) in c.iter().zip(&c_prev) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn hidden_state_is_bounded() {
    let p = random_params(6, 10, 4, 4, 1);
    let mut r = rng(2);
    let mut h = Array1::zeros(10);
    let mut c = Array1::zeros(10);
    for _ in 0..20 {
        let x: Array1<f64> = (0..6).map(|_| r.random_range(-50.0..50.0)).collect();
        (h, c) = lstm_cell(&p, x.view(), h.view(), c.view()).unwrap();
        assert!(h.iter().all(|v| v.abs() < 1.0));
    }
    assert!(lstm_cell(&p, Array1::zeros(5).view(), h.view(), c.view()).is_err());
}

#[test]
fn output_nonnegative_and_bounded() {
    let p = random_params(5, 8, 6, 4, 3);
    let mut r = rng(4);
    // |out_j| <= sum_i |w2_ij| + |b2_j| because the sigmoid layer lies in (0, 1)
    let bound = (0..p.outputs())
        .map(|j| p.w2.column(j).iter().map(|v| v.abs()).sum::<f64>() + p.b2[j].abs())
        .fold(0.0, f64::max);
    for _ in 0..50 {
        let w = Array2::from_shape_fn((7, 5), |_| r.random_range(-10.0..10.0));
        let out = model_forward(&p, w.view(), false).unwrap();
        assert!(out.iter().all(|&v| v >= 0.0 && v <= bound));
    }
}

#[test]
fn strict_mode_rejects_unsorted_rows() {
    let p = LstmParams::zeros(3, 2, 2, 2);
    let w = Array2::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, 3.0, 1.0, 2.0]).unwrap();
    assert!(model_forward(&p, w.view(), true).is_err());
    assert!(model_forward(&p, w.view(), false).is_ok());
}

#[test]
fn batched_forward_matches_single_sample() {
    let p = random_params(5, 8, 3, 3, 5);
    let mut r = rng(6);
    let x = Array3::from_shape_fn((4, 7, 5), |_| r.random_range(-2.0..2.0));
    let tape = lstm::forward_batch(&p, x.view());
    for b in 0..4 {
        let single = model_forward(&p, x.index_axis(Axis(0), b), false).unwrap();
        for (a, s) in tape.out.row(b).iter().zip(&single) {
            assert!((a - s).abs() < 1e-12);
        }
    }
}

#[test]
fn quantile_loss_examples() {
    let one = QuantileLevels::new(vec![0.5]).unwrap();
    let two = QuantileLevels::new(vec![0.1, 0.9]).unwrap();
    assert_eq!(quantile_loss(&[3.0], &[3.0], &one).unwrap(), 0.0);
    assert!((quantile_loss(&[2.0], &[0.0], &one).unwrap() - 1.0).abs() < 1e-15);
    assert!((quantile_loss(&[1.0, -1.0], &[0.0, 0.0], &two).unwrap() - 0.1).abs() < 1e-15);
    assert!(quantile_loss(&[1.0], &[1.0, 2.0], &one).is_err());
}

/// Central differences over every parameter of a downsized network.
fn max_relative_gradient_error(seed: u64) -> f64 {
    let (f, u, d, o) = (5, 8, 3, 3);
    let mut p = random_params(f, u, d, o, seed);
    // keep the rectifier active so the loss is smooth around the point
    p.b2.fill(2.0);
    let levels = QuantileLevels::new(vec![0.2, 0.5, 0.8]).unwrap();
    let mut r = rng(seed + 100);
    let x = Array3::from_shape_fn((6, 7, f), |_| r.random_range(-1.5..1.5));
    let y = Array2::from_shape_fn((6, o), |_| r.random_range(-3.0..6.0));
    let (_, grad) = loss_and_gradient(&p, x.view(), y.view(), &levels).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for k in 0..7 {
        for i in 0..p.slices()[k].len() {
            let orig = p.slices()[k][i];
            p.slices_mut()[k][i] = orig + h;
            let up = batch_loss(&p, x.view(), y.view(), &levels).unwrap();
            p.slices_mut()[k][i] = orig - h;
            let down = batch_loss(&p, x.view(), y.view(), &levels).unwrap();
            p.slices_mut()[k][i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grad.slices()[k][i];
            let err = (numeric - analytic).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

#[test]
fn gradients_match_finite_differences() {
    for seed in [7, 8] {
        let err = max_relative_gradient_error(seed);
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn small_gradient_step_does_not_increase_loss() {
    let p = random_params(5, 8, 4, 3, 9);
    let levels = QuantileLevels::new(vec![0.1, 0.5, 0.9]).unwrap();
    let mut r = rng(10);
    let x = Array3::from_shape_fn((20, 4, 5), |_| r.random_range(-1.0..1.0));
    let y = Array2::from_shape_fn((20, 3), |_| r.random_range(0.0..3.0));
    let (loss, grad) = loss_and_gradient(&p, x.view(), y.view(), &levels).unwrap();
    let mut lr = 1.0;
    let mut improved = false;
    for _ in 0..30 {
        let mut q = p.clone();
        for (a, g) in q.slices_mut().into_iter().zip(grad.slices()) {
            a.iter_mut().zip(g).for_each(|(a, g)| *a -= lr * g);
        }
        let l = batch_loss(&q, x.view(), y.view(), &levels).unwrap();
        if l <= loss {
            improved = true;
            break;
        }
        lr *= 0.5;
    }
    assert!(improved);
}

fn toy_series(n: usize, m: usize, seed: u64) -> (EnsembleMatrix, ObservationSeries) {
    let mut r = rng(seed);
    let ts = timestamps(n);
    let mut level = 0.5;
    let mut members = Array2::zeros((n, m));
    let mut y = Vec::with_capacity(n);
    for t in 0..n {
        level = (0.9 * level + 0.1 * r.random_range(0.0..1.0f64)).clamp(0.0, 1.0);
        for j in 0..m {
            members[[t, j]] = 100.0 * (level + r.random_range(-0.1..0.1));
        }
        y.push(100.0 * (level + r.random_range(-0.2..0.2)));
    }
    (
        EnsembleMatrix::new(ts.clone(), members).unwrap(),
        ObservationSeries::new(ts, y, vec![true; n]).unwrap(),
    )
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        levels: QuantileLevels::new(vec![0.1, 0.5, 0.9]).unwrap(),
        epochs: 3,
        batch_size: 16,
        units: 6,
        dense_width: 4,
        learning_rate: 0.1,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_deterministic_and_never_worsens() {
    let (ens, obs) = toy_series(160, 5, 11);
    let lags = LagSpec::new(vec![1, 2, 24]).unwrap();
    let a = Corrector::train(&ens, &obs, 0..160, &lags, &tiny_config()).unwrap();
    let b = Corrector::train(&ens, &obs, 0..160, &lags, &tiny_config()).unwrap();
    assert_eq!(a, b);
    assert!(a.report.final_loss <= a.report.initial_loss);
    assert_eq!(a.report.history.len(), 3);
    assert_eq!(a.report.n_train + a.report.n_validation, 160 - 24);
    let mut other = tiny_config();
    other.seed = 1;
    let c = Corrector::train(&ens, &obs, 0..160, &lags, &other).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn learns_input_independent_quantiles() {
    // targets do not depend on the inputs: the best achievable loss is that
    // of the per-level empirical quantiles
    let (ens, mut obs) = toy_series(400, 4, 12);
    let mut r = rng(13);
    obs.values.iter_mut().for_each(|v| *v = r.random_range(20.0..80.0));
    let lags = LagSpec::new(vec![1, 2]).unwrap();
    let config = TrainConfig {
        levels: QuantileLevels::new(vec![0.1, 0.5, 0.9]).unwrap(),
        epochs: 60,
        batch_size: 32,
        units: 4,
        dense_width: 3,
        learning_rate: 0.02,
        optimizer: Optimizer::adam(),
        validation_fraction: 0.0,
        ..TrainConfig::default()
    };
    let c = Corrector::train(&ens, &obs, 0..400, &lags, &config).unwrap();
    let ys: Vec<f64> = obs.values[2..].iter().map(|v| v / c.target_scale).collect();
    let best: f64 = config
        .levels
        .iter()
        .map(|tau| {
            let q = empirical_quantile(&ys, tau).unwrap();
            ys.iter().map(|y| crate::quantile::pinball(y - q, tau)).sum::<f64>() / ys.len() as f64
        })
        .sum::<f64>()
        / 3.0;
    assert!(c.report.final_loss <= 1.05 * best, "{} vs {}", c.report.final_loss, best);
}

#[test]
fn correction_shape_order_and_permutation_invariance() {
    let (ens, obs) = toy_series(120, 5, 14);
    let lags = LagSpec::new(vec![1, 3, 48]).unwrap();
    let c = Corrector::train(&ens, &obs, 0..120, &lags, &tiny_config()).unwrap();
    let out = c.correct(&ens).unwrap();
    assert_eq!(out.offset, 48);
    assert_eq!(out.ensembles.members.dim(), (72, 3));
    assert_eq!(out.ensembles.timestamps[0], ens.timestamps[48]);
    assert!(out.ensembles.sorted);
    let mut permuted = ens.members.clone();
    for mut row in permuted.rows_mut() {
        let v: Vec<f64> = row.iter().rev().copied().collect();
        row.iter_mut().zip(v).for_each(|(d, s)| *d = s);
    }
    let permuted = EnsembleMatrix::new(ens.timestamps.clone(), permuted).unwrap();
    assert_eq!(c.correct(&permuted).unwrap().ensembles.members, out.ensembles.members);
    assert!(c.correct(&ens.slice(0..48)).is_err());
}

#[test]
fn augmented_targets_are_quantiles_of_members_and_observation() {
    let (ens, obs) = toy_series(60, 5, 15);
    let lags = LagSpec::new(vec![1]).unwrap();
    let sorted = sort_rows(&ens);
    let levels = QuantileLevels::new(vec![0.1, 0.9]).unwrap();
    let st = Standardizer::fit(sorted.members.view());
    let set = build_training_set(
        sorted.members.view(),
        &obs.values,
        &[10],
        &lags,
        &st,
        &levels,
        TargetMode::AugmentedQuantile,
        1.0,
    )
    .unwrap();
    let mut aug = sorted.members.row(10).to_vec();
    aug.push(obs.values[10]);
    aug.sort_by(f64::total_cmp);
    assert_eq!(set.targets[[0, 0]], aug[0]);
    assert_eq!(set.targets[[0, 1]], aug[5]);
    assert!(build_training_set(sorted.members.view(), &obs.values, &[0], &lags, &st, &levels, TargetMode::Observation, 1.0).is_err());
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let (ens, obs) = toy_series(100, 5, 16);
    let c = Corrector::train(&ens, &obs, 0..100, &LagSpec::new(vec![1, 2]).unwrap(), &tiny_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corrector.json");
    c.save(&path).unwrap();
    let back = Corrector::load(&path).unwrap();
    assert_eq!(back, c);
    for (a, b) in back.params.slices().iter().zip(c.params.slices()) {
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let tampered = c.to_json().unwrap().replace("\"version\":1", "\"version\":9");
    assert!(Corrector::from_json(&tampered).is_err());
}

#[test]
fn day_chunks_split_at_midnight() {
    let ts = timestamps(60);
    assert_eq!(day_chunks(&ts, 10..60), vec![10..24, 24..48, 48..60]);
    assert_eq!(day_chunks(&ts, 24..48), vec![24..48]);
}

#[test]
fn lag_spec_validation() {
    assert_eq!(LagSpec::default().lags(), &[1, 2, 3, 6, 12, 24, 48]);
    assert_eq!(LagSpec::default().max_lag(), 48);
    assert!(LagSpec::new(vec![]).is_err());
    assert!(LagSpec::new(vec![0, 1]).is_err());
    assert_eq!(LagSpec::new(vec![3, 1, 3]).unwrap().lags(), &[1, 3]);
}
