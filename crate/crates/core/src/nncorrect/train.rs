use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lstm::{forward_batch, loss_and_gradient, LstmParams};
use super::{Optimizer, TrainConfig};
use crate::error::{Error, Result};

/// Loss after one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: Option<f64>,
}

/// Rows per chunk when evaluating a loss over a whole set.
const EVAL_CHUNK: usize = 1024;

pub(crate) fn mean_loss(
    params: &LstmParams,
    inputs: ArrayView3<f64>,
    targets: ArrayView2<f64>,
    levels: &[f64],
) -> f64 {
    let n = inputs.dim().0;
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let tape = forward_batch(params, inputs.slice(ndarray::s![start..end, .., ..]));
        let t = targets.slice(ndarray::s![start..end, ..]);
        let (l, _) = super::lstm::batch_quantile_loss(&tape.out, t, levels, false);
        total += l * (end - start) as f64;
        start = end;
    }
    total / n as f64
}

struct AdamState {
    m: LstmParams,
    v: LstmParams,
    t: i32,
}

/// Mini-batch training with gradient-norm clipping. Returns the parameters
/// with the lowest full training loss seen (the initial ones included) and
/// the per-epoch history.
#[allow(clippy::too_many_arguments)]
pub(crate) fn fit(
    mut params: LstmParams,
    train_x: &Array3<f64>,
    train_y: &Array2<f64>,
    val: Option<(&Array3<f64>, &Array2<f64>)>,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(LstmParams, f64, Vec<EpochRecord>)> {
    let levels = config.levels.as_slice();
    let n = train_x.dim().0;
    let initial = mean_loss(&params, train_x.view(), train_y.view(), levels);
    if !initial.is_finite() {
        return Err(Error::Diverged { epoch: 0, loss: initial });
    }
    let mut best = (initial, params.clone());
    let mut history = Vec::with_capacity(config.epochs);
    let mut adam = match config.optimizer {
        Optimizer::Adam { .. } => {
            let z = LstmParams::zeros(params.features(), params.units(), params.dense_width(), params.outputs());
            Some(AdamState { m: z.clone(), v: z, t: 0 })
        }
        Optimizer::Sgd => None,
    };
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(rng);
        for batch in order.chunks(config.batch_size) {
            let bx = train_x.select(Axis(0), batch);
            let by = train_y.select(Axis(0), batch);
            let (loss, mut grad) = loss_and_gradient(&params, bx.view(), by.view(), &config.levels)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            let norm = grad.sq_norm().sqrt();
            if config.clip_norm > 0.0 && norm > config.clip_norm {
                let s = config.clip_norm / norm;
                grad.slices_mut().into_iter().flatten().for_each(|g| *g *= s);
            }
            step(&mut params, &grad, config, adam.as_mut());
        }
        let train_loss = mean_loss(&params, train_x.view(), train_y.view(), levels);
        if !train_loss.is_finite() {
            return Err(Error::Diverged { epoch, loss: train_loss });
        }
        let validation_loss = val.map(|(vx, vy)| mean_loss(&params, vx.view(), vy.view(), levels));
        log::info!("epoch {epoch}: train loss {train_loss:.6}, validation {validation_loss:?}");
        if train_loss < best.0 {
            best = (train_loss, params.clone());
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            validation_loss,
        });
    }
    Ok((best.1, initial, history))
}

fn step(params: &mut LstmParams, grad: &LstmParams, config: &TrainConfig, adam: Option<&mut AdamState>) {
    let lr = config.learning_rate;
    match (config.optimizer, adam) {
        (Optimizer::Adam { beta1, beta2, epsilon }, Some(st)) => {
            st.t += 1;
            let c1 = 1.0 - beta1.powi(st.t);
            let c2 = 1.0 - beta2.powi(st.t);
            let ps = params.slices_mut();
            let ms = st.m.slices_mut();
            let vs = st.v.slices_mut();
            for (((p, g), m), v) in ps.into_iter().zip(grad.slices()).zip(ms).zip(vs) {
                for i in 0..p.len() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                    p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + epsilon);
                }
            }
        }
        _ => {
            for (p, g) in params.slices_mut().into_iter().zip(grad.slices()) {
                p.iter_mut().zip(g).for_each(|(p, g)| *p -= lr * g);
            }
        }
    }
}
