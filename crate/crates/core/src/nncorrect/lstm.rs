//! LSTM cell, dense head, and backpropagation through time.
//!
//! Gate weights are stored concatenated in the order input, forget,
//! candidate, output: `w_x` is F x 4U, `w_h` is U x 4U, `b` has 4U entries.
//! Batches are row-major (one sample per row).

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantile::QuantileLevels;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub w_x: Array2<f64>,
    pub w_h: Array2<f64>,
    pub b: Array1<f64>,
    /// Dense layer after the last hidden state, U x D, sigmoid.
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// Output layer, D x O, rectifier.
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Names of the parameter tensors, in `slices()` order.
pub const TENSOR_NAMES: [&str; 7] = ["w_x", "w_h", "b", "w1", "b1", "w2", "b2"];

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl LstmParams {
    pub fn zeros(features: usize, units: usize, dense: usize, outputs: usize) -> Self {
        Self {
            w_x: Array2::zeros((features, 4 * units)),
            w_h: Array2::zeros((units, 4 * units)),
            b: Array1::zeros(4 * units),
            w1: Array2::zeros((units, dense)),
            b1: Array1::zeros(dense),
            w2: Array2::zeros((dense, outputs)),
            b2: Array1::zeros(outputs),
        }
    }

    /// Glorot-uniform weights per tensor, zero biases except a forget-gate
    /// bias of one.
    pub fn init<R: Rng>(features: usize, units: usize, dense: usize, outputs: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(features, units, dense, outputs);
        let mut fill = |a: &mut Array2<f64>| {
            let (r, c) = a.dim();
            let lim = (6.0 / (r + c) as f64).sqrt();
            let u = Uniform::new_inclusive(-lim, lim).expect("finite bounds");
            a.iter_mut().for_each(|v| *v = u.sample(rng));
        };
        fill(&mut p.w_x);
        fill(&mut p.w_h);
        fill(&mut p.w1);
        fill(&mut p.w2);
        p.b.slice_mut(s![units..2 * units]).fill(1.0);
        p
    }

    pub fn features(&self) -> usize {
        self.w_x.nrows()
    }

    pub fn units(&self) -> usize {
        self.w_h.nrows()
    }

    pub fn dense_width(&self) -> usize {
        self.w1.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.w2.ncols()
    }

    pub fn n_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// Checks that all tensor shapes agree with each other and every value is finite.
    pub fn validate(&self) -> Result<()> {
        let (f, u, d, o) = (self.features(), self.units(), self.dense_width(), self.outputs());
        let ok = self.w_x.dim() == (f, 4 * u)
            && self.w_h.dim() == (u, 4 * u)
            && self.b.len() == 4 * u
            && self.w1.dim() == (u, d)
            && self.b1.len() == d
            && self.w2.dim() == (d, o)
            && self.b2.len() == o;
        if !ok {
            return Err(Error::Shape("inconsistent LSTM parameter shapes".into()));
        }
        if self.slices().iter().any(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("LSTM parameters".into()));
        }
        Ok(())
    }

    pub fn slices(&self) -> [&[f64]; 7] {
        [
            self.w_x.as_slice().expect("standard layout"),
            self.w_h.as_slice().expect("standard layout"),
            self.b.as_slice().expect("standard layout"),
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 7] {
        [
            self.w_x.as_slice_mut().expect("standard layout"),
            self.w_h.as_slice_mut().expect("standard layout"),
            self.b.as_slice_mut().expect("standard layout"),
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
        ]
    }

    pub(crate) fn sq_norm(&self) -> f64 {
        self.slices().iter().flat_map(|s| s.iter()).map(|v| v * v).sum()
    }
}

/// One step of the cell for a single sample.
pub fn lstm_cell(
    params: &LstmParams,
    x: ArrayView1<f64>,
    h_prev: ArrayView1<f64>,
    c_prev: ArrayView1<f64>,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let u = params.units();
    if x.len() != params.features() || h_prev.len() != u || c_prev.len() != u {
        return Err(Error::Shape(format!(
            "cell inputs {}/{}/{} for F={} U={u}",
            x.len(),
            h_prev.len(),
            c_prev.len(),
            params.features()
        )));
    }
    let z = x.dot(&params.w_x) + h_prev.dot(&params.w_h) + &params.b;
    let mut h = Array1::zeros(u);
    let mut c = Array1::zeros(u);
    for k in 0..u {
        let i = sigmoid(z[k]);
        let f = sigmoid(z[u + k]);
        let g = z[2 * u + k].tanh();
        let o = sigmoid(z[3 * u + k]);
        c[k] = f * c_prev[k] + i * g;
        h[k] = o * c[k].tanh();
    }
    Ok((h, c))
}

/// Intermediate values of a batched forward pass, kept for backpropagation.
pub(crate) struct Tape {
    /// Per step: B x F inputs.
    xs: Vec<Array2<f64>>,
    /// Hidden and cell states; index 0 is the zero initial state.
    h: Vec<Array2<f64>>,
    c: Vec<Array2<f64>>,
    /// Per step: activated gates, B x 4U.
    gates: Vec<Array2<f64>>,
    /// Per step: tanh of the new cell state.
    tc: Vec<Array2<f64>>,
    s1: Array2<f64>,
    a2: Array2<f64>,
    pub out: Array2<f64>,
}

/// Forward pass over a batch `inputs` of shape B x L x F (steps oldest first).
pub(crate) fn forward_batch(params: &LstmParams, inputs: ArrayView3<f64>) -> Tape {
    let (bsz, steps, _) = inputs.dim();
    let u = params.units();
    let mut tape = Tape {
        xs: Vec::with_capacity(steps),
        h: vec![Array2::zeros((bsz, u))],
        c: vec![Array2::zeros((bsz, u))],
        gates: Vec::with_capacity(steps),
        tc: Vec::with_capacity(steps),
        s1: Array2::zeros((0, 0)),
        a2: Array2::zeros((0, 0)),
        out: Array2::zeros((0, 0)),
    };
    for t in 0..steps {
        let x = inputs.index_axis(Axis(1), t).to_owned();
        let mut z = Array2::from_shape_fn((bsz, 4 * u), |(_, j)| params.b[j]);
        general_mat_mul(1.0, &x, &params.w_x, 1.0, &mut z);
        general_mat_mul(1.0, &tape.h[t], &params.w_h, 1.0, &mut z);
        let c_prev = &tape.c[t];
        let mut c = Array2::zeros((bsz, u));
        let mut h = Array2::zeros((bsz, u));
        let mut tc = Array2::zeros((bsz, u));
        for r in 0..bsz {
            let mut zr = z.row_mut(r);
            for k in 0..u {
                let i = sigmoid(zr[k]);
                let f = sigmoid(zr[u + k]);
                let g = zr[2 * u + k].tanh();
                let o = sigmoid(zr[3 * u + k]);
                zr[k] = i;
                zr[u + k] = f;
                zr[2 * u + k] = g;
                zr[3 * u + k] = o;
                let cv = f * c_prev[[r, k]] + i * g;
                let tv = cv.tanh();
                c[[r, k]] = cv;
                tc[[r, k]] = tv;
                h[[r, k]] = o * tv;
            }
        }
        tape.xs.push(x);
        tape.gates.push(z);
        tape.tc.push(tc);
        tape.h.push(h);
        tape.c.push(c);
    }
    let h_last = &tape.h[steps];
    let mut a1 = Array2::from_shape_fn((bsz, params.dense_width()), |(_, j)| params.b1[j]);
    general_mat_mul(1.0, h_last, &params.w1, 1.0, &mut a1);
    let s1 = a1.mapv(sigmoid);
    let mut a2 = Array2::from_shape_fn((bsz, params.outputs()), |(_, j)| params.b2[j]);
    general_mat_mul(1.0, &s1, &params.w2, 1.0, &mut a2);
    tape.out = a2.mapv(|v| v.max(0.0));
    tape.s1 = s1;
    tape.a2 = a2;
    tape
}

/// Gradients of a scalar loss with respect to every parameter, given the
/// loss gradient `dout` with respect to the outputs.
pub(crate) fn backward(params: &LstmParams, tape: &Tape, dout: &Array2<f64>) -> LstmParams {
    let steps = tape.xs.len();
    let u = params.units();
    let bsz = dout.nrows();
    let mut grad = LstmParams::zeros(params.features(), u, params.dense_width(), params.outputs());

    let da2 = Array2::from_shape_fn(dout.dim(), |(r, j)| {
        if tape.a2[[r, j]] > 0.0 {
            dout[[r, j]]
        } else {
            0.0
        }
    });
    general_mat_mul(1.0, &tape.s1.t(), &da2, 0.0, &mut grad.w2);
    grad.b2 = da2.sum_axis(Axis(0));
    let ds1 = da2.dot(&params.w2.t());
    let da1 = Array2::from_shape_fn(ds1.dim(), |(r, j)| {
        let s = tape.s1[[r, j]];
        ds1[[r, j]] * s * (1.0 - s)
    });
    general_mat_mul(1.0, &tape.h[steps].t(), &da1, 0.0, &mut grad.w1);
    grad.b1 = da1.sum_axis(Axis(0));

    let mut dh = da1.dot(&params.w1.t());
    let mut dc_next: Array2<f64> = Array2::zeros((bsz, u));
    let mut dz = Array2::zeros((bsz, 4 * u));
    for t in (0..steps).rev() {
        let gates = &tape.gates[t];
        let tc = &tape.tc[t];
        let c_prev = &tape.c[t];
        for r in 0..bsz {
            for k in 0..u {
                let i = gates[[r, k]];
                let f = gates[[r, u + k]];
                let g = gates[[r, 2 * u + k]];
                let o = gates[[r, 3 * u + k]];
                let tv = tc[[r, k]];
                let dhv = dh[[r, k]];
                let dc = dc_next[[r, k]] + dhv * o * (1.0 - tv * tv);
                dz[[r, k]] = dc * g * i * (1.0 - i);
                dz[[r, u + k]] = dc * c_prev[[r, k]] * f * (1.0 - f);
                dz[[r, 2 * u + k]] = dc * i * (1.0 - g * g);
                dz[[r, 3 * u + k]] = dhv * tv * o * (1.0 - o);
                dc_next[[r, k]] = dc * f;
            }
        }
        general_mat_mul(1.0, &tape.xs[t].t(), &dz, 1.0, &mut grad.w_x);
        general_mat_mul(1.0, &tape.h[t].t(), &dz, 1.0, &mut grad.w_h);
        grad.b += &dz.sum_axis(Axis(0));
        if t > 0 {
            dh = dz.dot(&params.w_h.t());
        }
    }
    grad
}

/// Mean pinball loss over a batch of outputs and, optionally, its
/// gradient with respect to the outputs.
pub(crate) fn batch_quantile_loss(
    out: &Array2<f64>,
    targets: ArrayView2<f64>,
    levels: &[f64],
    with_grad: bool,
) -> (f64, Option<Array2<f64>>) {
    let (bsz, q) = out.dim();
    let norm = 1.0 / (bsz * q) as f64;
    let mut loss = 0.0;
    let mut grad = with_grad.then(|| Array2::zeros((bsz, q)));
    for r in 0..bsz {
        for (j, &tau) in levels.iter().enumerate() {
            let d = targets[[r, j]] - out[[r, j]];
            loss += crate::quantile::pinball(d, tau);
            if let Some(g) = grad.as_mut() {
                // d(loss)/d(out) = -d(pinball)/d(d)
                g[[r, j]] = if d < 0.0 { (1.0 - tau) * norm } else { -tau * norm };
            }
        }
    }
    (loss * norm, grad)
}

/// Mean combined quantile loss of the network on `inputs` (B x L x F) and
/// per-level `targets` (B x Q), with its gradient.
pub fn loss_and_gradient(
    params: &LstmParams,
    inputs: ArrayView3<f64>,
    targets: ArrayView2<f64>,
    levels: &QuantileLevels,
) -> Result<(f64, LstmParams)> {
    check_batch(params, inputs, targets, levels)?;
    let tape = forward_batch(params, inputs);
    let (loss, dout) = batch_quantile_loss(&tape.out, targets, levels.as_slice(), true);
    let grad = backward(params, &tape, &dout.expect("gradient requested"));
    Ok((loss, grad))
}

/// Mean combined quantile loss without gradients.
pub fn batch_loss(
    params: &LstmParams,
    inputs: ArrayView3<f64>,
    targets: ArrayView2<f64>,
    levels: &QuantileLevels,
) -> Result<f64> {
    check_batch(params, inputs, targets, levels)?;
    let tape = forward_batch(params, inputs);
    Ok(batch_quantile_loss(&tape.out, targets, levels.as_slice(), false).0)
}

fn check_batch(
    params: &LstmParams,
    inputs: ArrayView3<f64>,
    targets: ArrayView2<f64>,
    levels: &QuantileLevels,
) -> Result<()> {
    let (b, _, f) = inputs.dim();
    if f != params.features()
        || targets.dim() != (b, params.outputs())
        || levels.len() != params.outputs()
    {
        return Err(Error::Shape(format!(
            "batch {:?} with targets {:?} and {} levels for F={} O={}",
            inputs.dim(),
            targets.dim(),
            levels.len(),
            params.features(),
            params.outputs()
        )));
    }
    Ok(())
}

/// Runs the network on one lag window (L x F, oldest first). With `strict`,
/// rows that are not sorted nondecreasing are rejected.
pub fn model_forward(params: &LstmParams, window: ArrayView2<f64>, strict: bool) -> Result<Array1<f64>> {
    if window.ncols() != params.features() {
        return Err(Error::Shape(format!(
            "window has {} features, expected {}",
            window.ncols(),
            params.features()
        )));
    }
    if strict {
        for (i, row) in window.rows().into_iter().enumerate() {
            if row.iter().zip(row.iter().skip(1)).any(|(a, b)| a > b) {
                return Err(Error::Domain(format!("window row {i} is not sorted")));
            }
        }
    }
    let u = params.units();
    let mut h = Array1::zeros(u);
    let mut c = Array1::zeros(u);
    for row in window.rows() {
        (h, c) = lstm_cell(params, row, h.view(), c.view())?;
    }
    let s1 = (h.dot(&params.w1) + &params.b1).mapv(sigmoid);
    Ok((s1.dot(&params.w2) + &params.b2).mapv(|v| v.max(0.0)))
}
