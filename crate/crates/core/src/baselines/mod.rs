//! Reference models: quantile regression forests and quantile gradient
//! boosting, both built on variance-reduction regression trees.

mod tree;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantile::{check_tau, empirical_quantile, pinball, QuantileLevels};

pub use tree::{grow, Node, Tree, TreeParams};

const MIN_LEAF: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features tried per split; `None` means the rounded-up square root
    /// of the feature count.
    pub mtry: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            trees: 100,
            max_depth: 16,
            min_leaf: MIN_LEAF,
            mtry: None,
            bootstrap: true,
            seed: 7,
        }
    }
}

/// One leaf of a forest tree: training rows and their in-bag counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestLeaf {
    pub members: Vec<(u32, u32)>,
    pub total: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<(Tree, Vec<ForestLeaf>)>,
    /// Training responses, indexed by row.
    pub responses: Vec<f64>,
    pub n_features: usize,
}

fn check_xy(x: ArrayView2<f64>, y: &[f64]) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::Shape(format!("{} rows, {} responses", x.nrows(), y.len())));
    }
    if y.len() < 2 {
        return Err(Error::InsufficientData {
            required: 2,
            available: y.len(),
        });
    }
    if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("baseline training data".into()));
    }
    Ok(())
}

pub fn qrf_fit(x: ArrayView2<f64>, y: &[f64], config: &ForestConfig) -> Result<ForestModel> {
    check_xy(x, y)?;
    if config.trees == 0 {
        return Err(Error::Config("forest needs at least one tree".into()));
    }
    let (n, p) = x.dim();
    let mtry = config
        .mtry
        .unwrap_or_else(|| (p as f64).sqrt().ceil() as usize)
        .clamp(1, p);
    let params = TreeParams {
        max_depth: config.max_depth,
        min_leaf: config.min_leaf,
        mtry: Some(mtry),
    };
    let mut seeder = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trees = Vec::with_capacity(config.trees);
    for _ in 0..config.trees {
        let mut rng = ChaCha8Rng::seed_from_u64(seeder.random());
        let rows: Vec<usize> = if config.bootstrap {
            (0..n).map(|_| rng.random_range(0..n)).collect()
        } else {
            (0..n).collect()
        };
        let (tree, leaf_rows) = grow(x, y, rows, params, &mut rng);
        let leaves = leaf_rows
            .into_iter()
            .map(|mut rows| {
                rows.sort_unstable();
                let mut members: Vec<(u32, u32)> = Vec::new();
                for r in &rows {
                    match members.last_mut() {
                        Some((i, c)) if *i == *r as u32 => *c += 1,
                        _ => members.push((*r as u32, 1)),
                    }
                }
                ForestLeaf {
                    members,
                    total: rows.len() as u32,
                }
            })
            .collect();
        trees.push((tree, leaves));
    }
    Ok(ForestModel {
        trees,
        responses: y.to_vec(),
        n_features: p,
    })
}

impl ForestModel {
    /// Forest weights `w_i(x)`: the average over trees of the in-bag share
    /// of row `i` in the leaf that `x` reaches. Returned sparse, sorted by row.
    pub fn weights(&self, x: &[f64]) -> Vec<(usize, f64)> {
        let mut dense = vec![0.0; self.responses.len()];
        let m = self.trees.len() as f64;
        for (tree, leaves) in &self.trees {
            let leaf = &leaves[tree.leaf(x)];
            let total = leaf.total as f64;
            for &(i, c) in &leaf.members {
                dense[i as usize] += c as f64 / total / m;
            }
        }
        dense
            .into_iter()
            .enumerate()
            .filter(|(_, w)| *w > 0.0)
            .collect()
    }

    /// `inf { y : F(y | x) >= tau }` for each level.
    pub fn predict_levels(&self, x: &[f64], levels: &[f64]) -> Vec<f64> {
        let mut pts: Vec<(f64, f64)> = self
            .weights(x)
            .into_iter()
            .map(|(i, w)| (self.responses[i], w))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total: f64 = pts.iter().map(|p| p.1).sum();
        levels
            .iter()
            .map(|&tau| {
                let target = tau * total;
                let mut cum = 0.0;
                for &(v, w) in &pts {
                    cum += w;
                    // relative slack absorbs rounding in the weight sums
                    if cum >= target * (1.0 - 1e-12) {
                        return v;
                    }
                }
                pts.last().map(|p| p.0).unwrap_or(f64::NAN)
            })
            .collect()
    }
}

pub fn qrf_predict(model: &ForestModel, x: &[f64], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if x.len() != model.n_features {
        return Err(Error::Shape(format!("{} features, expected {}", x.len(), model.n_features)));
    }
    Ok(model.predict_levels(x, &[tau])[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// One step size per stage from a golden-section search on the total loss.
    #[default]
    LineSearch,
    /// Each leaf moves to the quantile of the residuals it holds.
    LeafQuantile,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoostConfig {
    pub stages: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Upper end of the step-size bracket.
    pub max_step: f64,
    pub step_rule: StepRule,
}

impl Default for BoostConfig {
    fn default() -> Self {
        Self {
            stages: 50,
            learning_rate: 0.1,
            max_depth: 3,
            min_leaf: MIN_LEAF,
            max_step: 10.0,
            step_rule: StepRule::LineSearch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostStage {
    pub tree: Tree,
    pub leaf_values: Vec<f64>,
    /// Step size including shrinkage.
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostModel {
    pub tau: f64,
    pub f0: f64,
    pub stages: Vec<BoostStage>,
    /// Mean training check loss after each stage; entry 0 is for `f0` alone.
    pub train_loss: Vec<f64>,
    pub n_features: usize,
}

fn mean_check(y: &[f64], f: &[f64], tau: f64) -> f64 {
    y.iter().zip(f).map(|(a, b)| pinball(a - b, tau)).sum::<f64>() / y.len() as f64
}

/// Golden-section search for the minimizer of a convex function on [lo, hi].
fn golden_section(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - r * (hi - lo);
    let mut b = lo + r * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    for _ in 0..200 {
        if hi - lo <= 1e-10 * (1.0 + hi.abs()) {
            break;
        }
        if fa <= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - r * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + r * (hi - lo);
            fb = f(b);
        }
    }
    0.5 * (lo + hi)
}

pub fn qgb_fit(x: ArrayView2<f64>, y: &[f64], tau: f64, config: &BoostConfig) -> Result<BoostModel> {
    check_tau(tau)?;
    check_xy(x, y)?;
    if !(config.learning_rate > 0.0 && config.learning_rate <= 1.0) || !(config.max_step > 0.0) {
        return Err(Error::Config("boosting learning rate must lie in (0, 1]".into()));
    }
    let n = y.len();
    let f0 = empirical_quantile(y, tau)?;
    let mut fit = vec![f0; n];
    let mut train_loss = vec![mean_check(y, &fit, tau)];
    let params = TreeParams {
        max_depth: config.max_depth,
        min_leaf: config.min_leaf,
        mtry: None,
    };
    // all features are tried at every split, so the generator is never drawn from
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut stages = Vec::with_capacity(config.stages);
    for _ in 0..config.stages {
        let grad: Vec<f64> = y
            .iter()
            .zip(&fit)
            .map(|(a, b)| if a > b { tau } else { tau - 1.0 })
            .collect();
        let (tree, leaf_rows) = grow(x, &grad, (0..n).collect(), params, &mut rng);
        let mut leaf_of = vec![0usize; n];
        for (l, rows) in leaf_rows.iter().enumerate() {
            for &i in rows {
                leaf_of[i] = l;
            }
        }
        let (leaf_values, rho) = match config.step_rule {
            StepRule::LineSearch => {
                let values: Vec<f64> = leaf_rows
                    .iter()
                    .map(|rows| rows.iter().map(|&i| grad[i]).sum::<f64>() / rows.len() as f64)
                    .collect();
                let h: Vec<f64> = leaf_of.iter().map(|&l| values[l]).collect();
                let loss = |rho: f64| {
                    y.iter()
                        .zip(&fit)
                        .zip(&h)
                        .map(|((a, b), hv)| pinball(a - b - rho * hv, tau))
                        .sum::<f64>()
                };
                let mut rho = golden_section(0.0, config.max_step, loss);
                if loss(0.0) <= loss(rho) {
                    rho = 0.0;
                }
                if rho >= config.max_step * (1.0 - 1e-6) {
                    log::warn!("boosting line search hit the bracket end {}", config.max_step);
                }
                (values, rho)
            }
            StepRule::LeafQuantile => {
                let values = leaf_rows
                    .iter()
                    .map(|rows| {
                        let r: Vec<f64> = rows.iter().map(|&i| y[i] - fit[i]).collect();
                        empirical_quantile(&r, tau)
                    })
                    .collect::<Result<Vec<f64>>>()?;
                (values, 1.0)
            }
        };
        let step = config.learning_rate * rho;
        for i in 0..n {
            fit[i] += step * leaf_values[leaf_of[i]];
        }
        train_loss.push(mean_check(y, &fit, tau));
        stages.push(BoostStage {
            tree,
            leaf_values,
            step,
        });
    }
    Ok(BoostModel {
        tau,
        f0,
        stages,
        train_loss,
        n_features: x.ncols(),
    })
}

pub fn qgb_predict(model: &BoostModel, x: &[f64]) -> Result<f64> {
    if x.len() != model.n_features {
        return Err(Error::Shape(format!("{} features, expected {}", x.len(), model.n_features)));
    }
    Ok(model
        .stages
        .iter()
        .fold(model.f0, |acc, s| acc + s.step * s.leaf_values[s.tree.leaf(x)]))
}

/// One boosting model per level, predicted jointly.
pub fn qgb_fit_levels(
    x: ArrayView2<f64>,
    y: &[f64],
    levels: &QuantileLevels,
    config: &BoostConfig,
) -> Result<Vec<BoostModel>> {
    levels.iter().map(|tau| qgb_fit(x, y, tau, config)).collect()
}

/// Predictions of per-level models on every row of `x` (T x Q).
pub fn qgb_predict_rows(models: &[BoostModel], x: ArrayView2<f64>) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((x.nrows(), models.len()));
    for (t, row) in x.rows().into_iter().enumerate() {
        let r = row.to_vec();
        for (q, m) in models.iter().enumerate() {
            out[[t, q]] = qgb_predict(m, &r)?;
        }
    }
    Ok(out)
}

/// Forest quantiles at every level for every row of `x` (T x Q).
pub fn qrf_predict_rows(model: &ForestModel, x: ArrayView2<f64>, levels: &QuantileLevels) -> Result<Array2<f64>> {
    if x.ncols() != model.n_features {
        return Err(Error::Shape(format!("{} features, expected {}", x.ncols(), model.n_features)));
    }
    let mut out = Array2::zeros((x.nrows(), levels.len()));
    for (t, row) in x.rows().into_iter().enumerate() {
        let v = model.predict_levels(&row.to_vec(), levels.as_slice());
        out.row_mut(t).iter_mut().zip(v).for_each(|(d, s)| *d = s);
    }
    Ok(out)
}
