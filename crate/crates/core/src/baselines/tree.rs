//! Regression trees grown by variance reduction.

use ndarray::ArrayView2;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Node {
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
    pub n_leaves: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Candidate features per split; `None` tries all of them.
    pub mtry: Option<usize>,
}

impl Tree {
    /// Index of the leaf that `x` falls into.
    pub fn leaf(&self, x: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf(l) => return l,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, left).max(go(nodes, right)),
            }
        }
        go(&self.nodes, 0)
    }
}

struct Builder<'a, R> {
    x: ArrayView2<'a, f64>,
    target: &'a [f64],
    params: TreeParams,
    rng: &'a mut R,
    nodes: Vec<Node>,
    leaves: Vec<Vec<usize>>,
}

/// Grows a tree on `rows` (repeats allowed, as from a bootstrap). Returns
/// the tree and, per leaf, the rows that reached it.
pub fn grow<R: Rng>(
    x: ArrayView2<f64>,
    target: &[f64],
    rows: Vec<usize>,
    params: TreeParams,
    rng: &mut R,
) -> (Tree, Vec<Vec<usize>>) {
    let mut b = Builder {
        x,
        target,
        params,
        rng,
        nodes: Vec::new(),
        leaves: Vec::new(),
    };
    b.node(rows, 0);
    let n_leaves = b.leaves.len();
    (
        Tree {
            nodes: b.nodes,
            n_leaves,
        },
        b.leaves,
    )
}

impl<R: Rng> Builder<'_, R> {
    fn node(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf(usize::MAX));
        match self.best_split(&rows, depth) {
            Some((feature, threshold)) => {
                let (l, r): (Vec<usize>, Vec<usize>) =
                    rows.into_iter().partition(|&i| self.x[[i, feature]] <= threshold);
                let left = self.node(l, depth + 1);
                let right = self.node(r, depth + 1);
                self.nodes[id] = Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                };
            }
            None => {
                self.nodes[id] = Node::Leaf(self.leaves.len());
                self.leaves.push(rows);
            }
        }
        id
    }

    fn best_split(&mut self, rows: &[usize], depth: usize) -> Option<(usize, f64)> {
        let n = rows.len();
        let min_leaf = self.params.min_leaf.max(1);
        if depth >= self.params.max_depth || n < 2 * min_leaf {
            return None;
        }
        let first = self.target[rows[0]];
        if rows.iter().all(|&i| self.target[i] == first) {
            return None;
        }
        let p = self.x.ncols();
        let features: Vec<usize> = match self.params.mtry {
            Some(m) if m < p => {
                let mut f = sample(self.rng, p, m).into_vec();
                f.sort_unstable();
                f
            }
            _ => (0..p).collect(),
        };
        let total: f64 = rows.iter().map(|&i| self.target[i]).sum();
        let parent = total * total / n as f64;
        let mut best: Option<(f64, usize, f64)> = None;
        let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(n);
        for f in features {
            pairs.clear();
            pairs.extend(rows.iter().map(|&i| (self.x[[i, f]], self.target[i])));
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left = 0.0;
            for k in 0..n - min_leaf {
                left += pairs[k].1;
                let nl = k + 1;
                if nl < min_leaf || pairs[k].0 == pairs[k + 1].0 {
                    continue;
                }
                let right = total - left;
                let gain = left * left / nl as f64 + right * right / (n - nl) as f64;
                if best.is_none_or(|(g, _, _)| gain > g) {
                    let mid = 0.5 * (pairs[k].0 + pairs[k + 1].0);
                    // guard against the midpoint rounding onto the right value
                    let thr = if mid < pairs[k + 1].0 { mid } else { pairs[k].0 };
                    best = Some((gain, f, thr));
                }
            }
        }
        let (gain, f, thr) = best?;
        (gain > parent * (1.0 + 1e-12) + 1e-12).then_some((f, thr))
    }
}
