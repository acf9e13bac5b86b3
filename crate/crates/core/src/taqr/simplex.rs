//! Simplex machinery for the quantile-regression LP
//!
//! ```text
//! min  tau * 1'r+ + (1 - tau) * 1'r-   s.t.  X beta + r+ - r- = y,  r+, r- >= 0
//! ```
//!
//! A vertex is identified by `ka` basic observations whose residuals are
//! zero (`ka` = number of active columns). Nonbasic observations carry a
//! residual sign; observations sitting exactly on the fit keep the sign
//! they were last assigned, which is what makes degenerate pivots well
//! defined. Moving off a vertex releases one basic observation upwards or
//! downwards; the ratio test walks the residual breakpoints along that
//! edge until the directional derivative turns nonnegative, and the
//! observation at that breakpoint enters the basis.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative magnitude below which a column or pivot is treated as zero.
pub(crate) const PIVOT_TOL: f64 = 1e-10;
/// Relative tolerance under which residuals count as interpolated.
pub(crate) const INTERP_TOL: f64 = 1e-8;
/// Reduced costs above `-OPT_TOL` are treated as nonnegative.
const OPT_TOL: f64 = 1e-9;
/// Ratio-test ties within this distance switch pricing to Bland's rule.
const TIE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sign {
    Pos,
    Neg,
}

impl Sign {
    fn flip(self) -> Self {
        match self {
            Sign::Pos => Sign::Neg,
            Sign::Neg => Sign::Pos,
        }
    }

    #[inline]
    fn psi(self, tau: f64) -> f64 {
        match self {
            Sign::Pos => tau,
            Sign::Neg => tau - 1.0,
        }
    }
}

/// One observation of the regression window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRow {
    /// Monotone arrival index; the identity used by Bland's rule.
    pub id: u64,
    pub x: Vec<f64>,
    pub y: f64,
    pub sign: Sign,
}

/// Pricing rule for choosing the edge to move along.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pricing {
    Dantzig,
    Bland,
}

/// Edge direction: the released basic residual becomes positive (`Up`)
/// or negative (`Down`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dir {
    Up,
    Down,
}

pub(crate) struct Vertex<'a> {
    pub rows: &'a mut VecDeque<WindowRow>,
    pub tau: f64,
    ka: usize,
    /// Active design columns, row-major `n x ka`.
    xa: Vec<f64>,
    /// Largest absolute entry of each active design row.
    xmax: Vec<f64>,
    ys: Vec<f64>,
    ids: Vec<u64>,
    signs: Vec<Sign>,
    /// Window positions of the basic observations.
    pub basis: Vec<usize>,
    is_basic: Vec<bool>,
    /// Inverse of the basis matrix, row-major `ka x ka`; column `j` is the
    /// coefficient direction that moves basic residual `j` alone.
    binv: Vec<f64>,
    pub beta: Vec<f64>,
    pub resid: Vec<f64>,
    g: Vec<f64>,
    pub tol: f64,
    pub pivots: usize,
    /// Pivots applied as low-rank updates since the last refactorization.
    stale: usize,
}

/// Outcome of a ratio test along one edge.
struct EdgeStep {
    entering: usize,
    length: f64,
    crossed: Vec<usize>,
    tie: bool,
    rates: Vec<f64>,
}

/// Breakpoint candidate ordered by (step length, arrival id).
struct Breakpoint {
    t: f64,
    id: u64,
    pos: usize,
    mag: f64,
}

impl PartialEq for Breakpoint {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == std::cmp::Ordering::Equal
    }
}

impl Eq for Breakpoint {}

impl PartialOrd for Breakpoint {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Breakpoint {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // reversed so the max-heap pops the shortest step first
        other.t.total_cmp(&self.t).then(other.id.cmp(&self.id))
    }
}

/// Low-rank updates between refactorizations.
const REFRESH_EVERY: usize = 32;

impl<'a> Vertex<'a> {
    pub fn new(
        rows: &'a mut VecDeque<WindowRow>,
        active: &[usize],
        tau: f64,
        basis: Vec<usize>,
    ) -> Result<Self> {
        let n = rows.len();
        let ka = active.len();
        let ymax = rows.iter().fold(0.0f64, |m, r| m.max(r.y.abs()));
        let mut xa = Vec::with_capacity(n * ka);
        for r in rows.iter() {
            xa.extend(active.iter().map(|&c| r.x[c]));
        }
        let xmax = xa
            .chunks_exact(ka.max(1))
            .map(|r| r.iter().fold(0.0f64, |m, v| m.max(v.abs())))
            .collect();
        let ys = rows.iter().map(|r| r.y).collect();
        let ids = rows.iter().map(|r| r.id).collect();
        let signs = rows.iter().map(|r| r.sign).collect();
        let mut is_basic = vec![false; n];
        for &p in &basis {
            is_basic[p] = true;
        }
        let mut v = Self {
            rows,
            tau,
            ka,
            xa,
            xmax,
            ys,
            ids,
            signs,
            basis,
            is_basic,
            binv: vec![0.0; ka * ka],
            beta: vec![0.0; ka],
            resid: vec![0.0; n],
            g: vec![0.0; ka],
            tol: INTERP_TOL * (1.0 + ymax),
            pivots: 0,
            stale: 0,
        };
        v.refresh()?;
        Ok(v)
    }

    #[inline]
    fn row(&self, pos: usize) -> &[f64] {
        &self.xa[pos * self.ka..(pos + 1) * self.ka]
    }

    pub fn id(&self, pos: usize) -> u64 {
        self.ids[pos]
    }

    pub fn set_sign(&mut self, pos: usize, sign: Sign) {
        self.signs[pos] = sign;
    }

    /// Refactorizes the basis and recomputes coefficients, residuals,
    /// signs and the nonbasic gradient from scratch.
    pub fn refresh(&mut self) -> Result<()> {
        let ka = self.ka;
        let mut b = vec![0.0; ka * ka];
        for (j, &p) in self.basis.iter().enumerate() {
            b[j * ka..(j + 1) * ka].copy_from_slice(self.row(p));
        }
        self.binv = invert(&b, ka).ok_or(Error::Rank)?;
        self.solve_beta();
        self.g.iter_mut().for_each(|v| *v = 0.0);
        for pos in 0..self.ys.len() {
            if self.is_basic[pos] {
                self.resid[pos] = 0.0;
                continue;
            }
            let x = &self.xa[pos * ka..(pos + 1) * ka];
            let fit = dot(x, &self.beta);
            let r = self.ys[pos] - fit;
            self.resid[pos] = r;
            let sign = if r > self.tol {
                Sign::Pos
            } else if r < -self.tol {
                Sign::Neg
            } else {
                self.signs[pos]
            };
            let psi = sign.psi(self.tau);
            for (gc, xc) in self.g.iter_mut().zip(x) {
                *gc += psi * xc;
            }
            self.signs[pos] = sign;
        }
        self.stale = 0;
        Ok(())
    }

    /// `beta = B^-1 y_B`.
    fn solve_beta(&mut self) {
        let ka = self.ka;
        for c in 0..ka {
            self.beta[c] = self
                .basis
                .iter()
                .enumerate()
                .map(|(j, &p)| self.binv[c * ka + j] * self.ys[p])
                .sum();
        }
    }

    /// `g' B^-1`, the gradient contribution of nonbasic rows along each edge.
    fn edge_gradient(&self) -> Vec<f64> {
        let ka = self.ka;
        let mut gd = vec![0.0; ka];
        for (c, gc) in self.g.iter().enumerate() {
            for (j, v) in gd.iter_mut().enumerate() {
                *v += gc * self.binv[c * ka + j];
            }
        }
        gd
    }

    fn edge_costs(&self, j: usize, gd: &[f64]) -> (f64, f64) {
        (self.tau + gd[j], 1.0 - self.tau - gd[j])
    }

    fn price(&self, pricing: Pricing) -> Option<(usize, Dir, f64)> {
        let gd = self.edge_gradient();
        let mut best: Option<(usize, Dir, f64)> = None;
        for j in 0..self.ka {
            let (up, down) = self.edge_costs(j, &gd);
            let (dir, cost) = if up <= down { (Dir::Up, up) } else { (Dir::Down, down) };
            if cost >= -OPT_TOL {
                continue;
            }
            let better = match (pricing, best) {
                (_, None) => true,
                (Pricing::Dantzig, Some((_, _, c))) => cost < c,
                (Pricing::Bland, Some((bj, _, _))) => self.ids[self.basis[j]] < self.ids[self.basis[bj]],
            };
            if better {
                best = Some((j, dir, cost));
            }
        }
        best
    }

    fn direction(&self, j: usize) -> Vec<f64> {
        (0..self.ka).map(|c| self.binv[c * self.ka + j]).collect()
    }

    /// Residual rates of change along edge `j` for every window row.
    fn edge_rates(&self, j: usize, dir: Dir) -> Vec<f64> {
        let s = if dir == Dir::Up { 1.0 } else { -1.0 };
        let d = self.direction(j);
        let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let tol = PIVOT_TOL * dmax;
        self.xa
            .chunks_exact(self.ka)
            .zip(&self.is_basic)
            .zip(&self.xmax)
            .map(|((x, &basic), &xmax)| {
                if basic {
                    return 0.0;
                }
                let a = dot(x, &d);
                if a.abs() <= tol * xmax {
                    0.0
                } else {
                    s * a
                }
            })
            .collect()
    }

    /// Walks breakpoints along edge `j` starting from directional derivative
    /// `slope` until it turns nonnegative.
    fn ratio_test(&self, j: usize, dir: Dir, mut slope: f64) -> Option<EdgeStep> {
        let rates = self.edge_rates(j, dir);
        let mut cands = Vec::new();
        for (pos, &a) in rates.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let r = self.resid[pos];
            let t = match self.signs[pos] {
                Sign::Pos if a < 0.0 => r.max(0.0) / -a,
                Sign::Neg if a > 0.0 => (-r).max(0.0) / a,
                _ => continue,
            };
            cands.push(Breakpoint {
                t,
                id: self.ids[pos],
                pos,
                mag: a.abs(),
            });
        }
        let mut heap = std::collections::BinaryHeap::from(cands);
        let mut crossed = Vec::new();
        let mut prev: Option<f64> = None;
        while let Some(b) = heap.pop() {
            slope += b.mag;
            if slope >= 0.0 {
                let near = |u: f64| (u - b.t).abs() <= TIE_TOL * (1.0 + b.t);
                let tie = heap.peek().is_some_and(|n| near(n.t)) || prev.is_some_and(near);
                return Some(EdgeStep {
                    entering: b.pos,
                    length: b.t,
                    crossed,
                    tie,
                    rates,
                });
            }
            crossed.push(b.pos);
            prev = Some(b.t);
        }
        None
    }

    /// Moves along edge `j` to the breakpoint found by the ratio test and
    /// swaps the entering observation into the basis.
    fn pivot(&mut self, j: usize, dir: Dir, step: EdgeStep) -> Result<()> {
        let ka = self.ka;
        let tau = self.tau;
        let leaving = self.basis[j];
        let entering = step.entering;
        let leave_sign = match dir {
            Dir::Up => Sign::Pos,
            Dir::Down => Sign::Neg,
        };
        self.pivots += 1;
        for &pos in &step.crossed {
            let old = self.signs[pos];
            let new = old.flip();
            let dpsi = new.psi(tau) - old.psi(tau);
            for c in 0..ka {
                self.g[c] += dpsi * self.xa[pos * ka + c];
            }
            self.signs[pos] = new;
        }
        let enter_psi = self.signs[entering].psi(tau);
        let leave_psi = leave_sign.psi(tau);
        for c in 0..ka {
            self.g[c] += leave_psi * self.xa[leaving * ka + c] - enter_psi * self.xa[entering * ka + c];
        }
        self.signs[leaving] = leave_sign;
        self.is_basic[leaving] = false;
        self.is_basic[entering] = true;
        self.basis[j] = entering;

        // u = x_e' B^-1; the new inverse is B^-1 - d (u - e_j)' / u_j
        let d = self.direction(j);
        let xe = self.row(entering).to_vec();
        let u: Vec<f64> = (0..ka)
            .map(|m| (0..ka).map(|c| xe[c] * self.binv[c * ka + m]).sum())
            .collect();
        let scale = xe.iter().fold(0.0f64, |m, v| m.max(v.abs())) * d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if self.stale + 1 >= REFRESH_EVERY || !(u[j].abs() > 1e-6 * scale) {
            return self.refresh();
        }
        for c in 0..ka {
            for m in 0..ka {
                let w = if m == j { u[m] - 1.0 } else { u[m] };
                self.binv[c * ka + m] -= d[c] * w / u[j];
            }
        }
        self.solve_beta();
        for (r, a) in self.resid.iter_mut().zip(&step.rates) {
            *r += step.length * a;
        }
        self.resid[entering] = 0.0;
        self.resid[leaving] = match dir {
            Dir::Up => step.length,
            Dir::Down => -step.length,
        };
        self.stale += 1;
        Ok(())
    }

    pub fn is_optimal(&self) -> bool {
        self.price(Pricing::Dantzig).is_none()
    }

    /// Runs pivots until optimal. Fails with `IterationCap` after `cap` pivots.
    pub fn optimize(&mut self, cap: usize) -> Result<()> {
        let mut pricing = Pricing::Dantzig;
        let start = self.pivots;
        loop {
            let Some((j, dir, cost)) = self.price(pricing) else {
                if self.stale == 0 {
                    break;
                }
                // confirm optimality on a fresh factorization
                self.refresh()?;
                continue;
            };
            if self.pivots - start >= cap {
                return Err(Error::IterationCap(cap));
            }
            let step = self.ratio_test(j, dir, cost).ok_or(Error::Rank)?;
            pricing = if step.tie || step.length <= self.tol {
                Pricing::Bland
            } else {
                Pricing::Dantzig
            };
            self.pivot(j, dir, step)?;
        }
        self.prefer_lower_intercept(cap)?;
        Ok(())
    }

    /// With a lone constant column the optimal set can be an interval;
    /// walk to its lower end so the fit is the lower empirical quantile.
    fn prefer_lower_intercept(&mut self, cap: usize) -> Result<()> {
        if self.ka != 1 || self.ys.is_empty() {
            return Ok(());
        }
        let x0 = self.xa[0];
        if x0 == 0.0 || self.xa.iter().any(|&v| v != x0) {
            return Ok(());
        }
        // beta = y_B / x0, so releasing the basic residual upwards lowers beta iff x0 > 0
        let dir = if x0 > 0.0 { Dir::Up } else { Dir::Down };
        for _ in 0..cap {
            let gd = self.edge_gradient();
            let (up, down) = self.edge_costs(0, &gd);
            let cost = if dir == Dir::Up { up } else { down };
            if cost.abs() > OPT_TOL {
                break;
            }
            match self.ratio_test(0, dir, cost.min(0.0)) {
                Some(step) => self.pivot(0, dir, step)?,
                None => break,
            }
        }
        if self.stale > 0 {
            self.refresh()?;
        }
        Ok(())
    }

    /// Moves basic position `j` out of the basis ahead of its observation
    /// being evicted. The edge costs exclude that observation's own term.
    pub fn forced_exchange(&mut self, j: usize) -> Result<()> {
        let gd = self.edge_gradient();
        // without the removed row the basic term drops out of both edge costs
        let up = gd[j];
        let down = -gd[j];
        let mut order = [(Dir::Up, up), (Dir::Down, down)];
        if down < up {
            order.swap(0, 1);
        }
        for (dir, cost) in order {
            if cost > OPT_TOL {
                continue;
            }
            if let Some(step) = self.ratio_test(j, dir, cost.min(0.0)) {
                self.pivot(j, dir, step)?;
                return self.refresh();
            }
        }
        Err(Error::Rank)
    }

    pub fn objective(&self) -> f64 {
        self.resid
            .iter()
            .map(|&r| crate::quantile::pinball(r, self.tau))
            .sum()
    }
}

impl Drop for Vertex<'_> {
    fn drop(&mut self) {
        for (row, &s) in self.rows.iter_mut().zip(&self.signs) {
            row.sign = s;
        }
    }
}

/// Dot product with four independent accumulators.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut tail = 0.0;
    for i in 4 * chunks..n {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Gauss-Jordan inverse with partial pivoting; `None` when singular.
pub(crate) fn invert(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut m = a.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    let scale = a.iter().fold(0.0f64, |s, v| s.max(v.abs()));
    if scale == 0.0 {
        return if n == 0 { Some(inv) } else { None };
    }
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&r1, &r2| m[r1 * n + col].abs().total_cmp(&m[r2 * n + col].abs()))?;
        if m[piv * n + col].abs() <= 1e-14 * scale {
            return None;
        }
        if piv != col {
            for c in 0..n {
                m.swap(piv * n + c, col * n + c);
                inv.swap(piv * n + c, col * n + c);
            }
        }
        let p = m[col * n + col];
        for c in 0..n {
            m[col * n + c] /= p;
            inv[col * n + c] /= p;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m[r * n + col];
            if f == 0.0 {
                continue;
            }
            for c in 0..n {
                m[r * n + c] -= f * m[col * n + c];
                inv[r * n + c] -= f * inv[col * n + c];
            }
        }
    }
    Some(inv)
}

/// Columns that are linearly independent of the earlier ones, by
/// Gram-Schmidt with column pivoting on the window's design matrix.
pub(crate) fn independent_columns(rows: &VecDeque<WindowRow>, k: usize) -> Vec<usize> {
    let n = rows.len();
    let mut cols: Vec<Vec<f64>> = (0..k).map(|c| rows.iter().map(|r| r.x[c]).collect()).collect();
    let norms0: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
    let mut remaining: Vec<usize> = (0..k).filter(|&c| norms0[c] > 0.0).collect();
    let mut chosen = Vec::new();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while !remaining.is_empty() && chosen.len() < n {
        // pick the column with the largest relative remaining norm
        let (idx, rel) = remaining
            .iter()
            .enumerate()
            .map(|(i, &c)| (i, norm(&cols[c]) / norms0[c]))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .unwrap();
        if rel <= PIVOT_TOL {
            break;
        }
        let c = remaining.remove(idx);
        let nv = norm(&cols[c]);
        let q: Vec<f64> = cols[c].iter().map(|v| v / nv).collect();
        for &o in &remaining {
            let dot: f64 = q.iter().zip(&cols[o]).map(|(a, b)| a * b).sum();
            cols[o].iter_mut().zip(&q).for_each(|(v, qv)| *v -= dot * qv);
        }
        basis.push(q);
        chosen.push(c);
    }
    chosen.sort_unstable();
    chosen
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Picks `active.len()` rows with a well-conditioned basis matrix,
/// preferring rows whose response lies near the target quantile.
pub(crate) fn initial_basis(
    rows: &VecDeque<WindowRow>,
    active: &[usize],
    tau: f64,
) -> Result<Vec<usize>> {
    let ka = active.len();
    let n = rows.len();
    let mut ys: Vec<f64> = rows.iter().map(|r| r.y).collect();
    ys.sort_by(f64::total_cmp);
    let q = ys[crate::quantile::lower_quantile_index(n, tau)];
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        (rows[a].y - q)
            .abs()
            .total_cmp(&(rows[b].y - q).abs())
            .then(rows[a].id.cmp(&rows[b].id))
    });
    let mut chosen = Vec::with_capacity(ka);
    let mut ortho: Vec<Vec<f64>> = Vec::with_capacity(ka);
    for pass_tol in [1e-3, PIVOT_TOL] {
        for &pos in &order {
            if chosen.len() == ka {
                break;
            }
            if chosen.contains(&pos) {
                continue;
            }
            let v: Vec<f64> = active.iter().map(|&c| rows[pos].x[c]).collect();
            let n0 = norm(&v);
            if n0 == 0.0 {
                continue;
            }
            let mut w = v.clone();
            for qv in &ortho {
                let dot: f64 = qv.iter().zip(&w).map(|(a, b)| a * b).sum();
                w.iter_mut().zip(qv).for_each(|(x, qx)| *x -= dot * qx);
            }
            let nw = norm(&w);
            if nw > pass_tol * n0 {
                ortho.push(w.iter().map(|x| x / nw).collect());
                chosen.push(pos);
            }
        }
        if chosen.len() == ka {
            break;
        }
    }
    if chosen.len() < ka {
        return Err(Error::Rank);
    }
    Ok(chosen)
}
