//! L2 projections onto cones of unimodal quantile functions and the
//! worst-case bounds built on them.
//!
//! A cone member is continuous, non-decreasing, concave on (0, ξ) and convex
//! on (ξ, 1). Projections are computed over piecewise-linear functions on a
//! grid that contains ξ and every breakpoint of the input, by a primal-dual
//! interior-point method on the slope-ordering constraints. The grid is then
//! refined around the kinks of the solution.

use crate::distortion::{rho, DistortionFunction, WeightFunction, WeightPiece};
use crate::error::{Error, Result};
use crate::numerics::{golden_min, Penta};
use crate::reference::{clustered_grid, LinearSegment, QuantileFunction};
use crate::worstcase::{BoundResult, MomentWassersteinSet, Regime};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

const BASE_CELLS: usize = 4096;
const REFINE_ROUNDS: usize = 2;
const REFINE_SPLIT: usize = 16;
const REFERENCE_POINTS: usize = 4097;
const NODE_GAP: f64 = 1e-13;
const LAMBDA_RTOL: f64 = 1e-12;
const CHEBYSHEV_POINTS: usize = 33;

/// Inflection constraint: a fixed ξ or any ξ in an interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum UnimodalCone {
    Fixed { xi: f64 },
    Interval { xi1: f64, xi2: f64 },
}

impl UnimodalCone {
    pub fn fixed(xi: f64) -> Result<Self> {
        check_xi(xi)?;
        Ok(UnimodalCone::Fixed { xi })
    }

    pub fn interval(xi1: f64, xi2: f64) -> Result<Self> {
        check_xi(xi1)?;
        check_xi(xi2)?;
        if xi1 > xi2 {
            return Err(Error::Param(format!("inflection interval needs xi1 <= xi2, got [{xi1}, {xi2}]")));
        }
        Ok(UnimodalCone::Interval { xi1, xi2 })
    }

    /// Whether the piecewise-linear function through `(x, v)` belongs to the cone.
    pub fn contains_pl(&self, x: &[f64], v: &[f64], tol: f64) -> bool {
        match *self {
            UnimodalCone::Fixed { xi } => pl_in_cone(x, v, xi, tol),
            UnimodalCone::Interval { xi1, xi2 } => {
                let mut cands: Vec<f64> = x.iter().copied().filter(|&t| t >= xi1 && t <= xi2).collect();
                cands.push(xi1);
                cands.push(xi2);
                cands.into_iter().any(|xi| pl_in_cone(x, v, xi, tol))
            }
        }
    }
}

fn check_xi(xi: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&xi) {
        return Err(Error::Param(format!("inflection point must lie in [0,1], got {xi}")));
    }
    Ok(())
}

fn pl_in_cone(x: &[f64], v: &[f64], xi: f64, tol: f64) -> bool {
    let s: Vec<f64> = (0..x.len() - 1).map(|j| (v[j + 1] - v[j]) / (x[j + 1] - x[j])).collect();
    let scale = s.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let t = tol * (1.0 + scale);
    if s.iter().any(|&a| a < -t) {
        return false;
    }
    for j in 1..s.len() {
        if x[j] < xi && s[j] > s[j - 1] + t {
            return false;
        }
        if x[j] > xi && s[j] < s[j - 1] - t {
            return false;
        }
    }
    true
}

fn weight_in_cone(gamma: &WeightFunction, xi: f64) -> bool {
    let p = gamma.pieces();
    let scale = p.iter().fold(0.0f64, |m, w| m.max(w.value(w.lo).abs()).max(w.value(w.hi).abs()));
    let tol = 1e-12 * (1.0 + scale);
    if p.iter().any(|w| w.b < -tol) {
        return false;
    }
    for w in p.windows(2) {
        let x = w[0].hi;
        if (w[0].value(x) - w[1].value(x)).abs() > tol {
            return false;
        }
        if x < xi && w[1].b > w[0].b + tol {
            return false;
        }
        if x > xi && w[1].b < w[0].b - tol {
            return false;
        }
    }
    true
}

fn quantile_in_cone(q: &QuantileFunction, xi: f64) -> bool {
    if !q.breakpoints().is_empty() && q.kind_name() != "grid" {
        return false;
    }
    let mut u: Vec<f64> = clustered_grid(1025, 2.0)
        .into_iter()
        .filter(|&t| t > 1e-9 && t < 1.0 - 1e-9)
        .collect();
    if xi > 1e-9 && xi < 1.0 - 1e-9 {
        u.push(xi);
    }
    u.extend(q.breakpoints().into_iter().filter(|&t| t > 1e-9 && t < 1.0 - 1e-9));
    u.sort_by(f64::total_cmp);
    u.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    let v: Vec<f64> = u.iter().map(|&t| q.value(t)).collect();
    pl_in_cone(&u, &v, xi, 1e-9)
}

/// A slope change of the projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConeKink {
    pub at: f64,
    pub slope_left: f64,
    pub slope_right: f64,
}

/// Error control for a projection computed from an n-step approximation of γ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepApproximation {
    pub steps: usize,
    /// ‖γₙ − γ‖.
    pub step_error: f64,
    /// Bound on ‖γ↑ₙ − γ↑‖.
    pub projection_bound: f64,
    /// Bound on the error of the worst-case value, per unit σ.
    pub rho_bound_per_sigma: f64,
    /// Bound on ‖hₙ − h‖ of the extremal quantiles, per unit σ.
    pub h_bound_per_sigma: f64,
}

/// Piecewise-linear projection of a weight function onto a unimodal cone.
#[derive(Debug, Clone, Serialize)]
pub struct ConeProjection {
    pub xi: f64,
    #[serde(skip)]
    pub nodes: Vec<f64>,
    #[serde(skip)]
    pub values: Vec<f64>,
    pub a_hat: f64,
    pub b_hat: f64,
    pub kinks: Vec<ConeKink>,
    /// ‖γ − projection‖.
    pub residual: f64,
    /// ⟨γ − projection, projection⟩ and ⟨γ − projection, 1⟩.
    pub orthogonality: [f64; 2],
    pub iterations: usize,
    pub degenerate: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub approximation: Option<StepApproximation>,
}

impl ConeProjection {
    pub fn value(&self, u: f64) -> f64 {
        let x = &self.nodes;
        let j = x.partition_point(|&t| t <= u).clamp(1, x.len() - 1) - 1;
        let h = x[j + 1] - x[j];
        let w = ((u - x[j]) / h).clamp(0.0, 1.0);
        self.values[j] * (1.0 - w) + self.values[j + 1] * w
    }

    /// The projection as a (continuous) piecewise-affine weight function.
    pub fn weight(&self) -> Result<WeightFunction> {
        let pieces = pl_segments(&self.nodes, &self.values)
            .into_iter()
            .map(|(lo, hi, c0, c1)| WeightPiece { lo, hi, a: c0, b: c1 })
            .collect();
        WeightFunction::from_pieces(pieces)
    }

    /// μ + σ (projection − â)/b̂.
    pub fn quantile(&self, mu: f64, sigma: f64) -> Result<QuantileFunction> {
        if self.degenerate {
            return Err(Error::Regime("projection is constant; no standardized quantile exists".into()));
        }
        pl_quantile(&self.nodes, &self.values, self.a_hat, self.b_hat, mu, sigma)
    }

    pub fn is_in_cone(&self, tol: f64) -> bool {
        pl_in_cone(&self.nodes, &self.values, self.xi, tol)
    }

    /// Write `u, gamma, projected` rows at the projection nodes.
    pub fn write_csv(&self, path: &Path, gamma: &WeightFunction) -> Result<()> {
        let io = |e: csv::Error| Error::Numeric(e.to_string());
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        w.write_record(["u", "gamma", "projected"]).map_err(io)?;
        for (&u, &p) in self.nodes.iter().zip(&self.values) {
            w.write_record([format!("{u:.12e}"), format!("{:.12e}", gamma.value(u)), format!("{p:.12e}")])
                .map_err(io)?;
        }
        w.flush().map_err(|e| Error::Numeric(e.to_string()))?;
        Ok(())
    }
}

fn pl_segments(x: &[f64], v: &[f64]) -> Vec<(f64, f64, f64, f64)> {
    let mut out: Vec<(f64, f64, f64, f64)> = Vec::with_capacity(x.len());
    for j in 0..x.len() - 1 {
        let c1 = (v[j + 1] - v[j]) / (x[j + 1] - x[j]);
        let c0 = v[j] - c1 * x[j];
        out.push((x[j], x[j + 1], c0, c1));
    }
    out
}

fn pl_quantile(x: &[f64], v: &[f64], a: f64, b: f64, mu: f64, sigma: f64) -> Result<QuantileFunction> {
    let k = sigma / b;
    let segments = pl_segments(x, v)
        .into_iter()
        .map(|(lo, hi, c0, c1)| LinearSegment { lo, hi, c0: mu + k * (c0 - a), c1: k * c1, c2: 0.0 })
        .collect();
    QuantileFunction::piecewise(None, segments)
}

// ---------------------------------------------------------------------------
// grid least squares over the cone

struct ConeGrid {
    x: Vec<f64>,
    k: usize,
}

impl ConeGrid {
    fn index_of(&self, t: f64) -> Option<usize> {
        let i = self.x.partition_point(|&a| a < t);
        (i < self.x.len() && self.x[i] == t).then_some(i)
    }
}

fn build_grid(mut pts: Vec<(f64, bool)>, xi: f64) -> ConeGrid {
    pts.push((0.0, true));
    pts.push((1.0, true));
    pts.push((xi, true));
    pts.retain(|p| (0.0..=1.0).contains(&p.0));
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut kept: Vec<(f64, bool)> = Vec::with_capacity(pts.len());
    for p in pts {
        match kept.last_mut() {
            Some(last) if p.0 - last.0 < NODE_GAP => {
                if p.1 && !last.1 {
                    *last = p;
                }
            }
            _ => kept.push(p),
        }
    }
    let x: Vec<f64> = kept.into_iter().map(|p| p.0).collect();
    let k = x.iter().enumerate().min_by(|a, b| (a.1 - xi).abs().total_cmp(&(b.1 - xi).abs())).unwrap().0;
    ConeGrid { x, k }
}

fn uniform_points(cells: usize) -> Vec<(f64, bool)> {
    (1..cells).map(|i| (i as f64 / cells as f64, false)).collect()
}

/// Per-cell moments `∫ f` and `∫ (u − x_j) f` of a target on the grid cells.
#[derive(Debug, Clone)]
struct Cells {
    i0: Vec<f64>,
    j1: Vec<f64>,
}

impl Cells {
    fn weight(w: &WeightFunction, x: &[f64]) -> Cells {
        let m = x.len() - 1;
        let mut i0 = vec![0.0; m];
        let mut j1 = vec![0.0; m];
        let pieces = w.pieces();
        let mut p = 0;
        for j in 0..m {
            let (l, r) = (x[j], x[j + 1]);
            while p < pieces.len() && pieces[p].hi <= l {
                p += 1;
            }
            let mut q = p;
            while q < pieces.len() && pieces[q].lo < r {
                let c = pieces[q].lo.max(l);
                let d = pieces[q].hi.min(r);
                if d > c {
                    let f = |u: f64| pieces[q].value(u);
                    let mid = 0.5 * (c + d);
                    let s = (d - c) / 6.0;
                    i0[j] += 0.5 * (d - c) * (f(c) + f(d));
                    j1[j] += s * (f(c) * (c - l) + 4.0 * f(mid) * (mid - l) + f(d) * (d - l));
                }
                q += 1;
            }
        }
        Cells { i0, j1 }
    }

    fn quantile(qf: &QuantileFunction, x: &[f64]) -> Cells {
        let m = x.len() - 1;
        let mut i0 = vec![0.0; m];
        let mut j1 = vec![0.0; m];
        for j in 0..m {
            let (l, r) = (x[j], x[j + 1]);
            i0[j] = qf.partial_unchecked(l, r);
            j1[j] = qf.partial_u_unchecked(l, r) - l * i0[j];
        }
        Cells { i0, j1 }
    }

    fn plus(&self, lambda: f64, other: &Cells) -> Cells {
        Cells {
            i0: self.i0.iter().zip(&other.i0).map(|(a, b)| a + lambda * b).collect(),
            j1: self.j1.iter().zip(&other.j1).map(|(a, b)| a + lambda * b).collect(),
        }
    }

    fn total(&self) -> f64 {
        self.i0.iter().sum()
    }

    /// ∫ f p for the piecewise-linear p with node values `p`.
    fn inner_pl(&self, x: &[f64], p: &[f64]) -> f64 {
        (0..self.i0.len()).map(|j| p[j] * self.i0[j] + (p[j + 1] - p[j]) * self.j1[j] / (x[j + 1] - x[j])).sum()
    }
}

/// Kink generators of the current fit: node indices with their coefficients.
#[derive(Debug, Clone, Default)]
struct Active {
    left: Vec<(usize, f64)>,
    right: Vec<(usize, f64)>,
}

struct Fit {
    v: Vec<f64>,
    active: Active,
    iterations: usize,
}

/// Least squares over `c + Σ θ min(u, x_l) + Σ θ (u − x_r)₊` with free θ,
/// solved as a piecewise-linear fit on the kink nodes.
fn reduced_fit(x: &[f64], cells: &Cells, left: &[usize], right: &[usize]) -> Option<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let m = x.len() - 1;
    let mut z: Vec<usize> = Vec::with_capacity(left.len() + right.len() + 2);
    z.push(0);
    z.extend_from_slice(left);
    z.extend_from_slice(right);
    z.push(m);
    z.dedup();
    let pos = |node: usize| z.binary_search(&node).unwrap();
    let tie = match (left.last(), right.first()) {
        (None, None) => {
            let mean = cells.total();
            return Some((vec![mean; m + 1], vec![], vec![]));
        }
        (None, Some(&r)) => (r > 0).then_some(0),
        (Some(&l), None) => (l < m).then(|| pos(l)),
        (Some(&l), Some(&r)) => (l < r).then(|| pos(l)),
    };
    let dof: Vec<usize> = (0..z.len()).map(|i| if tie.is_some_and(|t| i > t) { i - 1 } else { i }).collect();
    let nd = dof[z.len() - 1] + 1;
    let mut mm = Penta::zeros(nd);
    let mut rhs = vec![0.0; nd];
    for i in 0..z.len() - 1 {
        let (a, b) = (z[i], z[i + 1]);
        let (xa, xb) = (x[a], x[b]);
        let h = xb - xa;
        let (da, db) = (dof[i], dof[i + 1]);
        let mut la = 0.0;
        let mut lb = 0.0;
        for j in a..b {
            la += ((xb - x[j]) * cells.i0[j] - cells.j1[j]) / h;
            lb += ((x[j] - xa) * cells.i0[j] + cells.j1[j]) / h;
        }
        rhs[da] += la;
        rhs[db] += lb;
        if da == db {
            mm.d0[da] += h;
        } else {
            mm.d0[da] += h / 3.0;
            mm.d0[db] += h / 3.0;
            mm.d1[da] += h / 6.0;
        }
    }
    let sol = mm.solve(&rhs)?;
    let zv: Vec<f64> = (0..z.len()).map(|i| sol[dof[i]]).collect();
    let slope = |i: usize| (zv[i + 1] - zv[i]) / (x[z[i + 1]] - x[z[i]]);
    let mut v = vec![0.0; m + 1];
    for i in 0..z.len() - 1 {
        let (a, b) = (z[i], z[i + 1]);
        let s = slope(i);
        for (j, vj) in v.iter_mut().enumerate().take(b).skip(a) {
            *vj = zv[i] + s * (x[j] - x[a]);
        }
    }
    v[m] = zv[z.len() - 1];
    let tl = (0..left.len())
        .map(|p| {
            let at = pos(left[p]);
            if p + 1 < left.len() {
                slope(at - 1) - slope(at)
            } else {
                slope(at - 1)
            }
        })
        .collect();
    let tr = (0..right.len())
        .map(|p| {
            let at = pos(right[p]);
            if p == 0 {
                slope(at)
            } else {
                slope(at) - slope(at - 1)
            }
        })
        .collect();
    Some((v, tl, tr))
}

/// Gradients ⟨f − p, min(u, x_j)⟩ and ⟨f − p, (u − x_j)₊⟩ at every node.
fn dual_gradients(x: &[f64], cells: &Cells, v: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let m = x.len() - 1;
    let mut ri0 = vec![0.0; m];
    let mut rj1 = vec![0.0; m];
    for j in 0..m {
        let h = x[j + 1] - x[j];
        ri0[j] = cells.i0[j] - 0.5 * h * (v[j] + v[j + 1]);
        rj1[j] = cells.j1[j] - h * h * (v[j] + 2.0 * v[j + 1]) / 6.0;
    }
    let mut wl = vec![0.0; m + 1];
    let (mut tl, mut c) = (0.0, 0.0);
    for j in 0..m {
        let h = x[j + 1] - x[j];
        tl += h * c + (h * ri0[j] - rj1[j]);
        c += ri0[j];
        wl[j + 1] = -tl;
    }
    let mut wr = vec![0.0; m + 1];
    let (mut tr, mut q) = (0.0, 0.0);
    for j in (0..m).rev() {
        let h = x[j + 1] - x[j];
        tr += h * q + rj1[j];
        q += ri0[j];
        wr[j] = tr;
    }
    (wl, wr)
}

fn sorted_keys(map: &[(usize, f64)]) -> Vec<usize> {
    map.iter().map(|p| p.0).collect()
}

/// Lawson-Hanson active-set iteration over the kink generators of the grid.
fn cone_lsq(grid: &ConeGrid, cells: &Cells, scale: f64, warm: Option<&Active>) -> Result<Fit> {
    let x = &grid.x;
    let m = x.len() - 1;
    let k = grid.k;
    let tol = 1e-12 * scale.max(1e-300);
    let fail = || Error::Numeric("cone projection: singular reduced system".into());
    let mut left: Vec<(usize, f64)> = Vec::new();
    let mut right: Vec<(usize, f64)> = Vec::new();
    if let Some(w) = warm {
        left = w.left.iter().filter(|p| p.0 >= 1 && p.0 <= k).map(|&(i, _)| (i, 1.0)).collect();
        right = w.right.iter().filter(|p| p.0 >= k && p.0 < m).map(|&(i, _)| (i, 1.0)).collect();
    }
    let mut iterations = 0;
    let (mut v, tl, tr) = loop {
        iterations += 1;
        let (v, tl, tr) = reduced_fit(x, cells, &sorted_keys(&left), &sorted_keys(&right)).ok_or_else(fail)?;
        if tl.iter().chain(&tr).all(|&t| t > 0.0) {
            break (v, tl, tr);
        }
        left = left.iter().zip(&tl).filter(|p| *p.1 > 0.0).map(|p| (p.0 .0, *p.1)).collect();
        right = right.iter().zip(&tr).filter(|p| *p.1 > 0.0).map(|p| (p.0 .0, *p.1)).collect();
    };
    for (p, t) in left.iter_mut().zip(tl) {
        p.1 = t;
    }
    for (p, t) in right.iter_mut().zip(tr) {
        p.1 = t;
    }

    let max_outer = 8 * (m + 10);
    let mut converged = false;
    for _ in 0..max_outer {
        let (wl, wr) = dual_gradients(x, cells, &v);
        let mut best: Option<(bool, usize)> = None;
        let mut best_w = tol;
        let in_left = |i: usize, l: &[(usize, f64)]| l.binary_search_by_key(&i, |p| p.0).is_ok();
        for j in 1..=k {
            if wl[j] > best_w && !in_left(j, &left) {
                best_w = wl[j];
                best = Some((true, j));
            }
        }
        for j in k..m {
            if wr[j] > best_w && !in_left(j, &right) {
                best_w = wr[j];
                best = Some((false, j));
            }
        }
        let Some((is_left, j)) = best else {
            converged = true;
            break;
        };
        {
            let set = if is_left { &mut left } else { &mut right };
            let pos = set.partition_point(|p| p.0 < j);
            set.insert(pos, (j, 0.0));
        }
        let mut first = true;
        loop {
            iterations += 1;
            let (nv, tl, tr) = reduced_fit(x, cells, &sorted_keys(&left), &sorted_keys(&right)).ok_or_else(fail)?;
            if tl.iter().chain(&tr).all(|&t| t > 0.0) {
                for (p, t) in left.iter_mut().zip(tl) {
                    p.1 = t;
                }
                for (p, t) in right.iter_mut().zip(tr) {
                    p.1 = t;
                }
                v = nv;
                break;
            }
            let mut alpha = 1.0f64;
            for (p, &t) in left.iter().zip(&tl).chain(right.iter().zip(&tr)) {
                if t <= 0.0 {
                    let d = p.1 - t;
                    alpha = alpha.min(if d > 0.0 { p.1 / d } else { 0.0 });
                }
            }
            let step = |set: &mut Vec<(usize, f64)>, t: &[f64]| {
                for (p, &tz) in set.iter_mut().zip(t) {
                    p.1 += alpha * (tz - p.1);
                }
            };
            step(&mut left, &tl);
            step(&mut right, &tr);
            let before = left.len() + right.len();
            let floor = 1e-15 * left.iter().chain(&right).fold(0.0f64, |a, p| a.max(p.1.abs()));
            let newly = |p: &(usize, f64)| is_left_match(p, j, is_left, true);
            let dropped_new = left.iter().any(|p| newly(p) && p.1 <= floor)
                || right.iter().any(|p| is_left_match(p, j, is_left, false) && p.1 <= floor);
            left.retain(|p| p.1 > floor);
            right.retain(|p| p.1 > floor);
            if first && dropped_new && left.len() + right.len() + 1 == before {
                converged = true;
                break;
            }
            first = false;
        }
        if converged {
            let (nv, tl, tr) = reduced_fit(x, cells, &sorted_keys(&left), &sorted_keys(&right)).ok_or_else(fail)?;
            for (p, t) in left.iter_mut().zip(tl) {
                p.1 = t;
            }
            for (p, t) in right.iter_mut().zip(tr) {
                p.1 = t;
            }
            v = nv;
            break;
        }
    }
    if !converged {
        return Err(Error::Numeric(format!("cone projection did not converge after {iterations} active-set steps")));
    }
    Ok(Fit { v, active: Active { left, right }, iterations })
}

fn is_left_match(p: &(usize, f64), j: usize, is_left: bool, side_left: bool) -> bool {
    p.0 == j && is_left == side_left
}

/// Exact moments of a target: `∫ f` and `Var f`.
#[derive(Debug, Clone, Copy)]
struct TargetStats {
    mean: f64,
    var: f64,
}

fn assemble(grid: &ConeGrid, cells: &Cells, stats: TargetStats, fit: Fit, xi: f64) -> ConeProjection {
    let x = &grid.x;
    let v = fit.v;
    let n = x.len();
    let mut a = 0.0;
    for j in 0..n - 1 {
        a += 0.5 * (x[j + 1] - x[j]) * (v[j] + v[j + 1]);
    }
    let mut var = 0.0;
    for j in 0..n - 1 {
        let h = x[j + 1] - x[j];
        let (d0, d1) = (v[j] - a, v[j + 1] - a);
        var += h / 3.0 * (d0 * d0 + d0 * d1 + d1 * d1);
    }
    let cov = cells.inner_pl(x, &v) - stats.mean * a;
    let b_hat = var.max(0.0).sqrt();
    let residual = (stats.var - 2.0 * cov + var).max(0.0).sqrt();
    let slopes: Vec<f64> = (0..n - 1).map(|j| (v[j + 1] - v[j]) / (x[j + 1] - x[j])).collect();
    let smax = slopes.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    let mut kinks: Vec<ConeKink> = fit
        .active
        .left
        .iter()
        .chain(&fit.active.right)
        .filter(|p| p.0 > 0 && p.0 < n - 1)
        .map(|p| ConeKink { at: x[p.0], slope_left: slopes[p.0 - 1], slope_right: slopes[p.0] })
        .collect();
    kinks.sort_by(|p, q| p.at.total_cmp(&q.at));
    kinks.dedup_by(|p, q| p.at == q.at);
    ConeProjection {
        xi,
        nodes: x.clone(),
        values: v,
        a_hat: a,
        b_hat,
        kinks,
        residual,
        orthogonality: [cov - var, stats.mean - a],
        iterations: fit.iterations,
        degenerate: b_hat <= 1e-12 * (1.0 + a.abs() + smax),
        approximation: None,
    }
}

fn refine_points(grid: &ConeGrid, active: &Active) -> Vec<(f64, bool)> {
    let x = &grid.x;
    let mut out = Vec::new();
    for &(j, _) in active.left.iter().chain(&active.right) {
        for (l, r) in [(x[j.saturating_sub(1)], x[j]), (x[j], x[(j + 1).min(x.len() - 1)])] {
            if r - l < 64.0 * NODE_GAP * REFINE_SPLIT as f64 {
                continue;
            }
            for i in 1..REFINE_SPLIT {
                out.push((l + (r - l) * i as f64 / REFINE_SPLIT as f64, false));
            }
        }
    }
    out
}

fn remap(active: &Active, from: &ConeGrid, to: &ConeGrid) -> Active {
    let f = |s: &[(usize, f64)]| s.iter().filter_map(|&(i, t)| to.index_of(from.x[i]).map(|j| (j, t))).collect();
    Active { left: f(&active.left), right: f(&active.right) }
}

fn project_weight_on(gamma: &WeightFunction, xi: f64) -> Result<ConeProjection> {
    let stats = TargetStats { mean: gamma.mean(), var: gamma.std().powi(2) };
    let scale = stats.var.sqrt() + stats.mean.abs();
    let mut pts = uniform_points(BASE_CELLS);
    pts.extend(gamma.breakpoints().into_iter().map(|t| (t, true)));
    let mut grid = build_grid(pts.clone(), xi);
    let mut cells = Cells::weight(gamma, &grid.x);
    let mut fit = cone_lsq(&grid, &cells, scale, None)?;
    let mut iterations = fit.iterations;
    for _ in 0..REFINE_ROUNDS {
        let extra = refine_points(&grid, &fit.active);
        if extra.is_empty() {
            break;
        }
        pts.extend(extra);
        let next = build_grid(pts.clone(), xi);
        let warm = remap(&fit.active, &grid, &next);
        grid = next;
        cells = Cells::weight(gamma, &grid.x);
        fit = cone_lsq(&grid, &cells, scale, Some(&warm))?;
        iterations += fit.iterations;
    }
    fit.iterations = iterations;
    Ok(assemble(&grid, &cells, stats, fit, xi))
}

fn identity_projection(gamma: &WeightFunction, xi: f64) -> ConeProjection {
    let mut x = vec![0.0];
    let mut v = vec![gamma.pieces()[0].value(0.0)];
    for p in gamma.pieces() {
        x.push(p.hi);
        v.push(p.value(p.hi));
    }
    let a = gamma.mean();
    let b_hat = gamma.std();
    let smax = gamma.pieces().iter().fold(0.0f64, |m, p| m.max(p.b.abs()));
    let kinks = gamma
        .pieces()
        .windows(2)
        .filter(|w| w[0].b != w[1].b)
        .map(|w| ConeKink { at: w[0].hi, slope_left: w[0].b, slope_right: w[1].b })
        .collect();
    ConeProjection {
        xi,
        nodes: x,
        values: v,
        a_hat: a,
        b_hat,
        kinks,
        residual: 0.0,
        orthogonality: [0.0, 0.0],
        iterations: 0,
        degenerate: b_hat <= 1e-12 * (1.0 + a.abs() + smax),
        approximation: None,
    }
}

/// Projection of a piecewise-affine γ, exact up to grid refinement.
pub fn project_weight(gamma: &WeightFunction, xi: f64) -> Result<ConeProjection> {
    check_xi(xi)?;
    if weight_in_cone(gamma, xi) {
        return Ok(identity_projection(gamma, xi));
    }
    project_weight_on(gamma, xi)
}

/// Projection of a step weight function onto the cone with inflection ξ.
pub fn project_step(gamma: &WeightFunction, xi: f64) -> Result<ConeProjection> {
    if !gamma.is_step() {
        return Err(Error::Param("project_step requires a step weight function".into()));
    }
    project_weight(gamma, xi)
}

/// Best L2 approximation of γ by `n` equal-width steps, and its distance to γ.
pub fn step_approximation(gamma: &WeightFunction, n: usize) -> Result<(WeightFunction, f64)> {
    if n == 0 {
        return Err(Error::Param("step resolution must be positive".into()));
    }
    let breaks: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
    let mut levels = Vec::with_capacity(n);
    let mut kept = 0.0;
    for w in breaks.windows(2) {
        let (l, r) = (w[0], w[1]);
        let mut s = 0.0;
        for p in gamma.pieces() {
            let c = p.lo.max(l);
            let d = p.hi.min(r);
            if d > c {
                s += p.a * (d - c) + 0.5 * p.b * (d * d - c * c);
            }
        }
        let level = s / (r - l);
        kept += level * level * (r - l);
        levels.push(level);
    }
    let err = (gamma.integral_sq() - kept).max(0.0).sqrt();
    Ok((WeightFunction::step(&breaks, &levels)?, err))
}

/// Projection of γ via its n-step approximation, with the resulting error bounds.
pub fn project(gamma: &WeightFunction, xi: f64, n: usize) -> Result<ConeProjection> {
    check_xi(xi)?;
    if weight_in_cone(gamma, xi) {
        return Ok(identity_projection(gamma, xi));
    }
    if gamma.is_step() {
        return project_step(gamma, xi);
    }
    let (gn, err) = step_approximation(gamma, n)?;
    let mut p = project_step(&gn, xi)?;
    let h_bound = if p.b_hat > err { 2.0 * err / (p.b_hat - err) } else { f64::INFINITY };
    p.approximation = Some(StepApproximation {
        steps: n,
        step_error: err,
        projection_bound: err,
        rho_bound_per_sigma: err,
        h_bound_per_sigma: h_bound,
    });
    if p.degenerate {
        p.kinks.clear();
    }
    Ok(p)
}

fn require_absolutely_continuous(g: &DistortionFunction) -> Result<WeightFunction> {
    if g.jumps().iter().any(|&(_, jm, jp)| jm != 0.0 || jp != 0.0) {
        return Err(Error::Unsupported(
            "distortion is not absolutely continuous; unimodal bounds need a weight function".into(),
        ));
    }
    g.weight()
}

fn check_moments(mu: f64, sigma: f64) -> Result<()> {
    if !mu.is_finite() || !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Param(format!("need finite mu and sigma > 0, got ({mu}, {sigma})")));
    }
    Ok(())
}

fn result(value: f64, lambda: Option<f64>, regime: Regime, q: Option<QuantileFunction>, low: f64, high: f64) -> BoundResult {
    BoundResult {
        value,
        lambda,
        regime,
        attained: true,
        epsilon_lower: low,
        epsilon_upper: high,
        diagnostics: Vec::new(),
        quantile_csv_path: None,
        extremal_quantile: q,
        inflection: None,
    }
}

/// sup ρ_g over unimodal distributions with inflection ξ, mean μ and std σ.
pub fn worst_case_unimodal(g: &DistortionFunction, mu: f64, sigma: f64, xi: f64) -> Result<BoundResult> {
    check_moments(mu, sigma)?;
    let gamma = require_absolutely_continuous(g)?;
    let p = project_weight(&gamma, xi)?;
    let g1 = g.total_at_one();
    let mut r = if p.degenerate {
        let mut r = result(g1 * mu, None, Regime::ConstantGstar, None, 0.0, f64::INFINITY);
        r.diagnostics.push("projection is constant; every member attains g(1) mu".into());
        r
    } else {
        let q = p.quantile(mu, sigma)?;
        result(mu * g1 + sigma * p.b_hat, None, Regime::BoundaryLambda0, Some(q), 0.0, f64::INFINITY)
    };
    r.inflection = Some(xi);
    Ok(r)
}

/// Lower radius threshold for unimodal members of a Wasserstein ball around F.
#[derive(Debug, Clone, Serialize)]
pub struct UnimodalFeasibility {
    pub threshold: f64,
    pub moment_floor: f64,
    pub c0_hat: f64,
    pub one_minus_c0: f64,
    pub reference_in_cone: bool,
    #[serde(skip)]
    pub projection: Option<ConeProjection>,
    /// μ + σ (F↑ − μ_F)/σ↑, the only member at the threshold.
    #[serde(skip)]
    pub singleton: QuantileFunction,
}

fn reference_points(reference: &QuantileFunction, extra: &[f64]) -> Vec<(f64, bool)> {
    let g = clustered_grid(REFERENCE_POINTS, 3.0);
    let mut pts: Vec<(f64, bool)> = g[1..g.len() - 1].iter().map(|&t| (t, false)).collect();
    pts.extend(reference.breakpoints().into_iter().map(|t| (t, true)));
    pts.extend(extra.iter().map(|&t| (t, true)));
    pts
}

fn feasibility_on(reference: &QuantileFunction, mu: f64, sigma: f64, xi: f64, grid: &ConeGrid) -> Result<UnimodalFeasibility> {
    check_moments(mu, sigma)?;
    check_xi(xi)?;
    let (mf, sf) = reference.moments();
    if !(sf > 0.0) || !sf.is_finite() || !mf.is_finite() {
        return Err(Error::Param("reference must have finite mean and positive finite variance".into()));
    }
    let floor = (mf - mu).powi(2) + (sf - sigma).powi(2);
    if quantile_in_cone(reference, xi) {
        let singleton = QuantileFunction::affine_of(reference, mu - mf * sigma / sf, sigma / sf)?;
        return Ok(UnimodalFeasibility {
            threshold: floor,
            moment_floor: floor,
            c0_hat: 1.0,
            one_minus_c0: 0.0,
            reference_in_cone: true,
            projection: None,
            singleton,
        });
    }
    let cells = Cells::quantile(reference, &grid.x);
    let stats = TargetStats { mean: mf, var: sf * sf };
    let fit = cone_lsq(grid, &cells, sf + mf.abs(), None)?;
    let p = assemble(grid, &cells, stats, fit, xi);
    if p.degenerate {
        return Err(Error::Regime("projection of the reference quantile is constant".into()));
    }
    let dist_sq = p.residual * p.residual;
    let one_minus_c0 = (dist_sq / (sf * (sf + p.b_hat))).clamp(0.0, 2.0);
    let threshold = floor + 2.0 * sigma * sf * one_minus_c0;
    let singleton = p.quantile(mu, sigma)?;
    Ok(UnimodalFeasibility {
        threshold,
        moment_floor: floor,
        c0_hat: 1.0 - one_minus_c0,
        one_minus_c0,
        reference_in_cone: false,
        projection: Some(p),
        singleton,
    })
}

/// Threshold below which no unimodal member with inflection ξ lies within the ball.
pub fn unimodal_wasserstein_feasibility(
    reference: &QuantileFunction,
    mu: f64,
    sigma: f64,
    xi: f64,
) -> Result<UnimodalFeasibility> {
    check_xi(xi)?;
    let grid = build_grid(reference_points(reference, &[]), xi);
    feasibility_on(reference, mu, sigma, xi, &grid)
}

struct LambdaState {
    flat: bool,
    lambda: f64,
    v: Vec<f64>,
    a: f64,
    b: f64,
    cov_gamma: f64,
    one_minus_corr: f64,
    active: Active,
}

struct Uw {
    grid: ConeGrid,
    cg: Cells,
    cf: Cells,
    g1: f64,
    var_g: f64,
    cov_gf: f64,
    mf: f64,
    sf: f64,
}

impl Uw {
    /// Smallest λ whose projection is not constant, with its state.
    fn leave_flat(&self, s0: LambdaState) -> Result<LambdaState> {
        if !s0.flat {
            return Ok(s0);
        }
        let tiny = self.state(1e-10 / self.sf, Some(&s0.active))?;
        if !tiny.flat {
            return Ok(tiny);
        }
        let mut lo = tiny.lambda;
        let mut hi = 1.0 / self.sf;
        let mut top = self.state(hi, Some(&tiny.active))?;
        let mut n = 0;
        while top.flat {
            lo = hi;
            hi *= 2.0;
            n += 1;
            if n > 60 {
                return Err(Error::Regime("projection of gamma + lambda F^-1 is constant along the whole search path".into()));
            }
            top = self.state(hi, Some(&top.active))?;
        }
        while hi - lo > LAMBDA_RTOL * hi {
            let mid = 0.5 * (lo + hi);
            let s = self.state(mid, Some(&top.active))?;
            if s.flat {
                lo = mid;
            } else {
                hi = mid;
                top = s;
            }
        }
        Ok(top)
    }

    fn state(&self, lambda: f64, warm: Option<&Active>) -> Result<LambdaState> {
        let cells = self.cg.plus(lambda, &self.cf);
        let stats = TargetStats {
            mean: self.g1 + lambda * self.mf,
            var: self.var_g + 2.0 * lambda * self.cov_gf + lambda * lambda * self.sf * self.sf,
        };
        let fit = cone_lsq(&self.grid, &cells, stats.var.sqrt() + stats.mean.abs(), warm)?;
        let active = fit.active.clone();
        let p = assemble(&self.grid, &cells, stats, fit, 0.0);
        let cov_f = self.cf.inner_pl(&self.grid.x, &p.values) - self.mf * p.a_hat;
        let cov_gamma = self.cg.inner_pl(&self.grid.x, &p.values) - self.g1 * p.a_hat;
        let flat = p.b_hat <= 1e-12 * (1.0 + p.a_hat.abs());
        let corr = if flat { 0.0 } else { cov_f / (self.sf * p.b_hat) };
        Ok(LambdaState {
            flat, lambda, v: p.values, a: p.a_hat, b: p.b_hat, cov_gamma, one_minus_corr: 1.0 - corr, active })
    }
}

/// sup ρ_g over unimodal members (inflection ξ) of the moment-Wasserstein set.
pub fn worst_case_unimodal_wasserstein(g: &DistortionFunction, set: &MomentWassersteinSet, xi: f64) -> Result<BoundResult> {
    check_xi(xi)?;
    if set.is_unbounded() {
        return worst_case_unimodal(g, set.mu, set.sigma, xi);
    }
    let gamma = require_absolutely_continuous(g)?;
    let (mu, sigma, eps) = (set.mu, set.sigma, set.epsilon);
    let reference = &set.reference;
    let (mf, sf) = reference.moments();
    let g1 = g.total_at_one();
    let grid = build_grid(reference_points(reference, &gamma.breakpoints()), xi);
    let feas = feasibility_on(reference, mu, sigma, xi, &grid)?;
    let low = feas.threshold;
    if eps < low * (1.0 - 1e-12) {
        return Err(Error::Infeasible(format!(
            "epsilon = {eps} is below the unimodal threshold {low} (moment floor {}, c0 = {})",
            feas.moment_floor, feas.c0_hat
        )));
    }
    let uw = Uw {
        cg: Cells::weight(&gamma, &grid.x),
        cf: Cells::quantile(reference, &grid.x),
        grid,
        g1,
        var_g: gamma.std().powi(2),
        cov_gf: gamma.inner_quantile(reference) - g1 * mf,
        mf,
        sf,
    };
    let s0 = uw.state(0.0, None)?;
    let gamma_flat = s0.flat;
    let start = uw.leave_flat(s0)?;
    let lambda_flat = if gamma_flat { start.lambda } else { 0.0 };
    let high = feas.moment_floor + 2.0 * sigma * sf * start.one_minus_corr;
    if eps <= low * (1.0 + 1e-9) + 1e-15 {
        let q = feas.singleton.clone();
        let v = rho(g, &q)?;
        let mut r = result(v, None, Regime::Interior, Some(q), low, high);
        r.diagnostics.push("epsilon equals the unimodal threshold; the set is a single quantile".into());
        r.inflection = Some(xi);
        return Ok(r);
    }
    let target = (eps - feas.moment_floor) / (2.0 * sigma * sf);
    if eps >= high {
        if gamma_flat && lambda_flat > 1e-9 / sf {
            let v = mu * g1 - sigma * lambda_flat * sf * (1.0 - target).max(0.0);
            let mut r = result(v, Some(lambda_flat), Regime::ConstantGstar, None, low, high);
            r.attained = false;
            r.diagnostics.push(format!(
                "projection of gamma + lambda F^-1 is constant for lambda up to {lambda_flat}; value is the dual bound at that multiplier"
            ));
            r.inflection = Some(xi);
            return Ok(r);
        }
        let mut r = worst_case_unimodal(g, mu, sigma, xi)?;
        r.epsilon_lower = low;
        r.epsilon_upper = high;
        return Ok(r);
    }
    let mut lo = lambda_flat;
    let mut hi = lo + 1.0 / sf;
    let mut best = uw.state(hi, Some(&start.active))?;
    let mut doublings = 0;
    while best.flat || best.one_minus_corr > target {
        lo = hi;
        hi *= 2.0;
        doublings += 1;
        if doublings > 60 {
            let q = feas.singleton.clone();
            let v = rho(g, &q)?;
            let mut r = result(v, None, Regime::Interior, Some(q), low, high);
            r.diagnostics.push("radius is within grid resolution of the unimodal threshold; returning the threshold quantile".into());
            r.inflection = Some(xi);
            return Ok(r);
        }
        best = uw.state(hi, Some(&best.active))?;
    }
    let mut iters = 0;
    let mut warm = best.active.clone();
    while hi - lo > LAMBDA_RTOL * hi && iters < 200 {
        let mid = 0.5 * (lo + hi);
        let s = uw.state(mid, Some(&warm))?;
        warm = s.active.clone();
        if s.flat || s.one_minus_corr > target {
            lo = mid;
        } else {
            hi = mid;
            best = s;
        }
        iters += 1;
    }
    let value = mu * g1 + sigma * best.cov_gamma / best.b;
    let q = pl_quantile(&uw.grid.x, &best.v, best.a, best.b, mu, sigma)?;
    let mut r = result(value, Some(best.lambda), Regime::Interior, Some(q), low, high);
    r.inflection = Some(xi);
    if iters >= 200 {
        r.diagnostics.push("multiplier bisection hit the iteration cap".into());
    }
    Ok(r)
}

/// sup ρ_g when the inflection point may be anywhere in [ξ₁, ξ₂].
///
/// With `set` the Wasserstein ball is imposed and its μ, σ are used.
pub fn worst_case_interval_inflection(
    g: &DistortionFunction,
    mu: f64,
    sigma: f64,
    xi1: f64,
    xi2: f64,
    set: Option<&MomentWassersteinSet>,
) -> Result<BoundResult> {
    UnimodalCone::interval(xi1, xi2)?;
    let solve = |xi: f64| -> Result<BoundResult> {
        match set {
            Some(s) => worst_case_unimodal_wasserstein(g, s, xi),
            None => worst_case_unimodal(g, mu, sigma, xi),
        }
    };
    if xi2 - xi1 < 1e-12 {
        return solve(xi1);
    }
    let nodes: Vec<f64> = (0..CHEBYSHEV_POINTS)
        .map(|i| {
            let c = (std::f64::consts::PI * i as f64 / (CHEBYSHEV_POINTS - 1) as f64).cos();
            (0.5 * (xi1 + xi2) - 0.5 * (xi2 - xi1) * c).clamp(xi1, xi2)
        })
        .collect();
    let results: Vec<Result<BoundResult>> = nodes.par_iter().map(|&xi| solve(xi)).collect();
    let mut best: Option<(usize, BoundResult)> = None;
    let mut last_err = None;
    let mut values = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(r) => {
                values.push((nodes[i], r.value));
                if best.as_ref().is_none_or(|(_, b)| r.value > b.value) {
                    best = Some((i, r));
                }
            }
            Err(e @ Error::Infeasible(_)) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    let Some((i, mut top)) = best else {
        return Err(last_err.unwrap_or_else(|| Error::Numeric("no inflection point evaluated".into())));
    };
    let a = nodes[i.saturating_sub(1)];
    let b = nodes[(i + 1).min(nodes.len() - 1)];
    if b > a {
        let mut cache: Vec<BoundResult> = Vec::new();
        let (xs, _) = golden_min(
            |xi| match solve(xi) {
                Ok(r) => {
                    let v = r.value;
                    cache.push(r);
                    -v
                }
                Err(_) => f64::INFINITY,
            },
            a,
            b,
            1e-6 * (xi2 - xi1),
        );
        let _ = xs;
        for r in cache {
            if r.value > top.value {
                top = r;
            }
        }
    }
    let ties: Vec<f64> = values
        .iter()
        .filter(|(xi, v)| (v - top.value).abs() <= 1e-8 && Some(*xi) != top.inflection)
        .map(|(xi, _)| *xi)
        .collect();
    if !ties.is_empty() {
        top.diagnostics.push(format!("near-tie within 1e-8 at inflection points {ties:?}"));
    }
    top.diagnostics.push("worst-case quantile is a maximizer over the inflection interval and need not be unique".into());
    Ok(top)
}
