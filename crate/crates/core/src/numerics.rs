//! Quadrature, scalar search, Nelder-Mead, banded and small dense solvers.

use nalgebra::{DMatrix, DVector};
use std::sync::OnceLock;

/// Gauss-Legendre rule on [-1, 1].
#[derive(Debug, Clone)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

pub fn gauss_legendre(n: usize) -> GaussRule {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    GaussRule { nodes, weights }
}

fn panel_rule() -> &'static GaussRule {
    static RULE: OnceLock<GaussRule> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(16))
}

/// Integrate `f` over `[a, b]` with a fixed Gauss rule.
pub fn gauss<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rule: &GaussRule) -> f64 {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut s = 0.0;
    for (x, w) in rule.nodes.iter().zip(&rule.weights) {
        s += w * f(c + h * x);
    }
    s * h
}

const GRADING_DEPTH: usize = 120;

fn graded<F: Fn(f64) -> f64>(f: &F, lo: f64, hi: f64) -> f64 {
    let rule = panel_rule();
    let mut pts = vec![hi];
    let mut x = 0.5f64;
    for _ in 0..GRADING_DEPTH {
        if x <= lo {
            break;
        }
        if x < hi {
            pts.push(x);
        }
        x *= 0.5;
    }
    pts.push(lo);
    let mut s = 0.0;
    for w in pts.windows(2) {
        if w[0] > w[1] {
            s += gauss(f, w[1], w[0], rule);
        }
    }
    s
}

/// Integrate over `[a, b] ⊂ [0, 1]` a function of `(u, 1 - u)`.
///
/// Panels are graded geometrically toward both endpoints of the unit interval so
/// that quantile-type singularities at 0 and 1 are resolved. The second argument
/// carries `1 - u` without cancellation near 1.
pub fn integrate_unit<F: Fn(f64, f64) -> f64>(f: F, a: f64, b: f64) -> f64 {
    if !(b > a) {
        return 0.0;
    }
    let mut total = 0.0;
    if a < 0.5 {
        total += graded(&|x| f(x, 1.0 - x), a, b.min(0.5));
    }
    if b > 0.5 {
        total += graded(&|y| f(1.0 - y, y), 1.0 - b, 1.0 - a.max(0.5));
    }
    total
}

/// Bisection on a monotone predicate: `pred(lo)` holds and `pred(hi)` does not.
/// Returns the final bracket.
pub fn bisect_predicate<P: FnMut(f64) -> bool>(
    mut pred: P,
    mut lo: f64,
    mut hi: f64,
    tol: f64,
    max_iter: usize,
) -> (f64, f64) {
    for _ in 0..max_iter {
        if (hi - lo).abs() <= tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo.min(hi) || mid >= lo.max(hi) {
            break;
        }
        if pred(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo, hi)
}

/// Golden-section minimization on `[a, b]`.
pub fn golden_min<F: FnMut(f64) -> f64>(mut f: F, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

#[derive(Debug, Clone)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub fx: f64,
    pub iterations: usize,
}

/// Standard Nelder-Mead with adaptive-free coefficients (1, 2, 0.5, 0.5).
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    step: f64,
    ftol: f64,
    max_iter: usize,
) -> NelderMeadResult {
    let n = x0.len();
    if n == 0 {
        let fx = f(x0);
        return NelderMeadResult { x: vec![], fx, iterations: 0 };
    }
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..n {
        let mut p = x0.to_vec();
        p[i] += step;
        simplex.push(p);
    }
    let mut values: Vec<f64> = simplex.iter().map(|p| f(p)).collect();
    let mut it = 0;
    while it < max_iter {
        it += 1;
        let mut idx: Vec<usize> = (0..=n).collect();
        idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = idx.iter().map(|&i| simplex[i].clone()).collect();
        values = idx.iter().map(|&i| values[i]).collect();
        let spread = (values[n] - values[0]).abs();
        if spread <= ftol * (1.0 + values[0].abs()) {
            let size = simplex[1..]
                .iter()
                .map(|p| p.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
                .fold(0.0, f64::max);
            if size < 1e-9 || spread == 0.0 {
                break;
            }
        }
        let mut centroid = vec![0.0; n];
        for p in &simplex[..n] {
            for (c, x) in centroid.iter_mut().zip(p) {
                *c += x / n as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            centroid.iter().zip(&simplex[n]).map(|(c, w)| c + t * (w - c)).collect()
        };
        let xr = along(-1.0);
        let fr = f(&xr);
        if fr < values[0] {
            let xe = along(-2.0);
            let fe = f(&xe);
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
            continue;
        }
        if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
            continue;
        }
        let (xc, fc) = if fr < values[n] {
            let xc = along(-0.5);
            let fc = f(&xc);
            (xc, fc)
        } else {
            let xc = along(0.5);
            let fc = f(&xc);
            (xc, fc)
        };
        if fc < values[n].min(fr) {
            simplex[n] = xc;
            values[n] = fc;
            continue;
        }
        let best = simplex[0].clone();
        for i in 1..=n {
            simplex[i] = best.iter().zip(&simplex[i]).map(|(b, x)| b + 0.5 * (x - b)).collect();
            values[i] = f(&simplex[i]);
        }
    }
    let (ib, _) = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty simplex");
    NelderMeadResult { x: simplex[ib].clone(), fx: values[ib], iterations: it }
}

/// Symmetric positive definite matrix with bandwidth two, stored by diagonals.
#[derive(Debug, Clone)]
pub struct Penta {
    pub d0: Vec<f64>,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
}

impl Penta {
    pub fn zeros(n: usize) -> Self {
        Penta {
            d0: vec![0.0; n],
            d1: vec![0.0; n.saturating_sub(1)],
            d2: vec![0.0; n.saturating_sub(2)],
        }
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let n = self.d0.len();
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = self.d0[i] * x[i];
            if i + 1 < n {
                s += self.d1[i] * x[i + 1];
            }
            if i >= 1 {
                s += self.d1[i - 1] * x[i - 1];
            }
            if i + 2 < n {
                s += self.d2[i] * x[i + 2];
            }
            if i >= 2 {
                s += self.d2[i - 2] * x[i - 2];
            }
            y[i] = s;
        }
        y
    }

    /// Solve `A x = b` by an LDLᵀ factorization. Returns `None` if a pivot is not positive.
    pub fn solve(&self, b: &[f64]) -> Option<Vec<f64>> {
        let n = self.d0.len();
        let mut d = vec![0.0; n];
        let mut l1 = vec![0.0; n.saturating_sub(1)];
        let mut l2 = vec![0.0; n.saturating_sub(2)];
        for i in 0..n {
            let mut di = self.d0[i];
            if i >= 1 {
                di -= l1[i - 1] * l1[i - 1] * d[i - 1];
            }
            if i >= 2 {
                di -= l2[i - 2] * l2[i - 2] * d[i - 2];
            }
            if !(di > 0.0) || !di.is_finite() {
                return None;
            }
            d[i] = di;
            if i + 1 < n {
                let mut a = self.d1[i];
                if i >= 1 {
                    a -= l2[i - 1] * l1[i - 1] * d[i - 1];
                }
                l1[i] = a / di;
            }
            if i + 2 < n {
                l2[i] = self.d2[i] / di;
            }
        }
        let mut y = b.to_vec();
        for i in 0..n {
            if i >= 1 {
                y[i] -= l1[i - 1] * y[i - 1];
            }
            if i >= 2 {
                y[i] -= l2[i - 2] * y[i - 2];
            }
        }
        for i in 0..n {
            y[i] /= d[i];
        }
        for i in (0..n).rev() {
            if i + 1 < n {
                y[i] -= l1[i] * y[i + 1];
            }
            if i + 2 < n {
                y[i] -= l2[i] * y[i + 2];
            }
        }
        Some(y)
    }
}

fn solve_spd(g: &DMatrix<f64>, c: &DVector<f64>) -> DVector<f64> {
    if let Some(ch) = g.clone().cholesky() {
        return ch.solve(c);
    }
    let scale = (0..g.nrows()).map(|i| g[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
    let mut ridge = 1e-14 * scale;
    loop {
        let mut h = g.clone();
        for i in 0..h.nrows() {
            h[(i, i)] += ridge;
        }
        if let Some(ch) = h.cholesky() {
            return ch.solve(c);
        }
        ridge *= 10.0;
    }
}

/// Minimize `½θᵀGθ − cᵀθ` subject to `θ_i ≥ 0` for every `i` with `free[i] == false`.
///
/// Lawson-Hanson active-set iteration on the Gram form.
pub fn nnls_gram(g: &DMatrix<f64>, c: &DVector<f64>, free: &[bool]) -> DVector<f64> {
    let n = c.len();
    let scale = (0..n).map(|i| g[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
    let tol = 1e-13 * scale.sqrt() * c.amax().max(1e-300).sqrt();
    let mut passive: Vec<bool> = free.to_vec();
    let mut theta = DVector::zeros(n);
    let solve_passive = |passive: &[bool]| -> DVector<f64> {
        let idx: Vec<usize> = (0..n).filter(|&i| passive[i]).collect();
        let mut z = DVector::zeros(n);
        if idx.is_empty() {
            return z;
        }
        let gp = DMatrix::from_fn(idx.len(), idx.len(), |a, b| g[(idx[a], idx[b])]);
        let cp = DVector::from_fn(idx.len(), |a, _| c[idx[a]]);
        let zp = solve_spd(&gp, &cp);
        for (a, &i) in idx.iter().enumerate() {
            z[i] = zp[a];
        }
        z
    };
    if passive.iter().any(|&p| p) {
        theta = solve_passive(&passive);
    }
    for _outer in 0..(10 * n + 50) {
        let w = c - g * &theta;
        let mut best = None;
        let mut best_w = tol;
        for i in 0..n {
            if !passive[i] && w[i] > best_w {
                best_w = w[i];
                best = Some(i);
            }
        }
        let Some(j) = best else { break };
        passive[j] = true;
        for _inner in 0..(3 * n + 10) {
            let z = solve_passive(&passive);
            let mut alpha = 1.0f64;
            let mut blocked = false;
            for i in 0..n {
                if passive[i] && !free[i] && z[i] <= 0.0 {
                    blocked = true;
                    let denom = theta[i] - z[i];
                    let a = if denom > 0.0 { theta[i] / denom } else { 0.0 };
                    alpha = alpha.min(a);
                }
            }
            if !blocked {
                theta = z;
                break;
            }
            theta = &theta + alpha * (&z - &theta);
            for i in 0..n {
                if passive[i] && !free[i] && theta[i] <= 1e-15 * (1.0 + z[i].abs()) {
                    passive[i] = false;
                    theta[i] = 0.0;
                }
            }
        }
    }
    theta
}
