//! Quantile functions on (0,1), partial integrals, moments and the 2-Wasserstein distance.

use crate::error::{param, Error, Result};
use crate::numerics::integrate_unit;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::erf::{erfc, erfc_inv};
use std::path::Path;
use std::sync::Arc;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const INV_2_SQRT_PI: f64 = 0.282_094_791_773_878_14;

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    if x.is_infinite() {
        return 0.0;
    }
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal distribution function.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Standard normal quantile at `u`.
pub fn norm_ppf(u: f64) -> f64 {
    if u <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if u >= 1.0 {
        return f64::INFINITY;
    }
    -SQRT_2 * erfc_inv(2.0 * u)
}

/// Standard normal quantile at `1 - v`, accurate for small `v`.
pub fn norm_ppf_upper(v: f64) -> f64 {
    -norm_ppf(v)
}

/// One linear segment `c0 + c1 u + c2 base(u)` on `(lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearSegment {
    pub lo: f64,
    pub hi: f64,
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
}

#[derive(Debug, Clone)]
struct Table {
    x: Vec<f64>,
    y: Vec<f64>,
    p1: Vec<f64>,
    p2: Vec<f64>,
    pu: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Kind {
    Normal { mean: f64, sd: f64 },
    StudentT { nu: f64, loc: f64, scale: f64, dist: StudentsT },
    Uniform { a: f64, b: f64 },
    Empirical(Arc<Table>),
    Grid(Arc<Table>),
    Affine { base: Arc<QuantileFunction>, shift: f64, scale: f64 },
    Piecewise { base: Option<Arc<QuantileFunction>>, segments: Arc<Vec<LinearSegment>> },
}

/// Left-continuous quantile function with cached mean and standard deviation.
#[derive(Debug, Clone)]
pub struct QuantileFunction {
    kind: Kind,
    mean: f64,
    std: f64,
}

fn check_unit(a: f64, b: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) {
        return param(format!("integration limits must lie in [0,1], got [{a}, {b}]"));
    }
    if a > b {
        return param(format!("lower limit {a} exceeds upper limit {b}"));
    }
    Ok(())
}

impl Table {
    fn empirical(mut values: Vec<f64>) -> Self {
        values.sort_by(f64::total_cmp);
        let n = values.len();
        let x: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
        let mut p1 = vec![0.0; n + 1];
        let mut p2 = vec![0.0; n + 1];
        let mut pu = vec![0.0; n + 1];
        for i in 0..n {
            let w = x[i + 1] - x[i];
            p1[i + 1] = p1[i] + values[i] * w;
            p2[i + 1] = p2[i] + values[i] * values[i] * w;
            pu[i + 1] = pu[i] + values[i] * 0.5 * (x[i + 1] * x[i + 1] - x[i] * x[i]);
        }
        Table { x, y: values, p1, p2, pu }
    }

    fn grid(u: Vec<f64>, v: Vec<f64>) -> Self {
        let m = u.len();
        let mut p1 = vec![0.0; m];
        let mut p2 = vec![0.0; m];
        let mut pu = vec![0.0; m];
        for j in 0..m - 1 {
            let (a, b, ya, yb) = (u[j], u[j + 1], v[j], v[j + 1]);
            let (i1, i2, iu) = linear_cell(a, b, ya, yb);
            p1[j + 1] = p1[j] + i1;
            p2[j + 1] = p2[j] + i2;
            pu[j + 1] = pu[j] + iu;
        }
        Table { x: u, y: v, p1, p2, pu }
    }

    fn empirical_value(&self, u: f64) -> f64 {
        let n = self.y.len();
        let k = ((u * n as f64).ceil() as usize).clamp(1, n);
        self.y[k - 1]
    }

    fn empirical_right(&self, u: f64) -> f64 {
        let n = self.y.len();
        let k = ((u * n as f64).floor() as usize + 1).clamp(1, n);
        self.y[k - 1]
    }

    fn empirical_cum(&self, u: f64) -> (f64, f64, f64) {
        let n = self.y.len();
        let k = ((u * n as f64).floor() as usize).min(n);
        if k == n {
            return (self.p1[n], self.p2[n], self.pu[n]);
        }
        let y = self.y[k];
        let x0 = self.x[k];
        (
            self.p1[k] + y * (u - x0),
            self.p2[k] + y * y * (u - x0),
            self.pu[k] + y * 0.5 * (u * u - x0 * x0),
        )
    }

    fn grid_cell(&self, u: f64) -> usize {
        match self.x.binary_search_by(|p| p.total_cmp(&u)) {
            Ok(j) => j.min(self.x.len() - 2),
            Err(j) => j.saturating_sub(1).min(self.x.len() - 2),
        }
    }

    fn grid_value(&self, u: f64) -> f64 {
        let m = self.x.len();
        if u <= self.x[0] {
            return self.y[0];
        }
        if u >= self.x[m - 1] {
            return self.y[m - 1];
        }
        let j = self.grid_cell(u);
        let t = (u - self.x[j]) / (self.x[j + 1] - self.x[j]);
        self.y[j] + t * (self.y[j + 1] - self.y[j])
    }

    fn grid_cum(&self, u: f64) -> (f64, f64, f64) {
        let m = self.x.len();
        if u <= self.x[0] {
            let y = self.y[0];
            let w = u - self.x[0];
            return (y * w, y * y * w, y * 0.5 * (u * u - self.x[0] * self.x[0]));
        }
        if u >= self.x[m - 1] {
            let y = self.y[m - 1];
            let e = self.x[m - 1];
            let w = u - e;
            return (
                self.p1[m - 1] + y * w,
                self.p2[m - 1] + y * y * w,
                self.pu[m - 1] + y * 0.5 * (u * u - e * e),
            );
        }
        let j = self.grid_cell(u);
        let a = self.x[j];
        let yu = self.grid_value(u);
        let (i1, i2, iu) = linear_cell(a, u, self.y[j], yu);
        (self.p1[j] + i1, self.p2[j] + i2, self.pu[j] + iu)
    }
}

/// Integrals of a linear function (through `(a, ya)`, `(b, yb)`) over `[a, b]`:
/// `∫y`, `∫y²`, `∫u y`.
fn linear_cell(a: f64, b: f64, ya: f64, yb: f64) -> (f64, f64, f64) {
    let w = b - a;
    if w <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let i1 = 0.5 * w * (ya + yb);
    let i2 = w * (ya * ya + ya * yb + yb * yb) / 3.0;
    let iu = w * (a * (2.0 * ya + yb) + b * (ya + 2.0 * yb)) / 6.0;
    (i1, i2, iu)
}

impl QuantileFunction {
    pub fn normal(mean: f64, sd: f64) -> Result<Self> {
        if !(sd > 0.0) || !sd.is_finite() || !mean.is_finite() {
            return param(format!("normal requires finite mean and sd > 0, got ({mean}, {sd})"));
        }
        Ok(QuantileFunction { kind: Kind::Normal { mean, sd }, mean, std: sd })
    }

    pub fn standard_normal() -> Self {
        QuantileFunction { kind: Kind::Normal { mean: 0.0, sd: 1.0 }, mean: 0.0, std: 1.0 }
    }

    pub fn student_t(nu: f64, loc: f64, scale: f64) -> Result<Self> {
        if !(nu > 2.0) {
            return param(format!("student_t requires nu > 2 for finite variance, got {nu}"));
        }
        if !(scale > 0.0) {
            return param(format!("student_t requires scale > 0, got {scale}"));
        }
        let dist = StudentsT::new(0.0, 1.0, nu).map_err(|e| Error::Param(e.to_string()))?;
        let std = scale * (nu / (nu - 2.0)).sqrt();
        Ok(QuantileFunction { kind: Kind::StudentT { nu, loc, scale, dist }, mean: loc, std })
    }

    pub fn uniform(a: f64, b: f64) -> Result<Self> {
        if !(b > a) {
            return param(format!("uniform requires a < b, got ({a}, {b})"));
        }
        Ok(QuantileFunction {
            kind: Kind::Uniform { a, b },
            mean: 0.5 * (a + b),
            std: (b - a) / 12f64.sqrt(),
        })
    }

    pub fn empirical(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return param("empirical quantile needs at least one value");
        }
        if values.iter().any(|v| !v.is_finite()) {
            return param("empirical sample contains non-finite values");
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let table = Table::empirical(values);
        Ok(QuantileFunction { kind: Kind::Empirical(Arc::new(table)), mean, std: var.sqrt() })
    }

    /// Piecewise-linear quantile through `(u_j, v_j)`, constant outside the grid.
    pub fn grid(u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if u.len() != v.len() || u.len() < 2 {
            return param("grid quantile needs at least two (u, value) pairs of equal length");
        }
        for w in u.windows(2) {
            if !(w[1] > w[0]) {
                return param("grid u-values must be strictly increasing");
            }
        }
        for w in v.windows(2) {
            if w[1] < w[0] {
                return param("grid values must be non-decreasing");
            }
        }
        if u[0] < 0.0 || u[u.len() - 1] > 1.0 {
            return param("grid u-values must lie in [0,1]");
        }
        let table = Table::grid(u, v);
        let mut q = QuantileFunction { kind: Kind::Grid(Arc::new(table)), mean: 0.0, std: 0.0 };
        q.refresh_moments();
        Ok(q)
    }

    /// `shift + scale · base`, with `scale > 0`.
    pub fn affine_of(base: &QuantileFunction, shift: f64, scale: f64) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() || !shift.is_finite() {
            return param(format!("affine_of requires finite shift and scale > 0, got ({shift}, {scale})"));
        }
        let (inner, s, k) = match &base.kind {
            Kind::Affine { base: b, shift: s0, scale: k0 } => (b.clone(), shift + scale * s0, scale * k0),
            _ => (Arc::new(base.clone()), shift, scale),
        };
        let mean = s + k * inner.mean;
        let std = k * inner.std;
        Ok(QuantileFunction { kind: Kind::Affine { base: inner, shift: s, scale: k }, mean, std })
    }

    /// Quantile assembled from segments `c0 + c1 u + c2 base(u)` covering `(0,1)`.
    pub fn piecewise(base: Option<QuantileFunction>, segments: Vec<LinearSegment>) -> Result<Self> {
        if segments.is_empty() {
            return param("piecewise quantile needs at least one segment");
        }
        if segments.iter().any(|s| s.c2 != 0.0) && base.is_none() {
            return param("segments reference a base quantile that was not supplied");
        }
        let mut q = QuantileFunction {
            kind: Kind::Piecewise { base: base.map(Arc::new), segments: Arc::new(segments) },
            mean: 0.0,
            std: 0.0,
        };
        q.refresh_moments();
        Ok(q)
    }

    fn refresh_moments(&mut self) {
        let m = self.partial_unchecked(0.0, 1.0);
        let s2 = self.partial_sq_unchecked(0.0, 1.0);
        self.mean = m;
        self.std = (s2 - m * m).max(0.0).sqrt();
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn std(&self) -> f64 {
        self.std
    }

    /// `(mean, std)`; a constant quantile reports `std = 0`.
    pub fn moments(&self) -> (f64, f64) {
        (self.mean, self.std)
    }

    pub fn is_degenerate(&self) -> bool {
        self.std <= 1e-14 * (1.0 + self.mean.abs())
    }

    pub fn kind_name(&self) -> &'static str {
        match &self.kind {
            Kind::Normal { .. } => "normal",
            Kind::StudentT { .. } => "student_t",
            Kind::Uniform { .. } => "uniform",
            Kind::Empirical(_) => "empirical",
            Kind::Grid(_) => "grid",
            Kind::Affine { .. } => "affine_of",
            Kind::Piecewise { .. } => "piecewise",
        }
    }

    /// Left-continuous value at `u`.
    pub fn value(&self, u: f64) -> f64 {
        self.value_uv(u, 1.0 - u)
    }

    /// Value at `u` where `v = 1 - u` is supplied separately to keep precision near 1.
    pub fn value_uv(&self, u: f64, v: f64) -> f64 {
        match &self.kind {
            Kind::Normal { mean, sd } => {
                let z = if u <= 0.5 { norm_ppf(u) } else { norm_ppf_upper(v) };
                mean + sd * z
            }
            Kind::StudentT { loc, scale, dist, .. } => {
                let z = if u <= 0.0 {
                    f64::NEG_INFINITY
                } else if v <= 0.0 {
                    f64::INFINITY
                } else if u <= 0.5 {
                    dist.inverse_cdf(u)
                } else {
                    -dist.inverse_cdf(v)
                };
                loc + scale * z
            }
            Kind::Uniform { a, b } => {
                if u <= 0.5 {
                    a + (b - a) * u
                } else {
                    b - (b - a) * v
                }
            }
            Kind::Empirical(t) => t.empirical_value(u),
            Kind::Grid(t) => t.grid_value(u),
            Kind::Affine { base, shift, scale } => shift + scale * base.value_uv(u, v),
            Kind::Piecewise { base, segments } => {
                let s = find_segment(segments, u);
                let mut y = s.c0 + s.c1 * u;
                if s.c2 != 0.0 {
                    y += s.c2 * base.as_ref().expect("validated").value_uv(u, v);
                }
                y
            }
        }
    }

    /// Right limit at `u`.
    pub fn value_right(&self, u: f64) -> f64 {
        match &self.kind {
            Kind::Empirical(t) => t.empirical_right(u),
            Kind::Affine { base, shift, scale } => shift + scale * base.value_right(u),
            Kind::Piecewise { base, segments } => {
                let s = find_segment_right(segments, u);
                let mut y = s.c0 + s.c1 * u;
                if s.c2 != 0.0 {
                    y += s.c2 * base.as_ref().expect("validated").value_right(u);
                }
                y
            }
            _ => self.value(u),
        }
    }

    /// Interior points of (0,1) where the function may fail to be smooth.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut out = match &self.kind {
            Kind::Empirical(t) => t.x[1..t.x.len() - 1].to_vec(),
            Kind::Grid(t) => t.x.iter().copied().filter(|&u| u > 0.0 && u < 1.0).collect(),
            Kind::Affine { base, .. } => base.breakpoints(),
            Kind::Piecewise { base, segments } => {
                let mut v: Vec<f64> = segments.iter().map(|s| s.hi).filter(|&u| u > 0.0 && u < 1.0).collect();
                if let Some(b) = base {
                    v.extend(b.breakpoints());
                }
                v
            }
            _ => vec![],
        };
        out.sort_by(f64::total_cmp);
        out.dedup();
        out
    }

    /// `∫_a^b q(s) ds`.
    pub fn partial_integral(&self, a: f64, b: f64) -> Result<f64> {
        check_unit(a, b)?;
        Ok(self.partial_unchecked(a, b))
    }

    /// `∫_a^b q(s)² ds`.
    pub fn partial_sq(&self, a: f64, b: f64) -> Result<f64> {
        check_unit(a, b)?;
        Ok(self.partial_sq_unchecked(a, b))
    }

    /// `∫_a^b s q(s) ds`.
    pub fn partial_u(&self, a: f64, b: f64) -> Result<f64> {
        check_unit(a, b)?;
        Ok(self.partial_u_unchecked(a, b))
    }

    pub(crate) fn partial_unchecked(&self, a: f64, b: f64) -> f64 {
        if !(b > a) {
            return 0.0;
        }
        match &self.kind {
            Kind::Normal { mean, sd } => mean * (b - a) + sd * (norm_pdf(self.z_normal(a)) - norm_pdf(self.z_normal(b))),
            Kind::StudentT { nu, loc, scale, .. } => {
                let prim = |x: f64| -> f64 {
                    if x.is_infinite() {
                        0.0
                    } else {
                        -(nu + x * x) / (nu - 1.0) * student_pdf(*nu, x)
                    }
                };
                let xa = (self.value(a) - loc) / scale;
                let xb = if b >= 1.0 { f64::INFINITY } else { (self.value_uv(b, 1.0 - b) - loc) / scale };
                loc * (b - a) + scale * (prim(xb) - prim(xa))
            }
            Kind::Uniform { a: lo, b: hi } => lo * (b - a) + (hi - lo) * 0.5 * (b * b - a * a),
            Kind::Empirical(t) => t.empirical_cum(b).0 - t.empirical_cum(a).0,
            Kind::Grid(t) => t.grid_cum(b).0 - t.grid_cum(a).0,
            Kind::Affine { base, shift, scale } => shift * (b - a) + scale * base.partial_unchecked(a, b),
            Kind::Piecewise { base, segments } => {
                let mut s = 0.0;
                for seg in overlapping(segments, a, b) {
                    let (l, r) = (seg.lo.max(a), seg.hi.min(b));
                    s += seg.c0 * (r - l) + seg.c1 * 0.5 * (r * r - l * l);
                    if seg.c2 != 0.0 {
                        s += seg.c2 * base.as_ref().expect("validated").partial_unchecked(l, r);
                    }
                }
                s
            }
        }
    }

    pub(crate) fn partial_sq_unchecked(&self, a: f64, b: f64) -> f64 {
        if !(b > a) {
            return 0.0;
        }
        match &self.kind {
            Kind::Normal { mean, sd } => {
                let (za, zb) = (self.z_normal(a), self.z_normal(b));
                let xphi = |z: f64| if z.is_infinite() { 0.0 } else { z * norm_pdf(z) };
                let p1 = norm_pdf(za) - norm_pdf(zb);
                let p2 = (b - a) + xphi(za) - xphi(zb);
                mean * mean * (b - a) + 2.0 * mean * sd * p1 + sd * sd * p2
            }
            Kind::Uniform { a: lo, b: hi } => {
                let (ya, yb) = (lo + (hi - lo) * a, lo + (hi - lo) * b);
                (b - a) * (ya * ya + ya * yb + yb * yb) / 3.0
            }
            Kind::Empirical(t) => t.empirical_cum(b).1 - t.empirical_cum(a).1,
            Kind::Grid(t) => t.grid_cum(b).1 - t.grid_cum(a).1,
            Kind::Affine { base, shift, scale } => {
                shift * shift * (b - a)
                    + 2.0 * shift * scale * base.partial_unchecked(a, b)
                    + scale * scale * base.partial_sq_unchecked(a, b)
            }
            Kind::Piecewise { base, segments } => {
                let mut s = 0.0;
                for seg in overlapping(segments, a, b) {
                    let (l, r) = (seg.lo.max(a), seg.hi.min(b));
                    let w = r - l;
                    let m1 = 0.5 * (r * r - l * l);
                    let m2 = (r * r * r - l * l * l) / 3.0;
                    s += seg.c0 * seg.c0 * w + 2.0 * seg.c0 * seg.c1 * m1 + seg.c1 * seg.c1 * m2;
                    if seg.c2 != 0.0 {
                        let bq = base.as_ref().expect("validated");
                        s += 2.0 * seg.c0 * seg.c2 * bq.partial_unchecked(l, r)
                            + 2.0 * seg.c1 * seg.c2 * bq.partial_u_unchecked(l, r)
                            + seg.c2 * seg.c2 * bq.partial_sq_unchecked(l, r);
                    }
                }
                s
            }
            Kind::StudentT { .. } => self.quad_between(a, b, |_, y| y * y),
        }
    }

    pub(crate) fn partial_u_unchecked(&self, a: f64, b: f64) -> f64 {
        if !(b > a) {
            return 0.0;
        }
        match &self.kind {
            Kind::Normal { mean, sd } => {
                let prim = |u: f64, z: f64| -> f64 {
                    let tail = if z == f64::NEG_INFINITY {
                        0.0
                    } else if z == f64::INFINITY {
                        INV_2_SQRT_PI
                    } else {
                        INV_2_SQRT_PI * norm_cdf(SQRT_2 * z)
                    };
                    -u * norm_pdf(z) + tail
                };
                let (za, zb) = (self.z_normal(a), self.z_normal(b));
                mean * 0.5 * (b * b - a * a) + sd * (prim(b, zb) - prim(a, za))
            }
            Kind::Uniform { a: lo, b: hi } => {
                lo * 0.5 * (b * b - a * a) + (hi - lo) * (b * b * b - a * a * a) / 3.0
            }
            Kind::Empirical(t) => t.empirical_cum(b).2 - t.empirical_cum(a).2,
            Kind::Grid(t) => t.grid_cum(b).2 - t.grid_cum(a).2,
            Kind::Affine { base, shift, scale } => {
                shift * 0.5 * (b * b - a * a) + scale * base.partial_u_unchecked(a, b)
            }
            Kind::Piecewise { base, segments } => {
                let mut s = 0.0;
                for seg in overlapping(segments, a, b) {
                    let (l, r) = (seg.lo.max(a), seg.hi.min(b));
                    s += seg.c0 * 0.5 * (r * r - l * l) + seg.c1 * (r * r * r - l * l * l) / 3.0;
                    if seg.c2 != 0.0 {
                        s += seg.c2 * base.as_ref().expect("validated").partial_u_unchecked(l, r);
                    }
                }
                s
            }
            Kind::StudentT { .. } => self.quad_between(a, b, |u, y| u * y),
        }
    }

    fn z_normal(&self, u: f64) -> f64 {
        if u <= 0.5 {
            norm_ppf(u)
        } else {
            norm_ppf_upper(1.0 - u)
        }
    }

    fn quad_between<F: Fn(f64, f64) -> f64>(&self, a: f64, b: f64, f: F) -> f64 {
        let mut pts = vec![a];
        pts.extend(self.breakpoints().into_iter().filter(|&p| p > a && p < b));
        pts.push(b);
        pts.windows(2)
            .map(|w| integrate_unit(|u, v| f(u, self.value_uv(u, v)), w[0], w[1]))
            .sum()
    }

    /// `(q - mean) / std` as an affine wrapper; analytic families stay in their family.
    pub fn standardize(&self) -> Result<QuantileFunction> {
        if self.is_degenerate() {
            return Err(Error::Param("cannot standardize a degenerate (constant) quantile".into()));
        }
        match &self.kind {
            Kind::Normal { .. } => Ok(QuantileFunction::standard_normal()),
            Kind::StudentT { nu, .. } => QuantileFunction::student_t(*nu, 0.0, ((nu - 2.0) / nu).sqrt()),
            Kind::Uniform { .. } => QuantileFunction::uniform(-3f64.sqrt(), 3f64.sqrt()),
            _ => {
                let mut q = QuantileFunction::affine_of(self, -self.mean / self.std, 1.0 / self.std)?;
                q.mean = 0.0;
                q.std = 1.0;
                Ok(q)
            }
        }
    }

    /// Values of `∫_0^{u_j} q` on an increasing grid starting at 0.
    pub fn cumulative_on(&self, grid: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(grid.len());
        let mut acc = 0.0;
        let mut prev = 0.0;
        for &u in grid {
            acc += self.partial_unchecked(prev, u);
            prev = u;
            out.push(acc);
        }
        out
    }

    /// Write `(u, value)` pairs on the given grid as CSV.
    pub fn write_csv(&self, path: &Path, grid: &[f64]) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Numeric(e.to_string()))?;
        w.write_record(["u", "value"]).map_err(|e| Error::Numeric(e.to_string()))?;
        for &u in grid {
            w.write_record([format!("{u:.12e}"), format!("{:.12e}", self.value(u))])
                .map_err(|e| Error::Numeric(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::Numeric(e.to_string()))?;
        Ok(())
    }
}

fn student_pdf(nu: f64, x: f64) -> f64 {
    use statrs::function::gamma::ln_gamma;
    let ln_c = ln_gamma(0.5 * (nu + 1.0)) - ln_gamma(0.5 * nu) - 0.5 * (nu * std::f64::consts::PI).ln();
    (ln_c - 0.5 * (nu + 1.0) * (1.0 + x * x / nu).ln()).exp()
}

fn find_segment(segments: &[LinearSegment], u: f64) -> &LinearSegment {
    let i = segments.partition_point(|s| s.hi < u);
    &segments[i.min(segments.len() - 1)]
}

fn find_segment_right(segments: &[LinearSegment], u: f64) -> &LinearSegment {
    let i = segments.partition_point(|s| s.hi <= u);
    &segments[i.min(segments.len() - 1)]
}

fn overlapping(segments: &[LinearSegment], a: f64, b: f64) -> impl Iterator<Item = &LinearSegment> {
    let start = segments.partition_point(|s| s.hi <= a);
    segments[start..].iter().take_while(move |s| s.lo < b).filter(move |s| s.hi.min(b) > s.lo.max(a))
}

/// Standardized elliptical generator: mean 0, variance 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "generator")]
pub enum EllipticalReference {
    Normal,
    StudentT { nu: f64 },
}

impl EllipticalReference {
    pub fn standard(&self) -> Result<QuantileFunction> {
        match *self {
            EllipticalReference::Normal => Ok(QuantileFunction::standard_normal()),
            EllipticalReference::StudentT { nu } => {
                if !(nu > 2.0) {
                    return param(format!("student_t generator requires nu > 2, got {nu}"));
                }
                QuantileFunction::student_t(nu, 0.0, ((nu - 2.0) / nu).sqrt())
            }
        }
    }

    /// Location-scale member `mean + scale · F₀`.
    pub fn located(&self, mean: f64, scale: f64) -> Result<QuantileFunction> {
        match *self {
            EllipticalReference::Normal => QuantileFunction::normal(mean, scale),
            EllipticalReference::StudentT { nu } => {
                if !(nu > 2.0) {
                    return param(format!("student_t generator requires nu > 2, got {nu}"));
                }
                QuantileFunction::student_t(nu, mean, scale * ((nu - 2.0) / nu).sqrt())
            }
        }
    }
}

fn normal_params(q: &QuantileFunction) -> Option<(f64, f64)> {
    match &q.kind {
        Kind::Normal { mean, sd } => Some((*mean, *sd)),
        Kind::Affine { base, shift, scale } => normal_params(base).map(|(m, s)| (shift + scale * m, scale * s)),
        _ => None,
    }
}

/// `(∫₀¹ (p − q)² du)^{1/2}`.
pub fn wasserstein2(p: &QuantileFunction, q: &QuantileFunction) -> f64 {
    if let (Some((m1, s1)), Some((m2, s2))) = (normal_params(p), normal_params(q)) {
        return ((m1 - m2).powi(2) + (s1 - s2).powi(2)).sqrt();
    }
    let mut pts = vec![0.0];
    pts.extend(p.breakpoints());
    pts.extend(q.breakpoints());
    pts.push(1.0);
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    let mut s = 0.0;
    for w in pts.windows(2) {
        s += integrate_unit(
            |u, v| {
                let d = p.value_uv(u, v) - q.value_uv(u, v);
                d * d
            },
            w[0],
            w[1],
        );
    }
    s.max(0.0).sqrt()
}

/// Read a single-column CSV sample.
pub fn read_sample_csv(path: &Path, has_header: bool) -> Result<Vec<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .from_path(path)
        .map_err(|e| Error::Param(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Param(e.to_string()))?;
        let field = rec.get(0).ok_or_else(|| Error::Param("empty CSV row".into()))?;
        out.push(field.trim().parse::<f64>().map_err(|e| Error::Param(format!("bad value {field:?}: {e}")))?);
    }
    Ok(out)
}

/// Read a two-column `(u, value)` CSV into a grid quantile.
pub fn read_grid_csv(path: &Path) -> Result<QuantileFunction> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Param(format!("cannot read {}: {e}", path.display())))?;
    let (mut u, mut v) = (Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Param(e.to_string()))?;
        let parse = |i: usize| -> Result<f64> {
            let f = rec.get(i).ok_or_else(|| Error::Param("grid CSV needs two columns".into()))?;
            f.trim().parse::<f64>().map_err(|e| Error::Param(format!("bad value {f:?}: {e}")))
        };
        u.push(parse(0)?);
        v.push(parse(1)?);
    }
    QuantileFunction::grid(u, v)
}

/// Non-uniform grid on [0,1] clustered toward both ends: `u = ½ (2s)^p` on the lower half.
pub fn clustered_grid(points: usize, exponent: f64) -> Vec<f64> {
    let n = points.max(3) - 1;
    (0..=n)
        .map(|i| {
            let s = i as f64 / n as f64;
            if s <= 0.5 {
                0.5 * (2.0 * s).powf(exponent)
            } else {
                1.0 - 0.5 * (2.0 * (1.0 - s)).powf(exponent)
            }
        })
        .collect()
}
