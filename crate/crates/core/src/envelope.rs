//! Concave envelopes of g and of g_λ(t) = g(t) + λ∫_{1−t}^1 F⁻¹, and the
//! derivative structure u ↦ (g_λ*)'(1−u) that drives the extremal quantile.
//!
//! Everything is computed in u-space on the standardized reference Z, where
//! F⁻¹ = μ_F + σ_F Z. With K(u) = g(1) − g(1−u) + λ'∫_0^u Z and λ' = λσ_F, the
//! derivative of the lower convex hull of K equals (g_λ*)'(1−u) − λμ_F.

use crate::distortion::{DistortionFunction, Shape, WeightPiece};
use crate::error::{Error, Result};
use crate::numerics::bisect_predicate;
use crate::reference::{clustered_grid, LinearSegment, QuantileFunction};
use serde::Serialize;
use std::io::Write;
use std::path::Path;

pub const DEFAULT_RESOLUTION: usize = 4097;
const THRESHOLD_TOL: f64 = 1e-12;

/// Public view of one segment of u ↦ (g_λ*)'(1−u).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnvSegment {
    pub lo: f64,
    pub hi: f64,
    pub kind: SegmentKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    /// `a + b u + λ F⁻¹(u)`: the envelope touches g_λ.
    Contact { a: f64, b: f64 },
    /// Constant `c`: the envelope bridges over g_λ.
    Bridge { c: f64 },
}

/// `a + b u + lam Z(u)` on `(lo, hi)`, in the standardized frame.
#[derive(Debug, Clone, Copy)]
struct Seg {
    lo: f64,
    hi: f64,
    a: f64,
    b: f64,
    lam: f64,
}

impl Seg {
    fn is_bridge(&self) -> bool {
        self.b == 0.0 && self.lam == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvelopeMethod {
    Concave,
    VarPlus,
    IqdPlus,
    EsMinusVar,
    GlueVar,
    Grid,
}

/// Derivative of the concave envelope of g_λ with its first two moments.
#[derive(Debug, Clone)]
pub struct EnvelopeDerivative {
    lambda: f64,
    lam_z: f64,
    g1: f64,
    mu_f: f64,
    sigma_f: f64,
    z: QuantileFunction,
    segs: Vec<Seg>,
    mean_z: f64,
    kappa: f64,
    resid: f64,
    method: EnvelopeMethod,
    flags: Vec<String>,
}

impl EnvelopeDerivative {
    fn assemble(
        ctx: &EnvelopeContext,
        lambda: f64,
        segs: Vec<Seg>,
        method: EnvelopeMethod,
        flags: Vec<String>,
    ) -> Self {
        let z = &ctx.z;
        let segs: Vec<Seg> = segs.into_iter().filter(|s| s.hi > s.lo).collect();
        let mut m = 0.0;
        let mut kappa = 0.0;
        let mut parts = Vec::with_capacity(segs.len());
        for s in &segs {
            let (l, r) = (s.lo, s.hi);
            let w = r - l;
            let m1 = 0.5 * (r - l) * (r + l);
            let m2 = (r - l) * (r * r + r * l + l * l) / 3.0;
            let p = z.partial_unchecked(l, r);
            let (uz, q) = if s.lam != 0.0 || s.b != 0.0 {
                (z.partial_u_unchecked(l, r), z.partial_sq_unchecked(l, r))
            } else {
                (0.0, z.partial_sq_unchecked(l, r))
            };
            m += s.a * w + s.b * m1 + s.lam * p;
            kappa += s.a * p + s.b * uz + s.lam * q;
            parts.push([w, m1, m2, p, uz, q]);
        }
        let mut resid = 0.0;
        for (s, [w, m1, m2, p, uz, q]) in segs.iter().zip(parts) {
            let aa = s.a - m;
            let bb = s.b;
            let ll = s.lam - kappa;
            resid += aa * aa * w + 2.0 * aa * bb * m1 + bb * bb * m2 + 2.0 * aa * ll * p + 2.0 * bb * ll * uz + ll * ll * q;
        }
        EnvelopeDerivative {
            lambda,
            lam_z: lambda * ctx.sigma_f,
            g1: ctx.g1,
            mu_f: ctx.mu_f,
            sigma_f: ctx.sigma_f,
            z: ctx.z.clone(),
            segs,
            mean_z: m,
            kappa,
            resid: resid.max(0.0),
            method,
            flags,
        }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn method(&self) -> EnvelopeMethod {
        self.method
    }

    /// Notes raised while locating thresholds (empty defining sets, fallbacks).
    pub fn flags(&self) -> &[String] {
        &self.flags
    }

    pub fn g1(&self) -> f64 {
        self.g1
    }

    pub fn segments(&self) -> Vec<EnvSegment> {
        let shift = self.lambda * self.mu_f;
        self.segs
            .iter()
            .map(|s| EnvSegment {
                lo: s.lo,
                hi: s.hi,
                kind: if s.is_bridge() {
                    SegmentKind::Bridge { c: s.a + shift }
                } else {
                    SegmentKind::Contact { a: s.a, b: s.b }
                },
            })
            .collect()
    }

    fn value_z(&self, u: f64) -> f64 {
        let i = self.segs.partition_point(|s| s.hi < u).min(self.segs.len() - 1);
        let s = self.segs[i];
        let zpart = if s.lam != 0.0 { s.lam * self.z.value(u) } else { 0.0 };
        s.a + s.b * u + zpart
    }

    /// (g_λ*)'(1−u).
    pub fn value(&self, u: f64) -> f64 {
        self.value_z(u) + self.lambda * self.mu_f
    }

    /// E[(g_λ*)'(V)] = g(1) + λμ_F.
    pub fn a_lambda(&self) -> f64 {
        self.mean_z + self.lambda * self.mu_f
    }

    pub fn variance(&self) -> f64 {
        self.kappa * self.kappa + self.resid
    }

    /// Stdev((g_λ*)'(V)).
    pub fn b_lambda(&self) -> f64 {
        self.variance().sqrt()
    }

    pub fn is_constant(&self) -> bool {
        self.b_lambda() <= 1e-13 * (1.0 + self.g1.abs() + self.lam_z.abs())
    }

    /// Cov(F⁻¹(V), (g_λ*)'(1−V)).
    pub fn covariance(&self) -> f64 {
        self.sigma_f * self.kappa
    }

    /// Corr(F⁻¹(V), (g_λ*)'(1−V)), zero for a constant derivative.
    pub fn correlation(&self) -> f64 {
        if self.is_constant() {
            0.0
        } else {
            (self.kappa / self.b_lambda()).clamp(-1.0, 1.0)
        }
    }

    /// 1 − Corr without cancellation: resid / (b (b + κ)).
    pub fn one_minus_corr(&self) -> f64 {
        if self.is_constant() {
            return 1.0;
        }
        let b = self.b_lambda();
        if self.kappa >= 0.0 {
            self.resid / (b * (b + self.kappa))
        } else {
            1.0 - self.kappa / b
        }
    }

    /// ρ_ĝ(H_λ) for the mean/std pair (μ, σ): μ g(1) + σ (b² − λ'κ)/b.
    pub fn worst_value(&self, mu: f64, sigma: f64) -> f64 {
        let b = self.b_lambda();
        mu * self.g1 + sigma * (self.kappa * (self.kappa - self.lam_z) + self.resid) / b
    }

    /// d_W(F, H_λ)² for the mean/std pair (μ, σ).
    pub fn distance_sq(&self, mu: f64, sigma: f64) -> f64 {
        let l = (self.mu_f - mu).powi(2) + (self.sigma_f - sigma).powi(2);
        l + 2.0 * sigma * self.sigma_f * self.one_minus_corr()
    }

    /// h_λ = μ + σ ((g_λ*)'(1−·) − a_λ)/b_λ as a piecewise quantile over Z.
    pub fn h_lambda(&self, mu: f64, sigma: f64) -> Result<QuantileFunction> {
        if self.is_constant() {
            return Err(Error::Regime(
                "envelope derivative is constant (b_λ = 0); the worst case is g(1)·μ".into(),
            ));
        }
        let k = sigma / self.b_lambda();
        let segments = self
            .segs
            .iter()
            .map(|s| LinearSegment { lo: s.lo, hi: s.hi, c0: mu + k * (s.a - self.mean_z), c1: k * s.b, c2: k * s.lam })
            .collect();
        QuantileFunction::piecewise(Some(self.z.clone()), segments)
    }

    /// Debug dump `t, value, segment_kind` of t ↦ (g_λ*)'(t).
    pub fn write_csv(&self, path: &Path, points: usize) -> Result<()> {
        let io = |e: std::io::Error| Error::Param(format!("cannot write {}: {e}", path.display()));
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(f, "t,value,segment_kind").map_err(io)?;
        let n = points.max(2);
        for i in 1..n {
            let t = i as f64 / n as f64;
            let u = 1.0 - t;
            let idx = self.segs.partition_point(|s| s.hi < u).min(self.segs.len() - 1);
            let kind = if self.segs[idx].is_bridge() { "constant" } else { "affine" };
            writeln!(f, "{t},{},{kind}", self.value(u)).map_err(io)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Family {
    Concave,
    VarPlus { alpha: f64 },
    IqdPlus { alpha: f64 },
    EsMinusVar { alpha1: f64, alpha2: f64 },
    Glue { alpha: f64, beta: f64, s1: f64, s2: f64, jump: f64 },
    Generic,
}

#[derive(Debug, Clone)]
struct Grid {
    u: Vec<f64>,
    kg: Vec<f64>,
    p: Vec<f64>,
    cont_left: Vec<bool>,
    cont_right: Vec<bool>,
    concave_corner: Vec<bool>,
    cell_convex: Vec<bool>,
}

/// Precomputed data for evaluating the envelope of g_λ at many λ.
#[derive(Debug, Clone)]
pub struct EnvelopeContext {
    g: DistortionFunction,
    g1: f64,
    mu_f: f64,
    sigma_f: f64,
    z: QuantileFunction,
    pieces: Vec<WeightPiece>,
    family: Family,
    resolution: usize,
    grid: Option<Grid>,
}

impl EnvelopeContext {
    /// `g` is replaced by its upper semicontinuous version, which has the same envelope.
    pub fn new(g: &DistortionFunction, reference: &QuantileFunction, resolution: usize) -> Result<Self> {
        let (mu_f, sigma_f) = reference.moments();
        if !mu_f.is_finite() || !sigma_f.is_finite() {
            return Err(Error::Param("reference distribution must have finite mean and variance".into()));
        }
        if reference.is_degenerate() {
            return Err(Error::Param("reference distribution is degenerate (zero variance)".into()));
        }
        let z = reference.standardize()?;
        let g = g.usc_version();
        let family = recognize(&g);
        let mut ctx = EnvelopeContext {
            g1: g.total_at_one(),
            pieces: g.weight_pieces(),
            g,
            mu_f,
            sigma_f,
            z,
            family,
            resolution: resolution.max(17),
            grid: None,
        };
        if ctx.family == Family::Generic {
            ctx.grid = Some(ctx.build_grid());
        }
        Ok(ctx)
    }

    /// Force the grid-hull path regardless of the family of g.
    pub fn with_grid(mut self) -> Self {
        self.family = Family::Generic;
        if self.grid.is_none() {
            self.grid = Some(self.build_grid());
        }
        self
    }

    pub fn distortion(&self) -> &DistortionFunction {
        &self.g
    }

    pub fn reference_moments(&self) -> (f64, f64) {
        (self.mu_f, self.sigma_f)
    }

    pub fn g1(&self) -> f64 {
        self.g1
    }

    pub fn standardized(&self) -> &QuantileFunction {
        &self.z
    }

    /// K_γ(u) = g(1) − ĝ(1−u).
    fn kg(&self, u: f64) -> f64 {
        let knots = self.g.knots();
        let t = 1.0 - u;
        let i = knots.partition_point(|k| k.t < t);
        for j in [i.saturating_sub(1), i.min(knots.len() - 1)] {
            if (knots[j].t - t).abs() <= 1e-15 {
                return self.g1 - knots[j].value;
            }
        }
        self.g1 - self.g.eval(t)
    }

    fn gamma(&self, u: f64) -> f64 {
        let i = self.pieces.partition_point(|p| p.hi <= u).min(self.pieces.len() - 1);
        self.pieces[i].value(u)
    }

    fn piece_index(&self, u: f64) -> usize {
        self.pieces.partition_point(|p| p.hi <= u).min(self.pieces.len() - 1)
    }

    fn build_grid(&self) -> Grid {
        let mut knots_u: Vec<(f64, f64)> = self.g.knots().iter().map(|k| (1.0 - k.t, k.t)).collect();
        knots_u.reverse();
        let mut nodes: Vec<(f64, f64, Option<usize>)> =
            clustered_grid(self.resolution, 2.0).into_iter().map(|u| (u, 1.0 - u, None)).collect();
        for (i, &(u, t)) in knots_u.iter().enumerate() {
            nodes.push((u, t, Some(i)));
        }
        nodes.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.2.is_some().cmp(&a.2.is_some())));
        nodes.dedup_by(|b, a| (a.0 - b.0).abs() <= 1e-15);
        let knots = self.g.knots();
        let nk = knots.len();
        let n = nodes.len();
        let u: Vec<f64> = nodes.iter().map(|x| x.0).collect();
        let mut kg = Vec::with_capacity(n);
        let mut cont_left = Vec::with_capacity(n);
        let mut cont_right = Vec::with_capacity(n);
        let mut concave_corner = Vec::with_capacity(n);
        for &(uu, t, knot) in &nodes {
            match knot {
                Some(ui) => {
                    let k = knots[nk - 1 - ui];
                    kg.push(self.g1 - k.value);
                    cont_left.push(k.right == k.value);
                    cont_right.push(k.left == k.value);
                    let corner = if ui > 0 && ui + 1 < nk {
                        let gl = self.pieces[ui - 1].value(uu);
                        let gr = self.pieces[ui].value(uu);
                        gr < gl - 1e-14 * (1.0 + gl.abs())
                    } else {
                        false
                    };
                    concave_corner.push(corner);
                }
                None => {
                    kg.push(self.g1 - self.g.eval(t));
                    cont_left.push(true);
                    cont_right.push(true);
                    concave_corner.push(false);
                }
            }
        }
        let cell_convex = u
            .windows(2)
            .map(|w| self.pieces[self.piece_index(0.5 * (w[0] + w[1]))].b >= 0.0)
            .collect();
        let p = self.z.cumulative_on(&u);
        Grid { u, kg, p, cont_left, cont_right, concave_corner, cell_convex }
    }

    /// Envelope derivative at λ ≥ 0 (original scale of F).
    pub fn at(&self, lambda: f64) -> Result<EnvelopeDerivative> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Param(format!("lambda must be finite and non-negative, got {lambda}")));
        }
        let lz = lambda * self.sigma_f;
        let contact = |lo: f64, hi: f64| self.contact_run(lo, hi, lz);
        let mut flags = Vec::new();
        let named = match self.family {
            Family::Concave => Some((contact(0.0, 1.0), EnvelopeMethod::Concave)),
            Family::VarPlus { alpha } => {
                let (r, empty) = right_tangent(self, &self.z, lz, alpha, 1.0);
                note(&mut flags, empty, "VaR+ threshold set empty; using the interval endpoint");
                let c = self.chord(alpha, r, lz);
                let mut s = contact(0.0, alpha);
                s.push(bridge(alpha, r, c));
                s.extend(contact(r, 1.0));
                Some((s, EnvelopeMethod::VarPlus))
            }
            Family::IqdPlus { alpha } => {
                let (r, e1) = right_tangent(self, &self.z, lz, 1.0 - alpha, 1.0);
                let (l, e2) = left_tangent(self, &self.z, lz, alpha, 0.0);
                note(&mut flags, e1, "IQD+ upper threshold set empty; using the interval endpoint");
                note(&mut flags, e2, "IQD+ lower threshold set empty; using the interval endpoint");
                let mut s = contact(0.0, l);
                s.push(bridge(l, alpha, self.chord(l, alpha, lz)));
                s.extend(contact(alpha, 1.0 - alpha));
                s.push(bridge(1.0 - alpha, r, self.chord(1.0 - alpha, r, lz)));
                s.extend(contact(r, 1.0));
                Some((s, EnvelopeMethod::IqdPlus))
            }
            Family::EsMinusVar { alpha2, .. } => {
                let (l, empty) = left_tangent(self, &self.z, lz, alpha2, 0.0);
                note(&mut flags, empty, "ES-VaR threshold set empty; using the interval endpoint");
                let mut s = contact(0.0, l);
                s.push(bridge(l, alpha2, self.chord(l, alpha2, lz)));
                s.extend(contact(alpha2, 1.0));
                Some((s, EnvelopeMethod::EsMinusVar))
            }
            Family::Glue { alpha, .. } => {
                let (r, empty) = right_tangent(self, &self.z, lz, alpha, 1.0);
                note(&mut flags, empty, "GlueVaR threshold set empty; using the interval endpoint");
                let mut s = contact(0.0, alpha);
                s.push(bridge(alpha, r, self.chord(alpha, r, lz)));
                s.extend(contact(r, 1.0));
                Some((s, EnvelopeMethod::GlueVar))
            }
            Family::Generic => None,
        };
        if let Some((segs, method)) = named {
            let env = EnvelopeDerivative::assemble(self, lambda, segs, method, flags);
            if is_monotone(&env) {
                return Ok(env);
            }
            let mut env = self.grid_envelope(lambda, lz)?;
            env.flags.push(format!("{method:?} closed form was not monotone; used the grid hull"));
            return Ok(env);
        }
        self.grid_envelope(lambda, lz)
    }

    /// Contact segments `γ(u) + λ'Z(u)` covering `(lo, hi)`, split at the pieces of γ.
    fn contact_run(&self, lo: f64, hi: f64, lz: f64) -> Vec<Seg> {
        if hi <= lo {
            return Vec::new();
        }
        self.pieces
            .iter()
            .filter(|p| p.hi > lo && p.lo < hi)
            .map(|p| Seg { lo: p.lo.max(lo), hi: p.hi.min(hi), a: p.a, b: p.b, lam: lz })
            .collect()
    }

    /// Chord slope of K between `l < r`, using point values (lsc) at the ends.
    fn chord(&self, l: f64, r: f64, lz: f64) -> f64 {
        (self.kg(r) - self.kg(l) + lz * self.z.partial_unchecked(l, r)) / (r - l)
    }

    fn grid_envelope(&self, lambda: f64, lz: f64) -> Result<EnvelopeDerivative> {
        let built;
        let grid = match &self.grid {
            Some(g) => g,
            None => {
                built = self.build_grid();
                &built
            }
        };
        let n = grid.u.len();
        let k: Vec<f64> = (0..n).map(|j| grid.kg[j] + lz * grid.p[j]).collect();
        let hull = lower_hull(&grid.u, &k);

        let mut bridges: Vec<Bridge> = Vec::new();
        for w in hull.windows(2) {
            let (i, j) = (w[0], w[1]);
            let contact = j == i + 1 && grid.cell_convex[i] && grid.cont_right[i] && grid.cont_left[j];
            if !contact {
                bridges.push(Bridge { li: i, ri: j, l: grid.u[i], r: grid.u[j], kl: None, kr: None });
            }
        }
        let raw = bridges.clone();
        self.refine_bridges(grid, lz, &mut bridges);
        let env = self.assemble_bridges(grid, lambda, lz, &bridges);
        if is_monotone(&env) {
            return Ok(env);
        }
        let mut env = self.assemble_bridges(grid, lambda, lz, &raw);
        env.flags.push("tangent refinement was not monotone; kept grid vertices".into());
        Ok(env)
    }

    fn assemble_bridges(&self, grid: &Grid, lambda: f64, lz: f64, bridges: &[Bridge]) -> EnvelopeDerivative {
        let mut segs = Vec::new();
        let mut cursor = 0.0;
        for b in bridges {
            if b.l > cursor {
                segs.extend(self.contact_run(cursor, b.l, lz));
            }
            let kl = b.kl.unwrap_or(grid.kg[b.li]);
            let kr = b.kr.unwrap_or(grid.kg[b.ri]);
            let c = (kr - kl + lz * self.z.partial_unchecked(b.l, b.r)) / (b.r - b.l);
            segs.push(bridge(b.l, b.r, c));
            cursor = b.r;
        }
        if cursor < 1.0 {
            segs.extend(self.contact_run(cursor, 1.0, lz));
        }
        EnvelopeDerivative::assemble(self, lambda, segs, EnvelopeMethod::Grid, Vec::new())
    }

    /// Move bridge endpoints that sit on convex arcs to the exact tangent points.
    fn refine_bridges(&self, grid: &Grid, lz: f64, bridges: &mut Vec<Bridge>) {
        let n = grid.u.len();
        for _ in 0..8 {
            for bi in 0..bridges.len() {
                let lower_limit = if bi > 0 { bridges[bi - 1].r } else { 0.0 };
                let upper_limit = if bi + 1 < bridges.len() { bridges[bi + 1].l } else { 1.0 };
                let mut b = bridges[bi];
                for _ in 0..30 {
                    let (ol, or) = (b.l, b.r);
                    let kl = b.kl.unwrap_or(grid.kg[b.li]);
                    if let Some((lo, hi)) = arc_bracket(grid, b.ri, n) {
                        let lo = lo.max(b.l);
                        let hi = hi.min(upper_limit);
                        if hi > lo {
                            let pred = |x: f64| {
                                let c = (self.kg(x) - kl + lz * self.z.partial_unchecked(b.l, x)) / (x - b.l);
                                c > self.gamma(x) + lz * self.z.value(x)
                            };
                            let x = settle(pred, lo, hi);
                            b.set_right(x, grid, self.kg(x));
                        }
                    }
                    let kr = b.kr.unwrap_or(grid.kg[b.ri]);
                    if let Some((lo, hi)) = arc_bracket(grid, b.li, n) {
                        let lo = lo.max(lower_limit);
                        let hi = hi.min(b.r);
                        if hi > lo {
                            let pred = |x: f64| {
                                let c = (kr - self.kg(x) + lz * self.z.partial_unchecked(x, b.r)) / (b.r - x);
                                self.gamma(x) + lz * self.z.value(x) < c
                            };
                            let x = settle(pred, lo, hi);
                            b.set_left(x, grid, self.kg(x));
                        }
                    }
                    if (b.l - ol).abs() <= 1e-15 && (b.r - or).abs() <= 1e-15 {
                        break;
                    }
                }
                bridges[bi] = b;
            }
            let before = bridges.len();
            let mut merged: Vec<Bridge> = Vec::with_capacity(before);
            for b in bridges.drain(..) {
                match merged.last_mut() {
                    Some(prev) if prev.r > b.l + 1e-14 => {
                        prev.r = b.r;
                        prev.ri = b.ri;
                        prev.kr = b.kr;
                    }
                    _ => merged.push(b),
                }
            }
            *bridges = merged;
            if bridges.len() == before {
                break;
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Bridge {
    li: usize,
    ri: usize,
    l: f64,
    r: f64,
    kl: Option<f64>,
    kr: Option<f64>,
}

impl Bridge {
    fn set_right(&mut self, x: f64, grid: &Grid, kx: f64) {
        if let Some(j) = node_at(grid, x) {
            self.r = grid.u[j];
            self.ri = j;
            self.kr = None;
        } else {
            self.r = x;
            self.kr = Some(kx);
        }
    }

    fn set_left(&mut self, x: f64, grid: &Grid, kx: f64) {
        if let Some(j) = node_at(grid, x) {
            self.l = grid.u[j];
            self.li = j;
            self.kl = None;
        } else {
            self.l = x;
            self.kl = Some(kx);
        }
    }
}

fn node_at(grid: &Grid, x: f64) -> Option<usize> {
    let j = grid.u.partition_point(|&u| u < x);
    [j.saturating_sub(1), j.min(grid.u.len() - 1)].into_iter().find(|&i| (grid.u[i] - x).abs() <= 1e-15)
}

/// Interval around node `i` along which K is a continuous convex arc.
fn arc_bracket(grid: &Grid, i: usize, n: usize) -> Option<(f64, f64)> {
    if grid.concave_corner[i] {
        return None;
    }
    let lo = if i > 0 && grid.cell_convex[i - 1] && grid.cont_left[i] { grid.u[i - 1] } else { grid.u[i] };
    let hi = if i + 1 < n && grid.cell_convex[i] && grid.cont_right[i] { grid.u[i + 1] } else { grid.u[i] };
    if hi > lo {
        Some((lo, hi))
    } else {
        None
    }
}

/// Bisection for the switch point of `pred` on `(lo, hi)`, snapping to the ends.
fn settle<P: Fn(f64) -> bool>(pred: P, lo: f64, hi: f64) -> f64 {
    let (a, b) = bisect_predicate(pred, lo, hi, 1e-16 * (1.0 + hi.abs()), 200);
    0.5 * (a + b)
}

fn bridge(lo: f64, hi: f64, c: f64) -> Seg {
    Seg { lo, hi, a: c, b: 0.0, lam: 0.0 }
}

fn note(flags: &mut Vec<String>, cond: bool, msg: &str) {
    if cond {
        flags.push(msg.to_string());
    }
}

fn is_monotone(env: &EnvelopeDerivative) -> bool {
    let z = &env.z;
    let mut prev = f64::NEG_INFINITY;
    for s in &env.segs {
        let eps = 1e-6 * (1.0 + prev.abs().min(1e300) + s.a.abs());
        let at = |u: f64, right: bool| {
            let zz = if s.lam == 0.0 {
                0.0
            } else if right {
                z.value_right(u)
            } else {
                z.value(u)
            };
            let zz = if zz.is_finite() { s.lam * zz } else { 0.0 };
            s.a + s.b * u + zz
        };
        if s.b < 0.0 && s.lam == 0.0 {
            return false;
        }
        let first = at(s.lo, true);
        let last = at(s.hi, false);
        if s.lo > 0.0 && first < prev - eps {
            return false;
        }
        if s.hi < 1.0 {
            prev = last;
        }
    }
    true
}

/// Lower convex hull indices of the points `(x_j, y_j)`, x increasing.
fn lower_hull(x: &[f64], y: &[f64]) -> Vec<usize> {
    let mut h: Vec<usize> = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        while h.len() >= 2 {
            let a = h[h.len() - 2];
            let b = h[h.len() - 1];
            let lhs = (y[b] - y[a]) * (x[j] - x[a]);
            let rhs = (y[j] - y[a]) * (x[b] - x[a]);
            if lhs >= rhs {
                h.pop();
            } else {
                break;
            }
        }
        h.push(j);
    }
    h
}

fn recognize(g: &DistortionFunction) -> Family {
    if g.shape() == Shape::Concave {
        return Family::Concave;
    }
    let pieces = g.weight_pieces();
    let jumps = g.jumps();
    let g1 = g.total_at_one();
    if pieces.iter().any(|p| p.b != 0.0) {
        return Family::Generic;
    }
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()));
    let levels: Vec<(f64, f64, f64)> = pieces.iter().map(|p| (p.lo, p.hi, p.a)).collect();
    let all_zero = levels.iter().all(|l| l.2 == 0.0);
    if all_zero && jumps.len() == 1 && g1 == 1.0 && jumps[0].1 == 1.0 && jumps[0].2 == 0.0 {
        return Family::VarPlus { alpha: jumps[0].0 };
    }
    if all_zero && jumps.len() == 2 && g1 == 0.0 {
        let mut js = jumps.clone();
        js.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (lo, hi) = (js[0], js[1]);
        if lo.1 == 0.0 && lo.2 == -1.0 && hi.1 == 1.0 && hi.2 == 0.0 && close(lo.0 + hi.0, 1.0) && lo.0 < 0.5 {
            return Family::IqdPlus { alpha: lo.0 };
        }
    }
    if jumps.len() == 1 && g1 == 0.0 && jumps[0].1 == 0.0 && close(jumps[0].2, -1.0) {
        let alpha2 = jumps[0].0;
        let first = levels[0];
        let rest = &levels[1..];
        if first.2 == 0.0 && !rest.is_empty() {
            let s = rest[0].2;
            let alpha1 = first.1;
            if rest.iter().all(|l| close(l.2, s)) && close(s * (1.0 - alpha1), 1.0) && alpha1 < alpha2 {
                return Family::EsMinusVar { alpha1, alpha2 };
            }
        }
    }
    if jumps.len() == 1 && close(g1, 1.0) && jumps[0].2 == 0.0 && jumps[0].1 > 0.0 {
        let alpha = jumps[0].0;
        let zero_below = levels.iter().filter(|l| l.1 <= alpha).all(|l| l.2 == 0.0);
        let above: Vec<_> = levels.iter().filter(|l| l.0 >= alpha).collect();
        let monotone = above.windows(2).all(|w| w[1].2 >= w[0].2) && above.iter().all(|l| l.2 >= 0.0);
        if zero_below && monotone && (1..=2).contains(&above.len()) {
            let s1 = above.last().map(|l| l.2).unwrap_or(0.0);
            let (beta, s2) = if above.len() == 2 { (above[1].0, above[0].2) } else { (alpha, s1) };
            return Family::Glue { alpha, beta, s1, s2, jump: jumps[0].1 };
        }
    }
    Family::Generic
}

/// Smallest `r ∈ (v, hi]` where the chord of K from the vertex `v` stays above the
/// slope of K, i.e. the tangent point of the bridge leaving `v` to the right.
/// Searched in `t = 1 − r` for precision in the upper tail.
fn right_tangent(ctx: &EnvelopeContext, z: &QuantileFunction, lz: f64, v: f64, hi: f64) -> (f64, bool) {
    let kv = ctx.kg(v);
    let cond = |t: f64| {
        let r = 1.0 - t;
        if r <= v {
            return true;
        }
        let chord = (ctx.kg(r) - kv + lz * z.partial_unchecked(v, r)) / ((1.0 - v) - t);
        let zr = z.value_uv(r, t);
        let rhs = ctx.gamma(r) + if lz == 0.0 { 0.0 } else { lz * zr };
        chord >= rhs
    };
    let (t, empty) = inf_threshold(cond, 1.0 - hi, 1.0 - v);
    (1.0 - t, empty)
}

/// Largest-measure bridge ending at vertex `v` from the left: smallest `l ∈ [lo, v)`
/// where the chord from `l` to `v` is at most the slope of K at `l`.
fn left_tangent(ctx: &EnvelopeContext, z: &QuantileFunction, lz: f64, v: f64, lo: f64) -> (f64, bool) {
    let kv = ctx.kg(v);
    let cond = |l: f64| {
        if l >= v {
            return true;
        }
        let chord = (kv - ctx.kg(l) + lz * z.partial_unchecked(l, v)) / (v - l);
        let zl = z.value(l);
        let rhs = ctx.gamma(l) + if lz == 0.0 { 0.0 } else { lz * zl };
        chord <= rhs
    };
    inf_threshold(cond, lo, v)
}

/// `inf{x ∈ [lo, hi): cond(x)}` for a condition that holds on a terminal
/// interval. Bisection to 1e−12, then relative refinement for tiny results.
/// Returns `(hi, true)` when the condition is never met.
fn inf_threshold<C: Fn(f64) -> bool>(cond: C, lo: f64, hi: f64) -> (f64, bool) {
    if cond(lo) {
        return (lo, false);
    }
    let probe = hi - (hi - lo) * 1e-13;
    if !cond(probe) {
        return (hi, true);
    }
    let (_, mut b) = bisect_predicate(|x| !cond(x), lo, probe, THRESHOLD_TOL * 1e-2, 200);
    if lo == 0.0 && b < 1e-9 {
        let (_, lb) = bisect_predicate(|s| !cond(s.exp()), (1e-300f64).ln(), b.ln(), 1e-12, 200);
        b = lb.exp();
    }
    (b, false)
}

/// A threshold together with its bridge constant in the original scale of F.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Threshold {
    pub t: f64,
    pub c: f64,
    pub empty: bool,
}

fn threshold_context(g: DistortionFunction, reference: &QuantileFunction) -> Result<EnvelopeContext> {
    EnvelopeContext::new(&g, reference, DEFAULT_RESOLUTION)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda >= 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::Param(format!("lambda must be finite and non-negative, got {lambda}")))
    }
}

/// t_{1−α,λ} for VaR⁺_α and the constant of (g_λ*)' on (α, 1 − t).
pub fn threshold_var_plus(alpha: f64, lambda: f64, reference: &QuantileFunction) -> Result<Threshold> {
    check_lambda(lambda)?;
    let g = crate::distortion::make_distortion(&crate::distortion::MetricSpec::VarPlus(alpha))?;
    let ctx = threshold_context(g, reference)?;
    let lz = lambda * ctx.sigma_f;
    let (r, empty) = right_tangent(&ctx, &ctx.z, lz, alpha, 1.0);
    let c = ctx.chord(alpha, r, lz) + lambda * ctx.mu_f;
    Ok(Threshold { t: 1.0 - r, c, empty })
}

/// `(t_{α,λ}, t̂_{α,λ})` for IQD⁺_α with the upper and lower bridge constants.
pub fn threshold_iqd(alpha: f64, lambda: f64, reference: &QuantileFunction) -> Result<(Threshold, Threshold)> {
    check_lambda(lambda)?;
    let g = crate::distortion::make_distortion(&crate::distortion::MetricSpec::IqdPlus(alpha))?;
    let ctx = threshold_context(g, reference)?;
    let lz = lambda * ctx.sigma_f;
    let shift = lambda * ctx.mu_f;
    let (r, e1) = right_tangent(&ctx, &ctx.z, lz, 1.0 - alpha, 1.0);
    let (l, e2) = left_tangent(&ctx, &ctx.z, lz, alpha, 0.0);
    Ok((
        Threshold { t: 1.0 - r, c: ctx.chord(1.0 - alpha, r, lz) + shift, empty: e1 },
        Threshold { t: 1.0 - l, c: ctx.chord(l, alpha, lz) + shift, empty: e2 },
    ))
}

/// `(u_{α1,α2,λ}, c_{α1,α2,λ})` for the ES − VaR difference.
pub fn threshold_es_var(alpha1: f64, alpha2: f64, lambda: f64, reference: &QuantileFunction) -> Result<Threshold> {
    check_lambda(lambda)?;
    let g = crate::distortion::make_distortion(&crate::distortion::MetricSpec::EsMinusVar(alpha1, alpha2))?;
    let ctx = threshold_context(g, reference)?;
    let lz = lambda * ctx.sigma_f;
    let (l, empty) = left_tangent(&ctx, &ctx.z, lz, alpha2, 0.0);
    Ok(Threshold { t: 1.0 - l, c: ctx.chord(l, alpha2, lz) + lambda * ctx.mu_f, empty })
}

/// `(u^{h1,h2}_{α,β,λ}, c^{h1,h2}_{α,β,λ})` for the usc GlueVaR distortion.
pub fn threshold_gluevar(
    alpha: f64,
    beta: f64,
    h1: f64,
    h2: f64,
    lambda: f64,
    reference: &QuantileFunction,
) -> Result<Threshold> {
    check_lambda(lambda)?;
    if beta > alpha && h1 / (1.0 - beta) < (h2 - h1) / (beta - alpha) {
        return Err(Error::Param(format!(
            "GlueVaR thresholds need h1/(1-beta) >= (h2-h1)/(beta-alpha), got {} < {}",
            h1 / (1.0 - beta),
            (h2 - h1) / (beta - alpha)
        )));
    }
    let g = crate::distortion::make_distortion(&crate::distortion::MetricSpec::GlueVar { beta, alpha, h1, h2 })?;
    let ctx = threshold_context(g, reference)?;
    let lz = lambda * ctx.sigma_f;
    let (r, empty) = right_tangent(&ctx, &ctx.z, lz, alpha, 1.0);
    Ok(Threshold { t: 1.0 - r, c: ctx.chord(alpha, r, lz) + lambda * ctx.mu_f, empty })
}

/// Envelope derivative of g_λ; a constant derivative violates the standing assumption.
pub fn g_lambda_envelope(
    g: &DistortionFunction,
    reference: &QuantileFunction,
    lambda: f64,
    resolution: usize,
) -> Result<EnvelopeDerivative> {
    let ctx = EnvelopeContext::new(g, reference, resolution)?;
    let env = ctx.at(lambda)?;
    if env.is_constant() {
        return Err(Error::Regime(format!(
            "(g_λ*)' is constant at λ = {lambda}; the worst case reduces to g(1)·μ"
        )));
    }
    Ok(env)
}

/// Corr(F⁻¹(V), (g*)'(1−V)), zero when (g*)' is constant.
pub fn c0_correlation(g: &DistortionFunction, reference: &QuantileFunction) -> Result<f64> {
    let ctx = EnvelopeContext::new(g, reference, DEFAULT_RESOLUTION)?;
    Ok(ctx.at(0.0)?.correlation().max(0.0))
}

/// Smallest concave majorant of g in H.
pub fn concave_envelope(g: &DistortionFunction) -> Result<DistortionFunction> {
    if g.is_concave() {
        return Ok(g.usc_version());
    }
    let reference = QuantileFunction::standard_normal();
    let env = EnvelopeContext::new(g, &reference, DEFAULT_RESOLUTION)?.with_grid().at(0.0)?;
    from_envelope(&env)
}

/// Largest convex minorant of g in H.
pub fn convex_envelope(g: &DistortionFunction) -> Result<DistortionFunction> {
    Ok(concave_envelope(&g.negate())?.negate())
}

/// Rebuild g* in t-space from the u-space derivative at λ = 0.
fn from_envelope(env: &EnvelopeDerivative) -> Result<DistortionFunction> {
    use crate::distortion::{Knot, Piece};
    let mut knots = vec![Knot::continuous(0.0, 0.0)];
    let mut pieces = Vec::new();
    let mut acc = 0.0;
    for s in env.segs.iter().rev() {
        let (t0, t1) = (1.0 - s.hi, 1.0 - s.lo);
        if t1 - t0 <= 1e-15 {
            continue;
        }
        let slope = s.a + s.b * s.hi;
        let curvature = -0.5 * s.b;
        let d = t1 - t0;
        acc += slope * d + curvature * d * d;
        pieces.push(Piece { slope, curvature });
        knots.push(Knot::continuous(t1, acc));
    }
    if let Some(last) = knots.last_mut() {
        last.t = 1.0;
        last.left = env.g1;
        last.value = env.g1;
        last.right = env.g1;
    }
    DistortionFunction::new(knots, pieces)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distortion::{make_distortion, rho, MetricSpec};

    fn normal() -> QuantileFunction {
        QuantileFunction::standard_normal()
    }

    #[test]
    fn concave_family_moments() {
        let g = make_distortion(&MetricSpec::Es(0.9)).unwrap();
        let ctx = EnvelopeContext::new(&g, &normal(), DEFAULT_RESOLUTION).unwrap();
        let env = ctx.at(0.7).unwrap();
        assert_eq!(env.method(), EnvelopeMethod::Concave);
        assert!((env.a_lambda() - 1.0).abs() < 1e-12);
        let c0 = ctx.at(0.0).unwrap().correlation();
        let es = rho(&g, &normal()).unwrap();
        assert!((c0 - es / 3.0).abs() < 1e-12);
    }

    #[test]
    fn var_plus_named_matches_grid() {
        let g = make_distortion(&MetricSpec::VarPlus(0.95)).unwrap();
        let f = QuantileFunction::normal(1.0, 2.0).unwrap();
        let ctx = EnvelopeContext::new(&g, &f, DEFAULT_RESOLUTION).unwrap();
        let grid = ctx.clone().with_grid();
        for lam in [0.0, 0.01, 0.3, 5.0, 300.0] {
            let a = ctx.at(lam).unwrap();
            let b = grid.at(lam).unwrap();
            assert_eq!(a.method(), EnvelopeMethod::VarPlus);
            assert!((a.b_lambda() - b.b_lambda()).abs() < 1e-9 * (1.0 + a.b_lambda()), "{lam}");
            assert!((a.one_minus_corr() - b.one_minus_corr()).abs() < 1e-9, "{lam}");
            assert!((a.a_lambda() - (1.0 + lam)).abs() < 1e-9);
        }
    }

    #[test]
    fn var_plus_at_zero_is_cantelli_step() {
        let t = threshold_var_plus(0.9, 0.0, &normal()).unwrap();
        assert_eq!(t.t, 0.0);
        assert!((t.c - 10.0).abs() < 1e-12);
        let env = EnvelopeContext::new(&make_distortion(&MetricSpec::VarPlus(0.9)).unwrap(), &normal(), 64)
            .unwrap()
            .at(0.0)
            .unwrap();
        assert!((env.b_lambda() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn named_families_match_grid() {
        let specs = [
            MetricSpec::IqdPlus(0.1),
            MetricSpec::EsMinusVar(0.8, 0.95),
            MetricSpec::GlueVar { beta: 0.975, alpha: 0.95, h1: 1.0 / 3.0, h2: 2.0 / 3.0 },
            MetricSpec::GlueVar { beta: 0.95, alpha: 0.95, h1: 0.4, h2: 0.4 },
        ];
        let f = QuantileFunction::student_t(5.0, 0.0, 1.0).unwrap();
        for spec in specs {
            let g = make_distortion(&spec).unwrap();
            let ctx = EnvelopeContext::new(&g, &f, DEFAULT_RESOLUTION).unwrap();
            assert_ne!(ctx.at(0.0).unwrap().method(), EnvelopeMethod::Grid, "{spec}");
            let grid = ctx.clone().with_grid();
            for lam in [0.0, 0.05, 1.0, 40.0] {
                let a = ctx.at(lam).unwrap();
                let b = grid.at(lam).unwrap();
                assert!((a.b_lambda() - b.b_lambda()).abs() < 1e-8 * (1.0 + a.b_lambda()), "{spec} {lam} {} {} {:?} {:?}", a.b_lambda(), b.b_lambda(), a.segments(), b.segments());
                assert!((a.worst_value(0.0, 1.0) - b.worst_value(0.0, 1.0)).abs() < 1e-8, "{spec} {lam}");
            }
        }
    }

    #[test]
    fn correlation_tends_to_one() {
        let g = make_distortion(&MetricSpec::VarPlus(0.95)).unwrap();
        let ctx = EnvelopeContext::new(&g, &normal(), DEFAULT_RESOLUTION).unwrap();
        let mut prev = 1.0;
        for lam in [1.0, 10.0, 100.0, 1e4, 1e6] {
            let d = ctx.at(lam).unwrap().one_minus_corr();
            assert!(d < prev);
            prev = d;
        }
        assert!(prev < 1e-8);
    }

    #[test]
    fn mmd_envelope() {
        let g = make_distortion(&MetricSpec::Mmd).unwrap();
        let e = concave_envelope(&g).unwrap();
        for i in 0..=20 {
            let t = i as f64 / 20.0;
            assert!((e.eval(t) - g.eval(t)).abs() < 1e-12);
        }
        let v = make_distortion(&MetricSpec::VarPlus(0.8)).unwrap();
        let e = concave_envelope(&v).unwrap();
        for i in 0..=20 {
            let t = i as f64 / 20.0;
            assert!((e.eval(t) - (t / 0.2).min(1.0)).abs() < 1e-12, "{t}");
        }
    }

    #[test]
    fn thresholds_at_lambda_zero() {
        let f = normal();
        let (up, lo) = threshold_iqd(0.2, 0.0, &f).unwrap();
        assert_eq!(up.t, 0.0);
        assert_eq!(lo.t, 1.0);
        assert!((up.c - 5.0).abs() < 1e-12 && (lo.c + 5.0).abs() < 1e-12, "{up:?} {lo:?}");
        let e = threshold_es_var(0.5, 0.9, 0.0, &f).unwrap();
        assert!(e.t > 0.1 && e.t <= 1.0);
        let gl = threshold_gluevar(0.95, 0.975, 1.0 / 3.0, 2.0 / 3.0, 0.0, &f).unwrap();
        assert!(gl.t >= 0.0 && gl.t < 0.05);
    }
}
