//! Distortion functions of bounded variation, their weight functions, and ρ_g.

use crate::error::{param, Error, Result};
use crate::reference::QuantileFunction;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Breakpoint of a distortion function with its left limit, point value and right limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Knot {
    pub t: f64,
    pub left: f64,
    pub value: f64,
    pub right: f64,
}

impl Knot {
    pub fn continuous(t: f64, value: f64) -> Self {
        Knot { t, left: value, value, right: value }
    }
}

/// On `(t_i, t_{i+1})`: `g(t) = right_i + slope (t - t_i) + curvature (t - t_i)²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Piece {
    pub slope: f64,
    #[serde(default)]
    pub curvature: f64,
}

impl Piece {
    pub fn linear(slope: f64) -> Self {
        Piece { slope, curvature: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Concave,
    Convex,
    General,
}

/// Piecewise polynomial (degree ≤ 2) function on [0,1] with explicit jumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDistortion", into = "RawDistortion")]
pub struct DistortionFunction {
    knots: Vec<Knot>,
    pieces: Vec<Piece>,
    shape: Shape,
}

#[derive(Serialize, Deserialize)]
struct RawDistortion {
    knots: Vec<Knot>,
    pieces: Vec<Piece>,
}

impl TryFrom<RawDistortion> for DistortionFunction {
    type Error = Error;
    fn try_from(r: RawDistortion) -> Result<Self> {
        DistortionFunction::new(r.knots, r.pieces)
    }
}

impl From<DistortionFunction> for RawDistortion {
    fn from(g: DistortionFunction) -> Self {
        RawDistortion { knots: g.knots, pieces: g.pieces }
    }
}

const MATCH_TOL: f64 = 1e-12;

impl DistortionFunction {
    /// Build from knots and the pieces between them, checking membership in H.
    pub fn new(knots: Vec<Knot>, pieces: Vec<Piece>) -> Result<Self> {
        if knots.len() < 2 || pieces.len() + 1 != knots.len() {
            return param("a distortion needs n+1 knots for n pieces, n ≥ 1");
        }
        if knots[0].t != 0.0 || knots[knots.len() - 1].t != 1.0 {
            return param("first breakpoint must be 0 and last must be 1");
        }
        for w in knots.windows(2) {
            if !(w[1].t > w[0].t) {
                return param("breakpoints must be strictly increasing");
            }
        }
        let k0 = knots[0];
        if k0.value != 0.0 || k0.right != 0.0 {
            return param("g(0) and g(0+) must both be 0");
        }
        let kn = knots[knots.len() - 1];
        if kn.value != kn.left {
            return param("g(1) must equal g(1-)");
        }
        let scale = knots.iter().map(|k| k.value.abs().max(k.left.abs()).max(k.right.abs())).fold(1.0, f64::max);
        for (i, p) in pieces.iter().enumerate() {
            if !p.slope.is_finite() || !p.curvature.is_finite() {
                return param("slopes must be finite");
            }
            let w = knots[i + 1].t - knots[i].t;
            let end = knots[i].right + p.slope * w + p.curvature * w * w;
            if (end - knots[i + 1].left).abs() > MATCH_TOL * scale.max(p.slope.abs()) {
                return param(format!(
                    "piece {i} ends at {end} but the next knot has left limit {}",
                    knots[i + 1].left
                ));
            }
        }
        let mut knots = knots;
        knots[0].left = 0.0;
        let last = knots.len() - 1;
        knots[last].right = knots[last].value;
        let mut g = DistortionFunction { knots, pieces, shape: Shape::General };
        g.shape = g.classify();
        Ok(g)
    }

    /// Continuous piecewise-linear function through `(t_i, g_i)` with `t_0 = 0`, `t_n = 1`, `g_0 = 0`.
    pub fn from_points(ts: &[f64], gs: &[f64]) -> Result<Self> {
        if ts.len() != gs.len() || ts.len() < 2 {
            return param("from_points needs matching arrays of length ≥ 2");
        }
        let knots = ts.iter().zip(gs).map(|(&t, &g)| Knot::continuous(t, g)).collect();
        let pieces = (0..ts.len() - 1)
            .map(|i| Piece::linear((gs[i + 1] - gs[i]) / (ts[i + 1] - ts[i])))
            .collect();
        DistortionFunction::new(knots, pieces)
    }

    fn classify(&self) -> Shape {
        if !self.is_continuous() {
            return Shape::General;
        }
        let mut concave = true;
        let mut convex = true;
        let mut prev_end: Option<f64> = None;
        for (i, p) in self.pieces.iter().enumerate() {
            let w = self.knots[i + 1].t - self.knots[i].t;
            if p.curvature > 0.0 {
                concave = false;
            }
            if p.curvature < 0.0 {
                convex = false;
            }
            if let Some(e) = prev_end {
                if p.slope > e + 1e-14 * (1.0 + e.abs()) {
                    concave = false;
                }
                if p.slope < e - 1e-14 * (1.0 + e.abs()) {
                    convex = false;
                }
            }
            prev_end = Some(p.slope + 2.0 * p.curvature * w);
        }
        match (concave, convex) {
            (true, _) => Shape::Concave,
            (false, true) => Shape::Convex,
            _ => Shape::General,
        }
    }

    pub fn knots(&self) -> &[Knot] {
        &self.knots
    }

    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn is_concave(&self) -> bool {
        self.shape == Shape::Concave
    }

    /// g(1).
    pub fn total_at_one(&self) -> f64 {
        self.knots[self.knots.len() - 1].value
    }

    pub fn is_continuous(&self) -> bool {
        self.knots.iter().all(|k| k.left == k.value && k.value == k.right)
    }

    fn piece_at(&self, t: f64) -> usize {
        let i = self.knots.partition_point(|k| k.t <= t);
        i.saturating_sub(1).min(self.pieces.len() - 1)
    }

    fn piece_value(&self, i: usize, t: f64) -> f64 {
        let d = t - self.knots[i].t;
        let p = self.pieces[i];
        self.knots[i].right + p.slope * d + p.curvature * d * d
    }

    fn knot_at(&self, t: f64) -> Option<&Knot> {
        self.knots.iter().find(|k| k.t == t)
    }

    /// Point value g(t).
    pub fn eval(&self, t: f64) -> f64 {
        if let Some(k) = self.knot_at(t) {
            return k.value;
        }
        self.piece_value(self.piece_at(t), t)
    }

    pub fn eval_left(&self, t: f64) -> f64 {
        if let Some(k) = self.knot_at(t) {
            return k.left;
        }
        self.eval(t)
    }

    pub fn eval_right(&self, t: f64) -> f64 {
        if let Some(k) = self.knot_at(t) {
            return k.right;
        }
        self.eval(t)
    }

    /// Upper semicontinuous version: interior point values lifted to the max of the limits.
    pub fn usc_version(&self) -> DistortionFunction {
        let mut knots = self.knots.clone();
        let n = knots.len();
        for k in knots.iter_mut().take(n - 1).skip(1) {
            k.value = k.left.max(k.value).max(k.right);
        }
        let mut g = DistortionFunction { knots, pieces: self.pieces.clone(), shape: Shape::General };
        g.shape = g.classify();
        g
    }

    pub fn is_usc(&self) -> bool {
        self.knots.iter().all(|k| k.value >= k.left && k.value >= k.right)
    }

    /// −g.
    pub fn negate(&self) -> DistortionFunction {
        let knots = self
            .knots
            .iter()
            .map(|k| Knot { t: k.t, left: -k.left, value: -k.value, right: -k.right })
            .collect();
        let pieces = self.pieces.iter().map(|p| Piece { slope: -p.slope, curvature: -p.curvature }).collect();
        let shape = match self.shape {
            Shape::Concave => Shape::Convex,
            Shape::Convex => Shape::Concave,
            Shape::General => Shape::General,
        };
        DistortionFunction { knots, pieces, shape }
    }

    /// Affine pieces of γ(u) = g'(1−u) in u-space, ignoring jumps, ordered by u.
    pub(crate) fn weight_pieces(&self) -> Vec<WeightPiece> {
        let n = self.pieces.len();
        let mut out = Vec::with_capacity(n);
        for i in (0..n).rev() {
            let (t0, t1) = (self.knots[i].t, self.knots[i + 1].t);
            let p = self.pieces[i];
            out.push(WeightPiece {
                lo: 1.0 - t1,
                hi: 1.0 - t0,
                a: p.slope + 2.0 * p.curvature * (1.0 - t0),
                b: -2.0 * p.curvature,
            });
        }
        out
    }

    /// Interior jumps as `(u₀ = 1 − t₀, g(t₀) − g(t₀−), g(t₀+) − g(t₀))`.
    pub(crate) fn jumps(&self) -> Vec<(f64, f64, f64)> {
        let n = self.knots.len();
        self.knots[1..n - 1]
            .iter()
            .filter(|k| k.left != k.value || k.value != k.right)
            .map(|k| (1.0 - k.t, k.value - k.left, k.right - k.value))
            .collect()
    }

    /// γ(u) = left derivative of g at 1−u; only for g without jumps.
    pub fn weight(&self) -> Result<WeightFunction> {
        if !self.is_continuous() {
            return Err(Error::Unsupported("distortion is not absolutely continuous (it has jumps)".into()));
        }
        Ok(WeightFunction { pieces: self.weight_pieces() })
    }

    /// Debug dump `(t, g(t))` on a uniform grid.
    pub fn sample(&self, points: usize) -> Vec<(f64, f64)> {
        (0..=points).map(|i| i as f64 / points as f64).map(|t| (t, self.eval(t))).collect()
    }
}

/// `γ(u) = a + b u` on `(lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightPiece {
    pub lo: f64,
    pub hi: f64,
    pub a: f64,
    pub b: f64,
}

impl WeightPiece {
    pub fn value(&self, u: f64) -> f64 {
        self.a + self.b * u
    }

    pub(crate) fn integral(&self) -> f64 {
        let (l, r) = (self.lo, self.hi);
        self.a * (r - l) + self.b * 0.5 * (r * r - l * l)
    }

    pub(crate) fn integral_sq(&self) -> f64 {
        let (l, r) = (self.lo, self.hi);
        self.a * self.a * (r - l) + self.a * self.b * (r * r - l * l) + self.b * self.b * (r * r * r - l * l * l) / 3.0
    }
}

/// Weight function γ on (0,1), piecewise affine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightFunction {
    pieces: Vec<WeightPiece>,
}

impl WeightFunction {
    pub fn from_pieces(pieces: Vec<WeightPiece>) -> Result<Self> {
        if pieces.is_empty() {
            return param("weight function needs at least one piece");
        }
        if pieces[0].lo != 0.0 || pieces[pieces.len() - 1].hi != 1.0 {
            return param("weight pieces must cover (0,1)");
        }
        for w in pieces.windows(2) {
            if w[0].hi != w[1].lo || !(w[0].hi > w[0].lo) {
                return param("weight pieces must be contiguous with positive width");
            }
        }
        Ok(WeightFunction { pieces })
    }

    /// Step function with `levels[i]` on `(breaks[i], breaks[i+1])`, `breaks` from 0 to 1.
    pub fn step(breaks: &[f64], levels: &[f64]) -> Result<Self> {
        if breaks.len() != levels.len() + 1 {
            return param("step weight needs one more breakpoint than levels");
        }
        let pieces = levels
            .iter()
            .enumerate()
            .map(|(i, &y)| WeightPiece { lo: breaks[i], hi: breaks[i + 1], a: y, b: 0.0 })
            .collect();
        WeightFunction::from_pieces(pieces)
    }

    /// Piecewise-linear interpolation of `f` on an increasing grid from 0 to 1.
    pub fn from_fn_on_grid<F: Fn(f64) -> f64>(f: F, grid: &[f64]) -> Result<Self> {
        let vals: Vec<f64> = grid.iter().map(|&u| f(u)).collect();
        let pieces = grid
            .windows(2)
            .zip(vals.windows(2))
            .map(|(u, y)| {
                let b = (y[1] - y[0]) / (u[1] - u[0]);
                WeightPiece { lo: u[0], hi: u[1], a: y[0] - b * u[0], b }
            })
            .collect();
        WeightFunction::from_pieces(pieces)
    }

    pub fn pieces(&self) -> &[WeightPiece] {
        &self.pieces
    }

    pub fn is_step(&self) -> bool {
        self.pieces.iter().all(|p| p.b == 0.0)
    }

    pub fn value(&self, u: f64) -> f64 {
        let i = self.pieces.partition_point(|p| p.hi < u).min(self.pieces.len() - 1);
        self.pieces[i].value(u)
    }

    /// ∫₀¹ γ.
    pub fn mean(&self) -> f64 {
        self.pieces.iter().map(WeightPiece::integral).sum()
    }

    /// ∫₀¹ γ².
    pub fn integral_sq(&self) -> f64 {
        self.pieces.iter().map(WeightPiece::integral_sq).sum()
    }

    /// Standard deviation of γ(V), V uniform.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self.integral_sq() - m * m).max(0.0).sqrt()
    }

    /// ∫₀¹ γ q.
    pub fn inner_quantile(&self, q: &QuantileFunction) -> f64 {
        self.pieces
            .iter()
            .map(|p| p.a * q.partial_unchecked(p.lo, p.hi) + p.b * q.partial_u_unchecked(p.lo, p.hi))
            .sum()
    }

    pub fn breakpoints(&self) -> Vec<f64> {
        self.pieces[1..].iter().map(|p| p.lo).collect()
    }
}

/// ρ_g(q) for quantile `q`: ∫ γ q over the pieces plus the jump terms.
///
/// A jump `g(t₀) − g(t₀−)` weighs the right quantile at `1 − t₀`, a jump
/// `g(t₀+) − g(t₀)` weighs the left quantile there.
pub fn rho(g: &DistortionFunction, q: &QuantileFunction) -> Result<f64> {
    let mut s = 0.0;
    for p in g.weight_pieces() {
        s += p.a * q.partial_unchecked(p.lo, p.hi) + p.b * q.partial_u_unchecked(p.lo, p.hi);
    }
    for (u0, jm, jp) in g.jumps() {
        if jm != 0.0 {
            s += jm * q.value_right(u0);
        }
        if jp != 0.0 {
            s += jp * q.value(u0);
        }
    }
    if !s.is_finite() {
        return Err(Error::Numeric("ρ_g(q) is not finite".into()));
    }
    Ok(s)
}

/// Built-in distortion families.
#[derive(Debug, Clone, PartialEq)]
pub enum MetricSpec {
    Identity,
    Gd,
    Mmd,
    IqdPlus(f64),
    IqdMinus(f64),
    Var(f64),
    VarPlus(f64),
    Es(f64),
    Rvar(f64, f64),
    GlueVar { beta: f64, alpha: f64, h1: f64, h2: f64 },
    EsMinusVar(f64, f64),
    Custom(DistortionFunction),
}

impl MetricSpec {
    pub fn validate(&self) -> Result<()> {
        let unit_open = |name: &str, x: f64| -> Result<()> {
            if x > 0.0 && x < 1.0 {
                Ok(())
            } else {
                param(format!("{name} must lie in (0,1), got {x}"))
            }
        };
        match *self {
            MetricSpec::IqdPlus(a) | MetricSpec::IqdMinus(a) => {
                if !(a > 0.0 && a < 0.5) {
                    return param(format!("IQD requires alpha in (0,1/2), got {a}"));
                }
            }
            MetricSpec::Var(a) | MetricSpec::VarPlus(a) => unit_open("alpha", a)?,
            MetricSpec::Es(a) => {
                if !(0.0..1.0).contains(&a) {
                    return param(format!("ES requires alpha in [0,1), got {a}"));
                }
            }
            MetricSpec::Rvar(a, b) => {
                if !(a > 0.0 && a < b && b < 1.0) {
                    return param(format!("RVaR requires 0 < alpha < beta < 1, got ({a}, {b})"));
                }
            }
            MetricSpec::GlueVar { beta, alpha, h1, h2 } => {
                if !(alpha > 0.0 && alpha <= beta && beta < 1.0) {
                    return param(format!("GlueVaR requires 0 < alpha <= beta < 1, got alpha={alpha}, beta={beta}"));
                }
                if !(0.0 <= h1 && h1 <= h2 && h2 <= 1.0) {
                    return param(format!("GlueVaR requires 0 <= h1 <= h2 <= 1, got h1={h1}, h2={h2}"));
                }
            }
            MetricSpec::EsMinusVar(a1, a2) => {
                if !(a1 > 0.0 && a1 < a2 && a2 < 1.0) {
                    return param(format!("ES-VaR requires 0 < alpha1 < alpha2 < 1, got ({a1}, {a2})"));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Exact piecewise representation of a built-in family.
pub fn make_distortion(spec: &MetricSpec) -> Result<DistortionFunction> {
    spec.validate()?;
    let k = Knot::continuous;
    let lin = Piece::linear;
    let jump = |t: f64, left: f64, value: f64, right: f64| Knot { t, left, value, right };
    match *spec {
        MetricSpec::Identity => DistortionFunction::new(vec![k(0.0, 0.0), k(1.0, 1.0)], vec![lin(1.0)]),
        MetricSpec::Gd => DistortionFunction::new(
            vec![k(0.0, 0.0), k(1.0, 0.0)],
            vec![Piece { slope: 1.0, curvature: -1.0 }],
        ),
        MetricSpec::Mmd => DistortionFunction::new(vec![k(0.0, 0.0), k(0.5, 0.5), k(1.0, 0.0)], vec![lin(1.0), lin(-1.0)]),
        MetricSpec::IqdPlus(a) => DistortionFunction::new(
            vec![k(0.0, 0.0), jump(a, 0.0, 1.0, 1.0), jump(1.0 - a, 1.0, 1.0, 0.0), k(1.0, 0.0)],
            vec![lin(0.0); 3],
        ),
        MetricSpec::IqdMinus(a) => DistortionFunction::new(
            vec![k(0.0, 0.0), jump(a, 0.0, 0.0, 1.0), jump(1.0 - a, 1.0, 0.0, 0.0), k(1.0, 0.0)],
            vec![lin(0.0); 3],
        ),
        MetricSpec::VarPlus(a) => {
            DistortionFunction::new(vec![k(0.0, 0.0), jump(1.0 - a, 0.0, 1.0, 1.0), k(1.0, 1.0)], vec![lin(0.0); 2])
        }
        MetricSpec::Var(a) => {
            DistortionFunction::new(vec![k(0.0, 0.0), jump(1.0 - a, 0.0, 0.0, 1.0), k(1.0, 1.0)], vec![lin(0.0); 2])
        }
        MetricSpec::Es(a) => {
            if a == 0.0 {
                return make_distortion(&MetricSpec::Identity);
            }
            DistortionFunction::new(vec![k(0.0, 0.0), k(1.0 - a, 1.0), k(1.0, 1.0)], vec![lin(1.0 / (1.0 - a)), lin(0.0)])
        }
        MetricSpec::Rvar(a, b) => DistortionFunction::new(
            vec![k(0.0, 0.0), k(1.0 - b, 0.0), k(1.0 - a, 1.0), k(1.0, 1.0)],
            vec![lin(0.0), lin(1.0 / (b - a)), lin(0.0)],
        ),
        MetricSpec::GlueVar { beta, alpha, h1, h2 } => {
            let s1 = h1 / (1.0 - beta);
            if alpha == beta {
                return DistortionFunction::new(
                    vec![k(0.0, 0.0), jump(1.0 - alpha, h1, h1, 1.0), k(1.0, 1.0)],
                    vec![lin(s1), lin(0.0)],
                );
            }
            let s2 = (h2 - h1) / (beta - alpha);
            DistortionFunction::new(
                vec![k(0.0, 0.0), k(1.0 - beta, h1), jump(1.0 - alpha, h2, h2, 1.0), k(1.0, 1.0)],
                vec![lin(s1), lin(s2), lin(0.0)],
            )
        }
        MetricSpec::EsMinusVar(a1, a2) => {
            let s = 1.0 / (1.0 - a1);
            let v = (1.0 - a2) * s;
            DistortionFunction::new(
                vec![k(0.0, 0.0), jump(1.0 - a2, v, v, v - 1.0), k(1.0 - a1, 0.0), k(1.0, 0.0)],
                vec![lin(s), lin(s), lin(0.0)],
            )
        }
        MetricSpec::Custom(ref g) => Ok(g.clone()),
    }
}

fn parse_number(s: &str) -> Result<f64> {
    let s = s.trim();
    if let Some((n, d)) = s.split_once('/') {
        let n: f64 = n.trim().parse().map_err(|_| Error::Param(format!("bad number {s:?}")))?;
        let d: f64 = d.trim().parse().map_err(|_| Error::Param(format!("bad number {s:?}")))?;
        return Ok(n / d);
    }
    s.parse().map_err(|_| Error::Param(format!("bad number {s:?}")))
}

/// Parse `name(key=value, ...)` with positional fallback into `(name, [(key?, value)])`.
fn parse_call(s: &str) -> Result<(String, Vec<(Option<String>, f64)>)> {
    let s = s.trim();
    let (name, rest) = match s.find('(') {
        Some(i) => {
            if !s.ends_with(')') {
                return param(format!("missing ')' in {s:?}"));
            }
            (&s[..i], &s[i + 1..s.len() - 1])
        }
        None => (s, ""),
    };
    let mut args = Vec::new();
    for part in rest.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('=') {
            Some((k, v)) => args.push((Some(k.trim().to_ascii_lowercase()), parse_number(v)?)),
            None => args.push((None, parse_number(part)?)),
        }
    }
    Ok((name.trim().to_ascii_lowercase(), args))
}

fn bind(name: &str, args: &[(Option<String>, f64)], keys: &[&str], defaults: &[Option<f64>]) -> Result<Vec<f64>> {
    let mut out: Vec<Option<f64>> = vec![None; keys.len()];
    let mut pos = 0;
    for (k, v) in args {
        match k {
            Some(k) => {
                let i = keys
                    .iter()
                    .position(|x| x == k)
                    .ok_or_else(|| Error::Param(format!("{name}: unknown parameter {k:?}")))?;
                out[i] = Some(*v);
            }
            None => {
                if pos >= keys.len() {
                    return param(format!("{name}: too many arguments"));
                }
                while pos < keys.len() && out[pos].is_some() {
                    pos += 1;
                }
                if pos >= keys.len() {
                    return param(format!("{name}: too many arguments"));
                }
                out[pos] = Some(*v);
                pos += 1;
            }
        }
    }
    out.iter()
        .zip(keys)
        .zip(defaults)
        .map(|((v, k), d)| v.or(*d).ok_or_else(|| Error::Param(format!("{name}: missing parameter {k}"))))
        .collect()
}

impl FromStr for MetricSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, args) = parse_call(s)?;
        let spec = match name.as_str() {
            "identity" | "mean" | "id" => MetricSpec::Identity,
            "gd" | "gini" => MetricSpec::Gd,
            "mmd" => MetricSpec::Mmd,
            "iqd+" | "iqd_plus" | "iqd" => MetricSpec::IqdPlus(bind(&name, &args, &["alpha"], &[None])?[0]),
            "iqd-" | "iqd_minus" => MetricSpec::IqdMinus(bind(&name, &args, &["alpha"], &[None])?[0]),
            "var" => MetricSpec::Var(bind(&name, &args, &["alpha"], &[None])?[0]),
            "var+" | "var_plus" => MetricSpec::VarPlus(bind(&name, &args, &["alpha"], &[None])?[0]),
            "es" | "cvar" => MetricSpec::Es(bind(&name, &args, &["alpha"], &[None])?[0]),
            "rvar" => {
                let v = bind(&name, &args, &["alpha", "beta"], &[None, None])?;
                MetricSpec::Rvar(v[0], v[1])
            }
            "gluevar" | "glue" => {
                let v = bind(&name, &args, &["beta", "alpha", "h1", "h2"], &[None, None, None, None])?;
                MetricSpec::GlueVar { beta: v[0], alpha: v[1], h1: v[2], h2: v[3] }
            }
            "es-var" | "es_minus_var" | "esvar" => {
                let v = bind(&name, &args, &["alpha1", "alpha2"], &[None, None])?;
                MetricSpec::EsMinusVar(v[0], v[1])
            }
            other => return param(format!("unknown metric {other:?}")),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for MetricSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricSpec::Identity => write!(f, "identity"),
            MetricSpec::Gd => write!(f, "gd"),
            MetricSpec::Mmd => write!(f, "mmd"),
            MetricSpec::IqdPlus(a) => write!(f, "iqd+(alpha={a})"),
            MetricSpec::IqdMinus(a) => write!(f, "iqd-(alpha={a})"),
            MetricSpec::Var(a) => write!(f, "var(alpha={a})"),
            MetricSpec::VarPlus(a) => write!(f, "var+(alpha={a})"),
            MetricSpec::Es(a) => write!(f, "es(alpha={a})"),
            MetricSpec::Rvar(a, b) => write!(f, "rvar(alpha={a},beta={b})"),
            MetricSpec::GlueVar { beta, alpha, h1, h2 } => {
                write!(f, "gluevar(beta={beta},alpha={alpha},h1={h1},h2={h2})")
            }
            MetricSpec::EsMinusVar(a1, a2) => write!(f, "es-var(alpha1={a1},alpha2={a2})"),
            MetricSpec::Custom(_) => write!(f, "custom"),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum MetricRepr {
    Text(String),
    Custom { custom: DistortionFunction },
}

impl Serialize for MetricSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            MetricSpec::Custom(g) => MetricRepr::Custom { custom: g.clone() }.serialize(s),
            other => MetricRepr::Text(other.to_string()).serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for MetricSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match MetricRepr::deserialize(d)? {
            MetricRepr::Text(t) => t.parse().map_err(serde::de::Error::custom),
            MetricRepr::Custom { custom } => Ok(MetricSpec::Custom(custom)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gd_sign_matches_double_integral() {
        let g = make_distortion(&MetricSpec::Gd).unwrap();
        let q = QuantileFunction::uniform(0.0, 1.0).unwrap();
        let v = rho(&g, &q).unwrap();
        assert!((v - 1.0 / 6.0).abs() < 1e-15);
        let w = g.weight().unwrap();
        assert!((w.value(0.25) + 0.5).abs() < 1e-15);
    }

    #[test]
    fn var_plus_is_right_quantile() {
        let e = QuantileFunction::empirical(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let vp = make_distortion(&MetricSpec::VarPlus(0.5)).unwrap();
        let v = make_distortion(&MetricSpec::Var(0.5)).unwrap();
        assert_eq!(rho(&vp, &e).unwrap(), 3.0);
        assert_eq!(rho(&v, &e).unwrap(), 2.0);
    }

    #[test]
    fn usc_maps_open_iqd_to_closed() {
        let m = make_distortion(&MetricSpec::IqdMinus(0.1)).unwrap();
        let p = make_distortion(&MetricSpec::IqdPlus(0.1)).unwrap();
        assert_eq!(m.usc_version(), p);
        assert_eq!(p.usc_version(), p);
    }

    #[test]
    fn es_zero_is_identity() {
        let g = make_distortion(&MetricSpec::Es(0.0)).unwrap();
        assert_eq!(g.pieces().len(), 1);
        assert_eq!(g.weight().unwrap().value(0.3), 1.0);
    }

    #[test]
    fn parse_and_display_round_trip() {
        for s in [
            "gd",
            "es(0.95)",
            "iqd+(0.05)",
            "gluevar(beta=0.975,alpha=0.95,h1=1/3,h2=2/3)",
            "gluevar(0.975, 0.95, 0.3333, 0.6667)",
            "es-var(alpha1=0.9, alpha2=0.95)",
            "rvar(0.1, beta=0.3)",
        ] {
            let m: MetricSpec = s.parse().unwrap();
            let again: MetricSpec = m.to_string().parse().unwrap();
            assert_eq!(m, again);
        }
        assert!("es(1.5)".parse::<MetricSpec>().is_err());
        assert!("foo(1)".parse::<MetricSpec>().is_err());
    }

    #[test]
    fn weight_rejects_jumps() {
        let g = make_distortion(&MetricSpec::VarPlus(0.9)).unwrap();
        assert!(matches!(g.weight(), Err(Error::Unsupported(_))));
    }

    #[test]
    fn shapes() {
        assert!(make_distortion(&MetricSpec::Gd).unwrap().is_concave());
        assert!(make_distortion(&MetricSpec::Mmd).unwrap().is_concave());
        assert!(make_distortion(&MetricSpec::Es(0.9)).unwrap().is_concave());
        assert_eq!(make_distortion(&MetricSpec::Rvar(0.1, 0.5)).unwrap().shape(), Shape::General);
        assert_eq!(make_distortion(&MetricSpec::Gd).unwrap().negate().shape(), Shape::Convex);
    }
}
