//! Robust portfolio selection: minimize over nonnegative weights w (Σw = 1,
//! optionally wᵀμ ≤ bound) the worst-case risk of the loss wᵀX over the
//! multivariate ambiguity set, reduced per w to a univariate moment-Wasserstein set.

use crate::distortion::{make_distortion, rho, DistortionFunction, MetricSpec};
use crate::error::{param, Error, Result};
use crate::numerics::{golden_min, nelder_mead};
use crate::reference::{EllipticalReference, QuantileFunction};
use crate::unimodal::{unimodal_wasserstein_feasibility, worst_case_unimodal, worst_case_unimodal_wasserstein};
use crate::worstcase::{worst_case, MomentWassersteinSet};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

const STARTS: usize = 8;
const GRID_POINTS: usize = 101;
const PENALTY: f64 = 1e3;

/// ε on the wire: a number, or the strings "inf" / "infinity".
pub mod radius {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(x) => Ok(x),
            Raw::Text(t) => parse(&t).map_err(de::Error::custom),
        }
    }

    pub fn parse(t: &str) -> Result<f64, String> {
        match t.trim().to_ascii_lowercase().as_str() {
            "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
            other => other.parse().map_err(|_| format!("bad radius {t:?}")),
        }
    }
}

/// Joint reference model X₀ for the asset losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum JointReference {
    /// Elliptical with the problem's mean vector and covariance.
    Normal,
    StudentT { nu: f64 },
    /// Joint sample, one row per scenario.
    Sample { rows: Vec<Vec<f64>> },
}

impl Default for JointReference {
    fn default() -> Self {
        JointReference::Normal
    }
}

impl JointReference {
    pub fn elliptical(&self) -> Option<EllipticalReference> {
        match *self {
            JointReference::Normal => Some(EllipticalReference::Normal),
            JointReference::StudentT { nu } => Some(EllipticalReference::StudentT { nu }),
            JointReference::Sample { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioProblem {
    pub mu: Vec<f64>,
    /// Row-major covariance Σ₀.
    pub sigma0: Vec<Vec<f64>>,
    #[serde(with = "radius")]
    pub epsilon: f64,
    pub metric: MetricSpec,
    #[serde(default)]
    pub reference: JointReference,
    /// Optional constraint wᵀμ ≤ bound.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<f64>,
    /// Inflection point for the unimodal variant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xi: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl PortfolioProblem {
    pub fn new(mu: Vec<f64>, sigma0: Vec<Vec<f64>>, epsilon: f64, metric: MetricSpec) -> Result<Self> {
        let p = PortfolioProblem {
            mu,
            sigma0,
            epsilon,
            metric,
            reference: JointReference::Normal,
            bound: None,
            xi: None,
            seed: 0,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn n(&self) -> usize {
        self.mu.len()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let n = self.n();
        DMatrix::from_fn(n, n, |i, j| self.sigma0[i][j])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if n == 0 {
            return param("mean vector is empty");
        }
        if self.mu.iter().any(|m| !m.is_finite()) {
            return param("mean vector must be finite");
        }
        if self.sigma0.len() != n || self.sigma0.iter().any(|r| r.len() != n) {
            return param(format!("covariance must be {n}x{n}"));
        }
        let s = self.covariance();
        for i in 0..n {
            for j in 0..i {
                if (s[(i, j)] - s[(j, i)]).abs() > 1e-12 * (1.0 + s[(i, j)].abs()) {
                    return param(format!("covariance is not symmetric at ({i},{j})"));
                }
            }
        }
        if s.cholesky().is_none() {
            return param("covariance is not positive definite (Cholesky failed)");
        }
        if !(self.epsilon >= 0.0) {
            return param(format!("epsilon must be >= 0, got {}", self.epsilon));
        }
        self.metric.validate()?;
        if let Some(b) = self.bound {
            let lo = self.mu.iter().cloned().fold(f64::INFINITY, f64::min);
            if !(lo <= b) {
                return Err(Error::Infeasible(format!(
                    "no weights satisfy w'mu <= {b}: the smallest attainable w'mu is {lo}"
                )));
            }
        }
        match &self.reference {
            JointReference::StudentT { nu } if !(*nu > 2.0) => {
                return param(format!("student_t reference requires nu > 2, got {nu}"))
            }
            JointReference::Sample { rows } => {
                if rows.len() < 2 {
                    return param("sample reference needs at least two rows");
                }
                if let Some(r) = rows.iter().position(|r| r.len() != n || r.iter().any(|x| !x.is_finite())) {
                    return param(format!("sample row {r} must have {n} finite entries"));
                }
            }
            _ => {}
        }
        if let Some(xi) = self.xi {
            if !(0.0..=1.0).contains(&xi) {
                return param(format!("xi must lie in [0,1], got {xi}"));
            }
        }
        Ok(())
    }

    fn check_weights(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.n() {
            return param(format!("weights have length {}, expected {}", w.len(), self.n()));
        }
        let sum: f64 = w.iter().sum();
        if w.iter().any(|x| !(*x >= -1e-12)) || (sum - 1.0).abs() > 1e-9 {
            return param(format!("weights {w:?} are not on the simplex"));
        }
        Ok(())
    }

    fn moments(&self, w: &[f64]) -> (f64, f64, f64) {
        let wv = DVector::from_column_slice(w);
        let mean = wv.dot(&DVector::from_column_slice(&self.mu));
        let var = (wv.transpose() * self.covariance() * &wv)[(0, 0)];
        (mean, var.max(0.0).sqrt(), wv.norm_squared())
    }
}

/// `(wᵀμ, √(wᵀΣ₀w), ε‖w‖², law of wᵀX₀)`.
fn reduced_parts(problem: &PortfolioProblem, w: &[f64]) -> Result<(f64, f64, f64, QuantileFunction)> {
    problem.check_weights(w)?;
    let (mean, s, norm2) = problem.moments(w);
    if !(s > 0.0) {
        return param(format!("w = {w:?} gives zero portfolio variance"));
    }
    let reference = match (&problem.reference, problem.reference.elliptical()) {
        (_, Some(e)) => e.located(mean, s)?,
        (JointReference::Sample { rows }, None) => {
            QuantileFunction::empirical(rows.iter().map(|r| r.iter().zip(w).map(|(x, y)| x * y).sum()).collect())?
        }
        _ => unreachable!(),
    };
    Ok((mean, s, problem.epsilon * norm2, reference))
}

/// Univariate set for the portfolio loss wᵀX. With ε = 0 the set is the single
/// law of wᵀX₀, which has no `MomentWassersteinSet` form.
pub fn reduce(problem: &PortfolioProblem, w: &[f64]) -> Result<MomentWassersteinSet> {
    let (mean, s, eps, reference) = reduced_parts(problem, w)?;
    MomentWassersteinSet::new(mean, s, eps, reference).map_err(|e| with_weights(e, w))
}

/// Weight γ as atoms plus a nondecreasing step part on (0,1).
#[derive(Debug, Clone)]
struct StepFamily {
    g1: f64,
    atoms: Vec<(f64, f64)>,
    /// `(lo, hi, level)` covering (0,1) in order.
    ac: Vec<(f64, f64, f64)>,
}

#[derive(Debug, Clone)]
enum ClosedForm {
    /// Concave g: `V_g = Var γ`, `C₀ = ∫ γ F₀⁻¹`.
    Concave { var_g: f64, c0: f64 },
    Step(StepFamily),
}

impl StepFamily {
    fn from_metric(spec: &MetricSpec) -> Option<StepFamily> {
        match *spec {
            MetricSpec::Var(a) | MetricSpec::VarPlus(a) => {
                Some(StepFamily { g1: 1.0, atoms: vec![(a, 1.0)], ac: vec![(0.0, 1.0, 0.0)] })
            }
            MetricSpec::IqdPlus(a) | MetricSpec::IqdMinus(a) => {
                Some(StepFamily { g1: 0.0, atoms: vec![(a, -1.0), (1.0 - a, 1.0)], ac: vec![(0.0, 1.0, 0.0)] })
            }
            MetricSpec::GlueVar { beta, alpha, h1, h2 } => {
                let s1 = h1 / (1.0 - beta);
                if alpha == beta {
                    return Some(StepFamily {
                        g1: 1.0,
                        atoms: vec![(alpha, 1.0 - h1)],
                        ac: vec![(0.0, beta, 0.0), (beta, 1.0, s1)],
                    });
                }
                let s2 = (h2 - h1) / (beta - alpha);
                if s1 < s2 {
                    return None;
                }
                Some(StepFamily {
                    g1: 1.0,
                    atoms: vec![(alpha, 1.0 - h2)],
                    ac: vec![(0.0, alpha, 0.0), (alpha, beta, s2), (beta, 1.0, s1)],
                })
            }
            _ => None,
        }
    }

    fn level(&self, u: f64) -> f64 {
        let i = self.ac.partition_point(|p| p.1 <= u).min(self.ac.len() - 1);
        self.ac[i].2
    }

    fn gamma_int(&self, a: f64, b: f64) -> f64 {
        self.ac.iter().map(|&(lo, hi, c)| c * (hi.min(b) - lo.max(a)).max(0.0)).sum()
    }

    /// Flat pieces `(lo, hi, c)` of the nondecreasing projection of γ + L F₀⁻¹.
    fn flats(&self, q0: &QuantileFunction, l: f64) -> Vec<(f64, f64, f64)> {
        let k = |u: f64| {
            if l == 0.0 {
                self.level(u)
            } else {
                self.level(u) + l * q0.value(u)
            }
        };
        let mut out = Vec::new();
        for &(a, m) in &self.atoms {
            if m == 0.0 {
                continue;
            }
            if m > 0.0 {
                let c = |r: f64| (m + self.gamma_int(a, r) + l * q0.partial_unchecked(a, r)) / (r - a);
                let r = if l == 0.0 && c(1.0) >= self.level(1.0 - 1e-15) {
                    1.0
                } else {
                    bisect(|r| c(r) >= k(r), a, 1.0)
                };
                out.push((a, r, c(r)));
            } else {
                let c = |s: f64| (m + self.gamma_int(s, a) + l * q0.partial_unchecked(s, a)) / (a - s);
                let s = if l == 0.0 && c(0.0) <= self.level(1e-15) {
                    0.0
                } else {
                    bisect(|s| c(s) <= k(s), a, 0.0)
                };
                out.push((s, a, c(s)));
            }
        }
        out.sort_by(|x, y| x.0.total_cmp(&y.0));
        out
    }

    /// `(Var k, Cov(F₀⁻¹, k), Cov(γ, k))` for the projected k.
    fn stats(&self, q0: &QuantileFunction, l: f64) -> Option<(f64, f64, f64)> {
        let flats = self.flats(q0, l);
        if flats.windows(2).any(|p| p[0].1 > p[1].0) {
            return None;
        }
        let mut kk = 0.0;
        let mut qk = 0.0;
        let mut gk = 0.0;
        for &(lo, hi, c) in &flats {
            kk += c * c * (hi - lo);
            qk += c * q0.partial_unchecked(lo, hi);
            gk += c * self.gamma_int(lo, hi);
        }
        for &(a, m) in &self.atoms {
            let c = flats.iter().find(|f| f.0 <= a && a <= f.1).map(|f| f.2)?;
            gk += m * c;
        }
        let mut gaps = Vec::new();
        let mut at = 0.0;
        for &(lo, hi, _) in &flats {
            if lo > at {
                gaps.push((at, lo));
            }
            at = hi;
        }
        if at < 1.0 {
            gaps.push((at, 1.0));
        }
        for &(ga, gb) in &gaps {
            for &(lo, hi, lev) in &self.ac {
                let (a, b) = (lo.max(ga), hi.min(gb));
                if b <= a {
                    continue;
                }
                let i = q0.partial_unchecked(a, b);
                let s = q0.partial_sq_unchecked(a, b);
                kk += lev * lev * (b - a) + 2.0 * l * lev * i + l * l * s;
                qk += lev * i + l * s;
                gk += lev * lev * (b - a) + l * lev * i;
            }
        }
        let g2 = self.g1 * self.g1;
        Some((kk - g2, qk, gk - g2))
    }
}

fn bisect<P: Fn(f64) -> bool>(pred: P, mut yes: f64, mut no: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (yes + no);
        if mid == yes || mid == no {
            break;
        }
        if pred(mid) {
            yes = mid;
        } else {
            no = mid;
        }
    }
    yes
}

/// Standardized value `v₀` and multiplier `L` at radius `ε' = ε_w / s²`.
struct Standardized {
    value: f64,
    l: f64,
    residual: f64,
}

impl ClosedForm {
    fn at(&self, q0: &QuantileFunction, eps: f64) -> Result<Standardized> {
        let target = eps / 2.0;
        match *self {
            ClosedForm::Concave { var_g, c0 } => {
                if !(var_g > 0.0) {
                    return Ok(Standardized { value: 0.0, l: 0.0, residual: 0.0 });
                }
                let corr0 = c0 / var_g.sqrt();
                let c = (1.0 - target).max(corr0);
                let l = if c <= corr0 {
                    0.0
                } else {
                    -c0 + (c * c * (var_g - c0 * c0) / (1.0 - c * c)).sqrt()
                };
                let v = var_g + 2.0 * l * c0 + l * l;
                let residual = if l > 0.0 { 1.0 - (c0 + l) / v.sqrt() - target } else { 0.0 };
                Ok(Standardized { value: (var_g + l * c0) / v.sqrt(), l, residual })
            }
            ClosedForm::Step(ref f) => {
                let eval = |l: f64| -> Result<(f64, f64)> {
                    let (v, qk, gk) = f
                        .stats(q0, l)
                        .ok_or_else(|| Error::Numeric(format!("flat pieces overlap at L = {l}")))?;
                    let sd = v.sqrt();
                    Ok((gk / sd, 1.0 - qk / sd))
                };
                let (v0, omc0) = eval(0.0)?;
                if omc0 <= target {
                    return Ok(Standardized { value: v0, l: 0.0, residual: 0.0 });
                }
                let mut lo = 0.0;
                let mut hi = 1.0;
                let mut n = 0;
                while eval(hi)?.1 > target {
                    lo = hi;
                    hi *= 2.0;
                    n += 1;
                    if n > 80 {
                        return Err(Error::Numeric(format!(
                            "no sign change for the multiplier equation up to L = {hi} (target {target})"
                        )));
                    }
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if mid == lo || mid == hi || hi - lo <= 1e-14 * hi {
                        break;
                    }
                    if eval(mid)?.1 > target {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                let (v, omc) = eval(hi)?;
                Ok(Standardized { value: v, l: hi, residual: omc - target })
            }
        }
    }
}

/// How an objective value was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Path {
    ClosedForm,
    Generic,
    Unimodal,
}

#[derive(Debug, Clone, Serialize)]
pub struct Evaluation {
    pub value: f64,
    pub lambda_w: f64,
    pub path: Path,
    /// Residual of the multiplier equation (closed-form path only).
    pub residual: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

/// Robust objective w ↦ sup ρ_g over the reduced set, with per-problem setup done once.
pub struct Objective {
    problem: PortfolioProblem,
    g: DistortionFunction,
    g1: f64,
    cov: DMatrix<f64>,
    standard: Option<QuantileFunction>,
    closed: Option<ClosedForm>,
}

impl Objective {
    pub fn new(problem: &PortfolioProblem) -> Result<Self> {
        problem.validate()?;
        let g = make_distortion(&problem.metric)?;
        let standard = problem.reference.elliptical().map(|e| e.standard()).transpose()?;
        let closed = match &standard {
            None => None,
            Some(q0) => {
                if g.is_concave() {
                    let gamma = g.weight()?;
                    let m = gamma.mean();
                    Some(ClosedForm::Concave { var_g: gamma.integral_sq() - m * m, c0: gamma.inner_quantile(q0) })
                } else {
                    StepFamily::from_metric(&problem.metric).map(ClosedForm::Step)
                }
            }
        };
        Ok(Objective { problem: problem.clone(), g1: g.total_at_one(), g, cov: problem.covariance(), standard, closed })
    }

    pub fn problem(&self) -> &PortfolioProblem {
        &self.problem
    }

    pub fn has_closed_form(&self) -> bool {
        self.closed.is_some()
    }

    fn scale(&self, w: &[f64]) -> (f64, f64, f64) {
        let wv = DVector::from_column_slice(w);
        let mean = w.iter().zip(&self.problem.mu).map(|(a, b)| a * b).sum();
        let var = (wv.transpose() * &self.cov * &wv)[(0, 0)];
        (mean, var.max(0.0).sqrt(), wv.norm_squared())
    }

    /// Closed form when the reference is elliptical and the metric family has one, else generic.
    pub fn value(&self, w: &[f64]) -> Result<Evaluation> {
        match self.closed_form(w) {
            Some(r) => r,
            None => self.generic(w),
        }
    }

    /// Closed-form path; `None` when no closed form applies.
    pub fn closed_form(&self, w: &[f64]) -> Option<Result<Evaluation>> {
        let (cf, q0) = (self.closed.as_ref()?, self.standard.as_ref()?);
        Some((|| {
            self.problem.check_weights(w)?;
            let (mean, s, norm2) = self.scale(w);
            if !(s > 0.0) {
                return param(format!("w = {w:?} gives zero portfolio variance"));
            }
            let eps = self.problem.epsilon * norm2;
            if eps == 0.0 {
                let q = QuantileFunction::affine_of(q0, mean, s)?;
                return Ok(Evaluation { value: rho(&self.g, &q)?, lambda_w: f64::INFINITY, path: Path::ClosedForm, residual: 0.0, diagnostics: vec![] });
            }
            let st = cf.at(q0, eps / (s * s))?;
            let mut diagnostics = Vec::new();
            if st.residual.abs() > 1e-8 {
                diagnostics.push(format!("multiplier equation residual {:e}", st.residual));
            }
            Ok(Evaluation {
                value: mean * self.g1 + s * st.value,
                lambda_w: st.l / s,
                path: Path::ClosedForm,
                residual: st.residual,
                diagnostics,
            })
        })())
    }

    /// Generic path through the univariate worst-case solver.
    pub fn generic(&self, w: &[f64]) -> Result<Evaluation> {
        let (_, _, eps, reference) = reduced_parts(&self.problem, w)?;
        if eps == 0.0 {
            return Ok(Evaluation { value: rho(&self.g, &reference)?, lambda_w: f64::INFINITY, path: Path::Generic, residual: 0.0, diagnostics: vec![] });
        }
        let set = reduce(&self.problem, w)?;
        let r = worst_case(&self.g, &set).map_err(|e| with_weights(e, w))?;
        Ok(Evaluation {
            value: r.value,
            lambda_w: r.lambda.unwrap_or(0.0),
            path: Path::Generic,
            residual: 0.0,
            diagnostics: r.diagnostics,
        })
    }
}

fn with_weights(e: Error, w: &[f64]) -> Error {
    let at = format!(" (at w = {w:?})");
    match e {
        Error::Param(m) => Error::Param(m + &at),
        Error::Infeasible(m) => Error::Infeasible(m + &at),
        Error::Regime(m) => Error::Regime(m + &at),
        Error::Numeric(m) => Error::Numeric(m + &at),
        Error::Unsupported(m) => Error::Unsupported(m + &at),
    }
}

pub fn objective(problem: &PortfolioProblem, w: &[f64]) -> Result<f64> {
    Ok(Objective::new(problem)?.value(w)?.value)
}

/// λ_w of the reduced problem from the closed-form multiplier equation.
pub fn solve_lambda_w(problem: &PortfolioProblem, w: &[f64]) -> Result<f64> {
    let obj = Objective::new(problem)?;
    match obj.closed_form(w) {
        Some(r) => Ok(r?.lambda_w),
        None => Err(Error::Unsupported(format!(
            "no closed-form multiplier for metric {} with this reference",
            problem.metric
        ))),
    }
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    let mut theta = 0.0;
    for (i, &x) in u.iter().enumerate() {
        acc += x;
        let t = (acc - 1.0) / (i + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct StartReport {
    pub start: Vec<f64>,
    pub weights: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct PortfolioResult {
    pub weights: Vec<f64>,
    pub objective: f64,
    pub lambda_w: f64,
    pub path: Path,
    pub starts: Vec<StartReport>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

fn better(a: (&[f64], f64), b: (&[f64], f64)) -> bool {
    match a.1.total_cmp(&b.1) {
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Greater => false,
        std::cmp::Ordering::Equal => a.0.iter().zip(b.0).find(|(x, y)| x != y).is_some_and(|(x, y)| x < y),
    }
}

/// Multistart Nelder-Mead over the simplex, with a grid scan and golden-section polish for n = 2.
fn search<F: Fn(&[f64]) -> f64 + Sync>(problem: &PortfolioProblem, f: F) -> Result<(Vec<f64>, f64, Vec<StartReport>)> {
    let n = problem.n();
    let admissible = |w: &[f64]| match problem.bound {
        Some(b) => w.iter().zip(&problem.mu).map(|(x, m)| x * m).sum::<f64>() <= b + 1e-12,
        None => true,
    };
    let eval = |w: &[f64]| if admissible(w) { f(w) } else { f64::INFINITY };
    if n == 1 {
        let w = vec![1.0];
        let v = eval(&w);
        return Ok((w.clone(), v, vec![StartReport { start: w.clone(), weights: w, objective: v, iterations: 0 }]));
    }
    let lift = |y: &[f64]| -> (Vec<f64>, f64) {
        let mut w = y.to_vec();
        w.push(1.0 - y.iter().sum::<f64>());
        let p = project_simplex(&w);
        let d: f64 = w.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum();
        (p, d)
    };
    let best_vertex = (0..n).min_by(|&i, &j| problem.mu[i].total_cmp(&problem.mu[j])).unwrap();
    let pull_in = |w: Vec<f64>| -> Vec<f64> {
        if admissible(&w) {
            return w;
        }
        let e: Vec<f64> = (0..n).map(|i| if i == best_vertex { 1.0 } else { 0.0 }).collect();
        let t = bisect(
            |t| admissible(&w.iter().zip(&e).map(|(a, b)| t * a + (1.0 - t) * b).collect::<Vec<_>>()),
            0.0,
            1.0,
        );
        w.iter().zip(&e).map(|(a, b)| t * a + (1.0 - t) * b).collect()
    };
    let mut starts: Vec<Vec<f64>> = vec![vec![1.0 / n as f64; n]];
    for i in 0..n.min(STARTS - 2) {
        starts.push((0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(problem.seed);
    while starts.len() < STARTS {
        let e: Vec<f64> = (0..n).map(|_| -rng.random_range(1e-12f64..1.0).ln()).collect();
        let s: f64 = e.iter().sum();
        starts.push(e.iter().map(|x| x / s).collect());
    }
    let starts: Vec<Vec<f64>> = starts.into_iter().map(pull_in).collect();
    let reports: Vec<StartReport> = starts
        .par_iter()
        .map(|s| {
            let g = |y: &[f64]| {
                let (w, d) = lift(y);
                let v = eval(&w);
                if v.is_finite() {
                    v + PENALTY * d
                } else {
                    f64::INFINITY
                }
            };
            let r = nelder_mead(g, &s[..n - 1], 0.05, 1e-12, 2000);
            let (w, _) = lift(&r.x);
            let v = eval(&w);
            StartReport { start: s.clone(), weights: w, objective: v, iterations: r.iterations }
        })
        .collect();
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut consider = |w: Vec<f64>, v: f64| {
        if !v.is_finite() {
            return;
        }
        if best.as_ref().is_none_or(|b| better((&w, v), (&b.0, b.1))) {
            best = Some((w, v));
        }
    };
    for r in &reports {
        consider(r.weights.clone(), r.objective);
        consider(r.start.clone(), eval(&r.start));
    }
    if n == 2 {
        let (mut lo, mut hi) = (0.0, 1.0);
        if let Some(b) = problem.bound {
            let (m1, m2) = (problem.mu[0], problem.mu[1]);
            if m1 != m2 {
                let t = (b - m2) / (m1 - m2);
                if m1 > m2 {
                    hi = t.clamp(0.0, 1.0);
                } else {
                    lo = t.clamp(0.0, 1.0);
                }
            }
        }
        let at = |x: f64| vec![x, 1.0 - x];
        let xs: Vec<f64> = (0..GRID_POINTS).map(|i| lo + (hi - lo) * i as f64 / (GRID_POINTS - 1) as f64).collect();
        let vals: Vec<f64> = xs.par_iter().map(|&x| eval(&at(x))).collect();
        let mut ib = 0;
        for i in 1..xs.len() {
            if vals[i] < vals[ib] {
                ib = i;
            }
        }
        for (x, v) in xs.iter().zip(&vals) {
            consider(at(*x), *v);
        }
        if vals[ib].is_finite() {
            let a = xs[ib.saturating_sub(1)];
            let b = xs[(ib + 1).min(xs.len() - 1)];
            let (x, v) = golden_min(
                |x| {
                    let v = eval(&at(x));
                    if v.is_finite() {
                        v
                    } else {
                        f64::MAX
                    }
                },
                a,
                b,
                1e-10,
            );
            consider(at(x), v);
        }
    }
    match best {
        Some((w, v)) => Ok((w, v, reports)),
        None => {
            let detail: Vec<String> =
                reports.iter().map(|r| format!("start {:?} -> {}", r.start, r.objective)).collect();
            Err(Error::Numeric(format!("every start failed: {}", detail.join("; "))))
        }
    }
}

/// Minimizes the robust objective over the admissible simplex.
pub fn optimize(problem: &PortfolioProblem) -> Result<PortfolioResult> {
    let obj = Objective::new(problem)?;
    let (w, v, starts) = search(problem, |w| obj.value(w).map(|e| e.value).unwrap_or(f64::INFINITY))?;
    let e = obj.value(&w)?;
    let mut diagnostics = e.diagnostics.clone();
    if (e.value - v).abs() > 1e-12 * (1.0 + v.abs()) {
        diagnostics.push(format!("re-evaluation differs from search value by {:e}", e.value - v));
    }
    Ok(PortfolioResult { weights: w, objective: e.value, lambda_w: e.lambda_w, path: e.path, starts, diagnostics })
}

/// Robust objective over unimodal members with inflection ξ.
pub struct UnimodalObjective {
    problem: PortfolioProblem,
    g: DistortionFunction,
    g1: f64,
    xi: f64,
    /// b̂_ξ for ε = ∞.
    b_hat: Option<f64>,
    /// Standardized threshold for an elliptical reference.
    threshold0: Option<f64>,
    standard: Option<QuantileFunction>,
}

impl UnimodalObjective {
    pub fn new(problem: &PortfolioProblem) -> Result<Self> {
        problem.validate()?;
        let xi = problem.xi.ok_or_else(|| Error::Param("the unimodal portfolio problem needs xi".into()))?;
        let g = make_distortion(&problem.metric)?;
        g.weight()?;
        let standard = problem.reference.elliptical().map(|e| e.standard()).transpose()?;
        let b_hat = if problem.epsilon.is_infinite() { Some(worst_case_unimodal(&g, 0.0, 1.0, xi)?.value) } else { None };
        let threshold0 = match (&standard, problem.epsilon.is_finite()) {
            (Some(q0), true) => Some(unimodal_wasserstein_feasibility(q0, 0.0, 1.0, xi)?.threshold),
            _ => None,
        };
        Ok(UnimodalObjective { problem: problem.clone(), g1: g.total_at_one(), g, xi, b_hat, threshold0, standard })
    }

    /// Whether w lies in the strict feasibility region ε‖w‖² > threshold(w).
    pub fn feasible(&self, w: &[f64]) -> Result<bool> {
        if self.problem.epsilon.is_infinite() {
            return Ok(true);
        }
        let set = reduce(&self.problem, w)?;
        let thr = match self.threshold0 {
            Some(t0) => t0 * set.sigma * set.sigma,
            None => unimodal_wasserstein_feasibility(&set.reference, set.mu, set.sigma, self.xi)?.threshold,
        };
        Ok(set.epsilon > thr)
    }

    /// `+∞` outside the feasibility region; boundary points are rejected with a diagnostic.
    pub fn value(&self, w: &[f64]) -> Result<Evaluation> {
        let set = reduce(&self.problem, w)?;
        let (mean, s) = (set.mu, set.sigma);
        if let Some(b) = self.b_hat {
            return Ok(Evaluation { value: mean * self.g1 + b * s, lambda_w: 0.0, path: Path::Unimodal, residual: 0.0, diagnostics: vec![] });
        }
        let rejected = |msg: String| Evaluation { value: f64::INFINITY, lambda_w: 0.0, path: Path::Unimodal, residual: 0.0, diagnostics: vec![msg] };
        let r = match (&self.standard, self.threshold0) {
            (Some(q0), Some(t0)) => {
                let eps0 = set.epsilon / (s * s);
                if eps0 < t0 {
                    return Ok(rejected(format!("w = {w:?} is outside the feasibility region")));
                }
                if eps0 <= t0 * (1.0 + 1e-12) {
                    return Ok(rejected(format!("w = {w:?} lies on the feasibility boundary; treated as infeasible")));
                }
                let std_set = MomentWassersteinSet::new(0.0, 1.0, eps0, q0.clone())?;
                let r = worst_case_unimodal_wasserstein(&self.g, &std_set, self.xi)?;
                Evaluation {
                    value: mean * self.g1 + s * r.value,
                    lambda_w: r.lambda.unwrap_or(0.0) / s,
                    path: Path::Unimodal,
                    residual: 0.0,
                    diagnostics: r.diagnostics,
                }
            }
            _ => {
                let feas = unimodal_wasserstein_feasibility(&set.reference, set.mu, s, self.xi)?;
                if set.epsilon <= feas.threshold * (1.0 + 1e-12) {
                    return Ok(rejected(format!("w = {w:?} is outside or on the boundary of the feasibility region")));
                }
                let r = worst_case_unimodal_wasserstein(&self.g, &set, self.xi)?;
                Evaluation {
                    value: r.value,
                    lambda_w: r.lambda.unwrap_or(0.0),
                    path: Path::Unimodal,
                    residual: 0.0,
                    diagnostics: r.diagnostics,
                }
            }
        };
        Ok(r)
    }
}

/// Minimizes the unimodal robust objective; points outside the feasibility region are rejected.
pub fn optimize_unimodal(problem: &PortfolioProblem) -> Result<PortfolioResult> {
    let obj = UnimodalObjective::new(problem)?;
    let (w, _, starts) = search(problem, |w| obj.value(w).map(|e| e.value).unwrap_or(f64::INFINITY))
        .map_err(|e| match e {
            Error::Numeric(m) => Error::Infeasible(format!("no weight vector is feasible for the unimodal set: {m}")),
            other => other,
        })?;
    let e = obj.value(&w)?;
    Ok(PortfolioResult {
        weights: w,
        objective: e.value,
        lambda_w: e.lambda_w,
        path: e.path,
        starts,
        diagnostics: e.diagnostics,
    })
}

/// Asset means and the two covariance matrices of the two-asset experiment.
pub fn table1_setup() -> (Vec<f64>, [Vec<Vec<f64>>; 2]) {
    (
        vec![-2.0, -1.0],
        [vec![vec![4.0, 0.5], vec![0.5, 1.0]], vec![vec![4.0, -0.5], vec![-0.5, 1.0]]],
    )
}

pub fn table1_metrics() -> Vec<MetricSpec> {
    vec![
        MetricSpec::Gd,
        MetricSpec::Mmd,
        MetricSpec::IqdPlus(0.05),
        MetricSpec::Var(0.975),
        MetricSpec::Es(0.95),
        MetricSpec::GlueVar { beta: 0.975, alpha: 0.95, h1: 1.0 / 3.0, h2: 2.0 / 3.0 },
    ]
}

pub const TABLE1_RADII: [f64; 3] = [1.0, 0.01, 1e-10];

/// Expected optimal w₁ reported next to `table1` output, indexed `[covariance][radius][metric]`.
pub const TABLE1_REFERENCE: [[[f64; 6]; 3]; 2] = [
    [
        [0.125, 0.125, 0.125, 0.303327, 0.269148, 0.270353],
        [0.127662, 0.138291, 0.131529, 0.328864, 0.274060, 0.232010],
        [0.125012, 0.125016, 0.125, 0.247684, 0.246388, 0.217790],
    ],
    [
        [0.25, 0.25, 0.25, 0.297553, 0.290089, 0.289914],
        [0.251006, 0.255338, 0.267094, 0.335085, 0.326609, 0.307378],
        [0.25, 0.249999, 0.25, 0.316077, 0.315379, 0.300194],
    ],
];

#[cfg(test)]
mod tests {
    use super::*;

    fn two(eps: f64, metric: MetricSpec, k: usize) -> PortfolioProblem {
        let (mu, s) = table1_setup();
        PortfolioProblem::new(mu, s[k].clone(), eps, metric).unwrap()
    }

    #[test]
    fn reduce_examples() {
        let p = two(1.0, MetricSpec::Gd, 0);
        let s = reduce(&p, &[1.0, 0.0]).unwrap();
        assert_eq!((s.mu, s.sigma, s.epsilon), (-2.0, 2.0, 1.0));
        let s = reduce(&p, &[0.5, 0.5]).unwrap();
        assert!((s.sigma - 1.5f64.sqrt()).abs() < 1e-15);
        assert!((s.epsilon - 0.5).abs() < 1e-15);
    }

    #[test]
    fn simplex_projection() {
        assert_eq!(project_simplex(&[0.2, 0.8]), vec![0.2, 0.8]);
        assert_eq!(project_simplex(&[2.0, 0.0]), vec![1.0, 0.0]);
        let p = project_simplex(&[0.5, 0.5, 0.5]);
        assert!(p.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn rejects_bad_covariance() {
        let r = PortfolioProblem::new(vec![0.0, 0.0], vec![vec![1.0, 2.0], vec![2.0, 1.0]], 1.0, MetricSpec::Gd);
        assert!(matches!(r, Err(Error::Param(_))));
    }

    #[test]
    fn identity_picks_cheapest_vertex() {
        let p = two(0.3, MetricSpec::Identity, 0);
        let r = optimize(&p).unwrap();
        assert!((r.weights[0] - 1.0).abs() < 1e-9, "{:?}", r.weights);
        assert!((r.objective + 2.0).abs() < 1e-9);
    }

    #[test]
    fn gd_minimum_variance() {
        let r = optimize(&two(1.0, MetricSpec::Gd, 0)).unwrap();
        assert!((r.weights[0] - 0.125).abs() < 1e-5, "{:?}", r.weights);
    }
}
