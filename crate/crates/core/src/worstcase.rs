//! Worst- and best-case distortion risk over the set of distributions with
//! mean μ, standard deviation σ and Wasserstein-2 distance at most √ε from F.

use crate::distortion::{rho, DistortionFunction};
use crate::envelope::{EnvelopeContext, EnvelopeDerivative, DEFAULT_RESOLUTION};
use crate::error::{Error, Result};
use crate::reference::QuantileFunction;
use serde::Serialize;

const LAMBDA_RTOL: f64 = 1e-10;
const MAX_ITER: usize = 200;
const TIE_TOL: f64 = 1e-10;

/// {G : mean μ, std σ, d_W(F, G)² ≤ ε}; `epsilon = ∞` drops the distance constraint.
#[derive(Debug, Clone)]
pub struct MomentWassersteinSet {
    pub mu: f64,
    pub sigma: f64,
    pub epsilon: f64,
    pub reference: QuantileFunction,
}

impl MomentWassersteinSet {
    pub fn new(mu: f64, sigma: f64, epsilon: f64, reference: QuantileFunction) -> Result<Self> {
        if !mu.is_finite() {
            return Err(Error::Param(format!("mu must be finite, got {mu}")));
        }
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::Param(format!("sigma must be positive and finite, got {sigma}")));
        }
        if !(epsilon > 0.0) {
            return Err(Error::Param(format!("epsilon must be positive (or infinite), got {epsilon}")));
        }
        let (m, s) = reference.moments();
        if !m.is_finite() || !s.is_finite() {
            return Err(Error::Param("reference distribution must have finite mean and variance".into()));
        }
        Ok(MomentWassersteinSet { mu, sigma, epsilon, reference })
    }

    /// Moment-only set (ε = ∞) around a standard normal reference.
    pub fn moments_only(mu: f64, sigma: f64) -> Result<Self> {
        MomentWassersteinSet::new(mu, sigma, f64::INFINITY, QuantileFunction::standard_normal())
    }

    /// (μ_F − μ)² + (σ_F − σ)²: the set is empty below this radius.
    pub fn lower_threshold(&self) -> f64 {
        let (m, s) = self.reference.moments();
        (m - self.mu).powi(2) + (s - self.sigma).powi(2)
    }

    pub fn is_unbounded(&self) -> bool {
        self.epsilon.is_infinite()
    }

    fn check_feasible(&self) -> Result<f64> {
        let low = self.lower_threshold();
        if self.epsilon < low * (1.0 - 1e-12) {
            return Err(Error::Infeasible(format!(
                "epsilon = {} is below the moment floor (mu_F - mu)^2 + (sigma_F - sigma)^2 = {low}",
                self.epsilon
            )));
        }
        Ok(low)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Interior,
    BoundaryLambda0,
    ConstantGstar,
    UscNoAttainer,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Regime::Interior => "interior",
            Regime::BoundaryLambda0 => "boundary_lambda0",
            Regime::ConstantGstar => "constant_gstar",
            Regime::UscNoAttainer => "usc_no_attainer",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundResult {
    pub value: f64,
    pub lambda: Option<f64>,
    pub regime: Regime,
    pub attained: bool,
    pub epsilon_lower: f64,
    pub epsilon_upper: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quantile_csv_path: Option<String>,
    #[serde(skip)]
    pub extremal_quantile: Option<QuantileFunction>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inflection: Option<f64>,
}

/// h_λ for the given envelope and set.
pub fn h_lambda(env: &EnvelopeDerivative, mu: f64, sigma: f64) -> Result<QuantileFunction> {
    env.h_lambda(mu, sigma)
}

struct Prepared {
    ctx: EnvelopeContext,
    env0: EnvelopeDerivative,
    low: f64,
    high: f64,
    /// Right end of the λ-range on which (g_λ*)' is constant.
    lambda_flat: f64,
}

/// Smallest λ at which (g_λ*)' stops being constant, with the derivative just past it.
fn leave_flat(ctx: &EnvelopeContext, sf: f64) -> Result<(f64, EnvelopeDerivative)> {
    let tiny = 1e-10 / sf;
    let env = ctx.at(tiny)?;
    if !env.is_constant() {
        return Ok((0.0, env));
    }
    let mut lo = tiny;
    let mut hi = 1.0 / sf;
    let mut env_hi = ctx.at(hi)?;
    let mut n = 0;
    while env_hi.is_constant() {
        lo = hi;
        hi *= 2.0;
        n += 1;
        if n > 1100 || !hi.is_finite() {
            return Err(Error::Regime("(g_λ*)' is constant for every λ; the standing assumption on g fails".into()));
        }
        env_hi = ctx.at(hi)?;
    }
    while hi - lo > LAMBDA_RTOL * hi {
        let mid = 0.5 * (lo + hi);
        let env = ctx.at(mid)?;
        if env.is_constant() {
            lo = mid;
        } else {
            hi = mid;
            env_hi = env;
        }
    }
    Ok((hi, env_hi))
}

fn prepare(g: &DistortionFunction, set: &MomentWassersteinSet) -> Result<Prepared> {
    let low = set.check_feasible()?;
    let ctx = EnvelopeContext::new(g, &set.reference, DEFAULT_RESOLUTION)?;
    let env0 = ctx.at(0.0)?;
    let (_, sf) = set.reference.moments();
    let (lambda_flat, omc) = if env0.is_constant() && !set.is_unbounded() {
        let (l, env) = leave_flat(&ctx, sf)?;
        (l, env.one_minus_corr())
    } else {
        (0.0, env0.one_minus_corr())
    };
    let high = low + 2.0 * set.sigma * sf * omc;
    Ok(Prepared { ctx, env0, low, high, lambda_flat })
}

fn is_interior(p: &Prepared, eps: f64) -> bool {
    eps.is_finite() && eps < p.high - TIE_TOL * (1.0 + p.high) && eps > p.low * (1.0 + 1e-12)
}

/// Bisection for λ with 1 − Corr(F⁻¹, (g_λ*)') = (ε − L)/(2σσ_F).
fn bisect_lambda(p: &Prepared, set: &MomentWassersteinSet, diagnostics: &mut Vec<String>) -> Result<EnvelopeDerivative> {
    let (_, sf) = set.reference.moments();
    let target = (set.epsilon - p.low) / (2.0 * set.sigma * sf);
    let mut lo = p.lambda_flat;
    let mut hi = lo + 1.0 / sf;
    let mut env_hi = p.ctx.at(hi)?;
    let mut n = 0;
    while env_hi.is_constant() || env_hi.one_minus_corr() > target {
        lo = hi;
        hi *= 2.0;
        env_hi = p.ctx.at(hi)?;
        n += 1;
        if n > 1100 || !hi.is_finite() {
            return Err(Error::Numeric(format!(
                "could not bracket lambda: 1 - corr stays above {target} up to lambda = {hi}"
            )));
        }
    }
    let mut env_lo = if lo == 0.0 { p.env0.clone() } else { p.ctx.at(lo)? };
    let mut last_value = env_lo.worst_value(set.mu, set.sigma);
    let mut continuity_ok = true;
    for _ in 0..MAX_ITER {
        if hi - lo <= LAMBDA_RTOL * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let env = p.ctx.at(mid)?;
        if env.is_constant() {
            lo = mid;
            continue;
        }
        let omc = env.one_minus_corr();
        let v = env.worst_value(set.mu, set.sigma);
        if omc > target {
            if v < env_hi.worst_value(set.mu, set.sigma) - 1e-8 * (1.0 + v.abs()) {
                continuity_ok = false;
            }
            lo = mid;
            env_lo = env;
            last_value = v;
        } else {
            if v > last_value + 1e-8 * (1.0 + v.abs()) {
                continuity_ok = false;
            }
            hi = mid;
            env_hi = env;
        }
        if omc == target {
            break;
        }
    }
    if !continuity_ok {
        diagnostics.push("rho(H_lambda) was not monotone along the bisection path; continuity in lambda is doubtful".into());
    }
    let pick = if !env_lo.is_constant() && (env_lo.one_minus_corr() - target).abs() < (env_hi.one_minus_corr() - target).abs() {
        env_lo
    } else {
        env_hi
    };
    diagnostics.extend(pick.flags().iter().cloned());
    Ok(pick)
}

/// λ_ε solving d_W(F, H_λ) = √ε; only defined in the interior regime.
pub fn solve_lambda(g: &DistortionFunction, set: &MomentWassersteinSet) -> Result<f64> {
    let p = prepare(g, set)?;
    if !is_interior(&p, set.epsilon) {
        return Err(Error::Regime(format!(
            "epsilon = {} is outside the interior regime ({}, {}); use worst_case for the boundary branches",
            set.epsilon, p.low, p.high
        )));
    }
    let mut d = Vec::new();
    Ok(bisect_lambda(&p, set, &mut d)?.lambda())
}

/// Closed-form λ_ε for concave g.
pub fn lambda_concave_closed_form(g: &DistortionFunction, set: &MomentWassersteinSet) -> Result<f64> {
    if !g.is_concave() {
        return Err(Error::Param("the closed-form lambda requires a concave distortion".into()));
    }
    let p = prepare(g, set)?;
    let (mf, sf) = set.reference.moments();
    let (mu, sigma) = (set.mu, set.sigma);
    let v = p.env0.variance();
    let c = p.env0.covariance();
    let ce = (mf * mf + sf * sf + mu * mu + sigma * sigma - 2.0 * mu * mf - set.epsilon) / 2.0;
    let den = ce * ce - sigma * sigma * sf * sf;
    if !(den < 0.0) || ce < 0.0 {
        return Err(Error::Regime(format!(
            "closed form undefined: C_eps^2 - sigma^2 sigma_F^2 = {den}; epsilon is outside the interior regime"
        )));
    }
    let disc = c * c - sf * sf * (v * ce * ce - sigma * sigma * c * c) / den;
    if disc < 0.0 {
        return Err(Error::Regime(format!("closed form undefined: negative discriminant {disc}")));
    }
    Ok((-c + disc.sqrt()) / (sf * sf))
}

/// Regime dispatch for sup ρ_g over the set.
pub fn worst_case(g: &DistortionFunction, set: &MomentWassersteinSet) -> Result<BoundResult> {
    let p = prepare(g, set)?;
    let usc = g.is_usc();
    let mut diagnostics = Vec::new();
    let base = |value: f64, lambda: Option<f64>, regime: Regime, q: Option<QuantileFunction>, d: Vec<String>| {
        let attained = q.is_some();
        BoundResult {
            value,
            lambda,
            regime,
            attained,
            epsilon_lower: p.low,
            epsilon_upper: p.high,
            diagnostics: d,
            quantile_csv_path: None,
            extremal_quantile: q,
            inflection: None,
        }
    };

    if set.epsilon.is_finite() && set.epsilon <= p.low * (1.0 + 1e-12) {
        let q = QuantileFunction::affine_of(p.ctx.standardized(), set.mu, set.sigma)?;
        let v = rho(g, &q)?;
        diagnostics.push("epsilon equals the moment floor; the set is the single affine transform of F".into());
        return Ok(base(v, None, Regime::Interior, Some(q), diagnostics));
    }

    if !is_interior(&p, set.epsilon) {
        if p.env0.is_constant() {
            if p.lambda_flat > 0.0 {
                let (_, sf) = set.reference.moments();
                let target = (set.epsilon - p.low) / (2.0 * set.sigma * sf);
                let v = p.ctx.g1() * set.mu - set.sigma * p.lambda_flat * sf * (1.0 - target).max(0.0);
                diagnostics.push(format!(
                    "(g_λ*)' is constant for λ up to {}; value is the dual bound at that multiplier",
                    p.lambda_flat
                ));
                return Ok(BoundResult {
                    attained: false,
                    ..base(v, Some(p.lambda_flat), Regime::ConstantGstar, None, diagnostics)
                });
            }
            let v = p.ctx.g1() * set.mu;
            return Ok(BoundResult { attained: usc, ..base(v, None, Regime::ConstantGstar, None, diagnostics) });
        }
        let v = p.env0.worst_value(set.mu, set.sigma);
        diagnostics.extend(p.env0.flags().iter().cloned());
        if !usc {
            return Ok(base(v, Some(0.0), Regime::UscNoAttainer, None, diagnostics));
        }
        let q = p.env0.h_lambda(set.mu, set.sigma)?;
        return Ok(base(v, Some(0.0), Regime::BoundaryLambda0, Some(q), diagnostics));
    }

    let env = bisect_lambda(&p, set, &mut diagnostics)?;
    let v = env.worst_value(set.mu, set.sigma);
    if !usc {
        return Ok(base(v, Some(env.lambda()), Regime::UscNoAttainer, None, diagnostics));
    }
    let q = env.h_lambda(set.mu, set.sigma)?;
    Ok(base(v, Some(env.lambda()), Regime::Interior, Some(q), diagnostics))
}

/// inf ρ_g over the set, as −sup ρ_{−g}.
pub fn best_case(g: &DistortionFunction, set: &MomentWassersteinSet) -> Result<BoundResult> {
    let mut r = worst_case(&g.negate(), set)?;
    r.value = -r.value;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distortion::{make_distortion, MetricSpec};
    use crate::reference::wasserstein2;

    fn set(eps: f64) -> MomentWassersteinSet {
        MomentWassersteinSet::new(0.0, 1.0, eps, QuantileFunction::standard_normal()).unwrap()
    }

    #[test]
    fn es_without_distance_constraint() {
        let g = make_distortion(&MetricSpec::Es(0.9)).unwrap();
        let r = worst_case(&g, &set(f64::INFINITY)).unwrap();
        assert!((r.value - 3.0).abs() < 1e-12);
        assert_eq!(r.regime, Regime::BoundaryLambda0);
    }

    #[test]
    fn closed_form_matches_bisection() {
        let g = make_distortion(&MetricSpec::Es(0.95)).unwrap();
        let s = set(0.05);
        let a = solve_lambda(&g, &s).unwrap();
        let b = lambda_concave_closed_form(&g, &s).unwrap();
        assert!((a - b).abs() < 1e-6 * (1.0 + b), "{a} {b}");
    }

    #[test]
    fn interior_extremal_membership() {
        let g = make_distortion(&MetricSpec::VarPlus(0.95)).unwrap();
        let s = MomentWassersteinSet::new(0.5, 1.3, 0.3, QuantileFunction::normal(0.2, 1.0).unwrap()).unwrap();
        let r = worst_case(&g, &s).unwrap();
        assert_eq!(r.regime, Regime::Interior);
        let q = r.extremal_quantile.unwrap();
        assert!((q.mean() - 0.5).abs() < 1e-8);
        assert!((q.std() - 1.3).abs() < 1e-8);
        assert!((wasserstein2(&s.reference, &q) - 0.3f64.sqrt()).abs() < 1e-7);
        assert!((rho(&g, &q).unwrap() - r.value).abs() < 1e-7);
    }

    #[test]
    fn var_equals_var_plus() {
        let s = set(0.1);
        let a = worst_case(&make_distortion(&MetricSpec::Var(0.975)).unwrap(), &s).unwrap();
        let b = worst_case(&make_distortion(&MetricSpec::VarPlus(0.975)).unwrap(), &s).unwrap();
        assert!((a.value - b.value).abs() < 1e-12);
        assert!(!a.attained && a.extremal_quantile.is_none());
        assert_eq!(a.regime, Regime::UscNoAttainer);
    }

    #[test]
    fn identity_and_infeasible() {
        let g = make_distortion(&MetricSpec::Identity).unwrap();
        let s = MomentWassersteinSet::new(2.0, 1.0, f64::INFINITY, QuantileFunction::standard_normal()).unwrap();
        let r = worst_case(&g, &s).unwrap();
        assert_eq!(r.regime, Regime::ConstantGstar);
        assert_eq!(r.value, 2.0);
        assert_eq!(best_case(&g, &s).unwrap().value, 2.0);
        let s = MomentWassersteinSet::new(2.0, 1.0, 1.0, QuantileFunction::standard_normal()).unwrap();
        assert!(matches!(worst_case(&g, &s), Err(Error::Infeasible(_))));
    }
}
