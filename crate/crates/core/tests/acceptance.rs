//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Exits non-zero on any FAIL only when `ACCEPTANCE_STRICT` is set.

mod common;

use common::{cone_oracle, l2_distance, pl_eval_on};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use robustrisk::cli::table1;
use robustrisk::distortion::{make_distortion, rho, DistortionFunction, MetricSpec, WeightFunction};
use robustrisk::error::Error;
use robustrisk::reference::{wasserstein2, QuantileFunction};
use robustrisk::unimodal::{
    project_step, project_weight, unimodal_wasserstein_feasibility, worst_case_unimodal, worst_case_unimodal_wasserstein,
};
use robustrisk::worstcase::{best_case, lambda_concave_closed_form, solve_lambda, worst_case, MomentWassersteinSet, Regime};
use std::time::Instant;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn numbers_in(msg: &str) -> Vec<f64> {
    msg.split(|c: char| !(c.is_ascii_digit() || matches!(c, '.' | '-' | 'e' | 'E' | '+')))
        .filter_map(|t| t.trim_matches(|c| c == '.' || c == 'e' || c == 'E').parse::<f64>().ok())
        .collect()
}

fn names_threshold(msg: &str, thr: f64) -> bool {
    numbers_in(msg).iter().any(|x| (x - thr).abs() <= 1e-12 * (1.0 + thr.abs()))
}

fn random_step(rng: &mut ChaCha8Rng, n: usize) -> WeightFunction {
    let mut cuts: Vec<usize> = Vec::new();
    while cuts.len() < n - 1 {
        let c = rng.random_range(1..64);
        if !cuts.contains(&c) {
            cuts.push(c);
        }
    }
    cuts.sort();
    let mut breaks = vec![0.0];
    breaks.extend(cuts.iter().map(|&c| c as f64 / 64.0));
    breaks.push(1.0);
    let levels: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    WeightFunction::step(&breaks, &levels).unwrap()
}

fn random_g(rng: &mut ChaCha8Rng) -> DistortionFunction {
    let n = rng.random_range(2..=8);
    let mut ts: Vec<f64> = (0..n - 1).map(|_| rng.random_range(0.05..0.95)).collect();
    ts.push(0.0);
    ts.push(1.0);
    ts.sort_by(f64::total_cmp);
    ts.dedup_by(|a, b| (*a - *b).abs() < 1e-3);
    let mut gs = vec![0.0];
    for _ in 1..ts.len() {
        gs.push(rng.random_range(-1.0..1.0));
    }
    DistortionFunction::from_points(&ts, &gs).unwrap()
}

fn random_family(rng: &mut ChaCha8Rng) -> MetricSpec {
    let a: f64 = rng.random_range(0.05..0.95);
    let b: f64 = rng.random_range(0.05..0.95);
    let (lo, hi) = (a.min(b), a.max(b).max(a.min(b) + 1e-3).min(0.999));
    match rng.random_range(0..10) {
        0 => MetricSpec::Gd,
        1 => MetricSpec::Mmd,
        2 => MetricSpec::IqdPlus(0.5 * lo),
        3 => MetricSpec::IqdMinus(0.5 * lo),
        4 => MetricSpec::Var(a),
        5 => MetricSpec::VarPlus(a),
        6 => MetricSpec::Es(a),
        7 => MetricSpec::Rvar(lo, hi),
        8 => MetricSpec::GlueVar { beta: hi, alpha: lo, h1: 0.3 * b, h2: 0.3 * b + 0.5 * a },
        _ => MetricSpec::EsMinusVar(lo, hi),
    }
}

fn random_grid_quantile(rng: &mut ChaCha8Rng) -> QuantileFunction {
    let n = rng.random_range(2..10);
    let u: Vec<f64> = (0..=n).map(|j| j as f64 / n as f64).collect();
    let mut v = vec![rng.random_range(-2.0..2.0)];
    for _ in 0..n {
        v.push(v.last().unwrap() + rng.random_range(1e-3..1.5));
    }
    QuantileFunction::grid(u, v).unwrap()
}

fn bimodal() -> QuantileFunction {
    QuantileFunction::grid(vec![0.0, 0.25, 0.45, 0.55, 0.75, 1.0], vec![-2.5, -1.6, -1.0, 1.0, 1.6, 2.5]).unwrap()
}

fn table_check(tol: f64, limit_s: f64, metrics: &[&str], label: &str) -> Outcome {
    let t = Instant::now();
    let cells = match table1(0) {
        Ok(c) => c,
        Err(e) => return outcome(false, format!("table1 failed: {e}")),
    };
    let secs = t.elapsed().as_secs_f64();
    let mine: Vec<_> = cells.iter().filter(|c| metrics.iter().any(|m| c.metric.starts_with(m))).collect();
    let bad: Vec<String> = mine
        .iter()
        .filter(|c| c.abs_dev > tol)
        .map(|c| format!("{} cov{} eps={}: w1={:.6} expected {:.6} (|dw1|={:.2e})", c.metric, c.covariance, c.epsilon, c.w1, c.expected_w1, c.abs_dev))
        .collect();
    let worst = mine.iter().map(|c| c.abs_dev).fold(0.0, f64::max);
    let pass = bad.is_empty() && secs <= limit_s;
    let mut d = format!("{label}: {} cells, max |dw1| = {worst:.2e} (tol {tol:.0e}), table time {secs:.1}s", mine.len());
    for b in bad {
        d.push_str(&format!("\n      outside tolerance: {b}"));
    }
    outcome(pass, d)
}

fn criterion1() -> Outcome {
    table_check(5e-3, 120.0, &["gd", "mmd", "iqd"], "GD, MMD, IQD(0.05)")
}

fn criterion2() -> Outcome {
    table_check(1e-2, 600.0, &["var", "es", "gluevar"], "VaR(0.975), ES(0.95), GlueVaR")
}

fn criterion3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut n = 0;
    let mut tries = 0;
    while n < 50 && tries < 2000 {
        tries += 1;
        let spec = if n % 2 == 0 { MetricSpec::Es(rng.random_range(0.5..0.99)) } else { MetricSpec::Gd };
        let g = make_distortion(&spec).unwrap();
        let f = QuantileFunction::normal(rng.random_range(-1.0..1.0), rng.random_range(0.5..2.0)).unwrap();
        let (mu, sigma) = (rng.random_range(-1.0..1.0), rng.random_range(0.5..2.0));
        let probe = worst_case(&g, &MomentWassersteinSet::new(mu, sigma, f64::INFINITY, f.clone()).unwrap()).unwrap();
        let eps = probe.epsilon_lower + rng.random_range(0.05..0.95) * (probe.epsilon_upper - probe.epsilon_lower);
        let set = MomentWassersteinSet::new(mu, sigma, eps, f).unwrap();
        if worst_case(&g, &set).map(|r| r.regime != Regime::Interior).unwrap_or(true) {
            continue;
        }
        let (a, b) = (solve_lambda(&g, &set).unwrap(), lambda_concave_closed_form(&g, &set).unwrap());
        worst = worst.max((a - b).abs() / b.abs().max(1e-300));
        n += 1;
    }
    outcome(n == 50 && worst <= 1e-6, format!("{n} interior instances (ES, GD), max relative |dλ| = {worst:.2e}"))
}

/// ‖γ − g(1)‖ from cell averages (g(1−u_i) − g(1−u_{i+1}))/h of g itself.
fn weight_std_oracle(g: &DistortionFunction, n: usize) -> f64 {
    let h = 1.0 / n as f64;
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    for i in 0..n {
        let (u0, u1) = (i as f64 * h, (i + 1) as f64 * h);
        let gamma = (g.eval(1.0 - u0) - g.eval(1.0 - u1)) / h;
        s1 += gamma * h;
        s2 += gamma * gamma * h;
    }
    (s2 - s1 * s1).sqrt()
}

fn criterion4() -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    let set = MomentWassersteinSet::new(0.0, 1.0, f64::INFINITY, QuantileFunction::standard_normal()).unwrap();
    let mut cases: Vec<(MetricSpec, f64)> =
        [0.9, 0.95, 0.99].iter().map(|&a| (MetricSpec::Es(a), (a / (1.0 - a)).sqrt())).collect();
    cases.push((MetricSpec::Gd, 1.0 / 3f64.sqrt()));
    for (spec, want) in cases {
        let g = make_distortion(&spec).unwrap();
        let oracle = weight_std_oracle(&g, 1_000_000);
        let got = worst_case(&g, &set).unwrap().value;
        let ok = (oracle - want).abs() <= 1e-8 && (got - want).abs() <= 1e-8;
        pass &= ok;
        lines.push(format!("{spec}: value {got:.12}, closed form {want:.12}, oracle {oracle:.12}"));
    }
    outcome(pass, lines.join("; "))
}

fn criterion5() -> Outcome {
    let mmd = make_distortion(&MetricSpec::Mmd).unwrap().weight().unwrap();
    let p = project_step(&mmd, 0.5).unwrap();
    let d = l2_distance(|u| p.value(u), |u| 3.0 * (u - 0.5), 1 << 18);
    let gd = make_distortion(&MetricSpec::Gd).unwrap().weight().unwrap();
    let mut sup: f64 = 0.0;
    for xi in [0.0, 0.1, 0.25, 0.5, 0.7, 0.9, 1.0] {
        let q = project_weight(&gd, xi).unwrap();
        for i in 0..=1000 {
            let u = i as f64 / 1000.0;
            sup = sup.max((q.value(u) - gd.value(u)).abs());
        }
    }
    outcome(d <= 1e-6 && sup <= 1e-8, format!("MMD at 1/2: L2 error {d:.2e}; GD over 7 values of xi: sup error {sup:.2e}"))
}

fn inner(f: impl Fn(f64) -> f64, g: impl Fn(f64) -> f64, n: usize) -> f64 {
    (0..n).map(|i| (i as f64 + 0.5) / n as f64).map(|u| f(u) * g(u)).sum::<f64>() / n as f64
}

fn criterion6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut worst_d, mut worst_o): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let n = rng.random_range(2..=16);
        let gamma = random_step(&mut rng, n);
        let xi = rng.random_range(0..=64) as f64 / 64.0;
        let p = project_step(&gamma, xi).unwrap();
        let (x, v) = cone_oracle(&gamma, xi);
        worst_d = worst_d.max(l2_distance(|u| p.value(u), |u| pl_eval_on(&x, &v, u), 1 << 16));
        let o1 = inner(|u| gamma.value(u) - p.value(u), |u| p.value(u), 1 << 18);
        let o2 = inner(|u| gamma.value(u) - p.value(u), |_| 1.0, 1 << 18);
        worst_o = worst_o.max(o1.abs()).max(o2.abs());
    }
    outcome(
        worst_d <= 1e-4 && worst_o <= 1e-6,
        format!("100 step weights: max L2 gap to oracle {worst_d:.2e}, max orthogonality residual {worst_o:.2e}"),
    )
}

fn criterion7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let specs = [
        MetricSpec::VarPlus(0.95),
        MetricSpec::IqdPlus(0.1),
        MetricSpec::EsMinusVar(0.8, 0.95),
        MetricSpec::GlueVar { beta: 0.975, alpha: 0.95, h1: 1.0 / 3.0, h2: 2.0 / 3.0 },
        MetricSpec::Es(0.9),
    ];
    let (mut n, mut tries) = (0, 0);
    let (mut em, mut es, mut ed): (f64, f64, f64) = (0.0, 0.0, 0.0);
    while n < 50 && tries < 2000 {
        tries += 1;
        let spec = &specs[n % specs.len()];
        let g = make_distortion(spec).unwrap().usc_version();
        let f = if rng.random_bool(0.5) {
            QuantileFunction::normal(rng.random_range(-1.0..1.0), rng.random_range(0.5..2.0)).unwrap()
        } else {
            QuantileFunction::student_t(rng.random_range(4.0..12.0), rng.random_range(-1.0..1.0), 1.0).unwrap()
        };
        let (mu, sigma) = (rng.random_range(-1.0..1.0), rng.random_range(0.5..2.0));
        let probe = worst_case(&g, &MomentWassersteinSet::new(mu, sigma, f64::INFINITY, f.clone()).unwrap()).unwrap();
        let eps = probe.epsilon_lower + rng.random_range(0.05..0.95) * (probe.epsilon_upper - probe.epsilon_lower);
        let set = MomentWassersteinSet::new(mu, sigma, eps, f).unwrap();
        let r = match worst_case(&g, &set) {
            Ok(r) if r.regime == Regime::Interior && r.attained => r,
            _ => continue,
        };
        let q = r.extremal_quantile.unwrap();
        em = em.max((q.mean() - mu).abs());
        es = es.max((q.std() - sigma).abs());
        ed = ed.max((wasserstein2(&set.reference, &q) - eps.sqrt()).abs());
        n += 1;
    }
    outcome(
        n == 50 && em <= 1e-7 && es <= 1e-7 && ed <= 1e-7,
        format!("{n} interior instances: max |dmean| {em:.2e}, |dstd| {es:.2e}, |d_W − sqrt(eps)| {ed:.2e}"),
    )
}

fn criterion8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for i in 0..60 {
        let g = random_g(&mut rng);
        let f = if i % 2 == 0 { bimodal() } else { random_grid_quantile(&mut rng) };
        let xi = rng.random_range(0.05..0.95);
        let (mu, sigma) = (rng.random_range(-1.0..1.0), rng.random_range(0.5..2.0));
        let feas = unimodal_wasserstein_feasibility(&f, mu, sigma, xi).unwrap();
        let eps = feas.threshold + rng.random_range(0.05..3.0);
        let set = MomentWassersteinSet::new(mu, sigma, eps, f).unwrap();
        let uw = worst_case_unimodal_wasserstein(&g, &set, xi).unwrap().value;
        let um = worst_case_unimodal(&g, mu, sigma, xi).unwrap().value;
        let m = worst_case(&g, &MomentWassersteinSet::moments_only(mu, sigma).unwrap()).unwrap().value;
        worst = worst.max(uw - um).max(um - m);
        count += 1;
    }
    let mut mono: f64 = 0.0;
    for _ in 0..60 {
        let g = make_distortion(&random_family(&mut rng)).unwrap();
        let f = random_grid_quantile(&mut rng);
        let (mu, sigma) = (rng.random_range(-1.0..1.0), rng.random_range(0.5..2.0));
        let (mf, sf) = f.moments();
        let floor = (mf - mu).powi(2) + (sf - sigma).powi(2);
        let mut prev = f64::NEG_INFINITY;
        for k in 0..16 {
            let eps = floor + 1e-4 * 2f64.powi(k);
            let v = worst_case(&g, &MomentWassersteinSet::new(mu, sigma, eps, f.clone()).unwrap()).unwrap().value;
            mono = mono.max(prev - v);
            prev = v;
        }
    }
    outcome(
        worst <= 1e-7 && mono <= 1e-7,
        format!("{count} ordering instances: max violation {:.2e}; 60 radius sweeps: max decrease {:.2e}", worst.max(0.0), mono.max(0.0)),
    )
}

fn criterion9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut pass = true;
    let mut notes = Vec::new();
    let gd = make_distortion(&MetricSpec::Gd).unwrap();
    let mut floor_ok = 0;
    for _ in 0..10 {
        let f = QuantileFunction::normal(rng.random_range(-2.0..2.0), rng.random_range(0.5..2.0)).unwrap();
        let (mu, sigma) = (rng.random_range(-1.0..1.0), rng.random_range(0.5..2.0));
        let (mf, sf) = f.moments();
        let floor = (mf - mu).powi(2) + (sf - sigma).powi(2);
        let res = MomentWassersteinSet::new(mu, sigma, 0.9 * floor, f).and_then(|s| worst_case(&gd, &s));
        match res {
            Err(Error::Infeasible(m)) if names_threshold(&m, floor) => floor_ok += 1,
            other => {
                pass = false;
                notes.push(format!("moment floor {floor}: {other:?}"));
            }
        }
    }
    let f = bimodal();
    let (mut uni_ok, mut single): (usize, f64) = (0, 0.0);
    for _ in 0..10 {
        let (mu, sigma, xi) = (rng.random_range(-1.0..1.0), rng.random_range(0.5..2.0), rng.random_range(0.1..0.9));
        let feas = unimodal_wasserstein_feasibility(&f, mu, sigma, xi).unwrap();
        let below = MomentWassersteinSet::new(mu, sigma, feas.threshold * 0.999, f.clone()).unwrap();
        match worst_case_unimodal_wasserstein(&gd, &below, xi) {
            Err(Error::Infeasible(m)) if names_threshold(&m, feas.threshold) => uni_ok += 1,
            other => {
                pass = false;
                notes.push(format!("unimodal threshold {}: {other:?}", feas.threshold));
            }
        }
        let at = MomentWassersteinSet::new(mu, sigma, feas.threshold, f.clone()).unwrap();
        let q = worst_case_unimodal_wasserstein(&gd, &at, xi).unwrap().extremal_quantile.unwrap();
        let p = feas.projection.as_ref().unwrap();
        for i in 1..400 {
            let u = i as f64 / 400.0;
            single = single.max((q.value(u) - ((p.value(u) - p.a_hat) * sigma / p.b_hat + mu)).abs());
        }
    }
    pass &= single <= 1e-7;
    let mut d = format!("moment floor named {floor_ok}/10, unimodal threshold named {uni_ok}/10, singleton max error {single:.2e}");
    for n in notes {
        d.push_str(&format!("\n      {n}"));
    }
    outcome(pass, d)
}

fn member(f: &QuantileFunction, p: &QuantileFunction, t: f64, mu: f64, sigma: f64) -> QuantileFunction {
    let n = 400;
    let u: Vec<f64> = (0..=n).map(|j| j as f64 / n as f64).collect();
    let v: Vec<f64> = u.iter().map(|&x| (1.0 - t) * f.value(x.clamp(1e-9, 1.0)) + t * p.value(x.clamp(1e-9, 1.0))).collect();
    let q = QuantileFunction::grid(u, v).unwrap();
    let (m, s) = q.moments();
    QuantileFunction::affine_of(&q, mu - sigma * m / s, sigma / s).unwrap()
}

fn criterion10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut dual: f64 = 0.0;
    let mut viol: f64 = 0.0;
    for i in 0..200 {
        let g = if i % 3 == 0 { random_g(&mut rng) } else { make_distortion(&random_family(&mut rng)).unwrap() };
        let f = random_grid_quantile(&mut rng);
        let p = random_grid_quantile(&mut rng);
        let (mu, sigma) = (rng.random_range(-1.0..1.0), rng.random_range(0.3..2.0));
        let q = member(&f, &p, rng.random_range(0.0..1.0), mu, sigma);
        let d2 = wasserstein2(&f, &q).powi(2);
        let set = MomentWassersteinSet::new(mu, sigma, (d2 * rng.random_range(1.0..2.0)).max(1e-6), f).unwrap();
        let hi = worst_case(&g, &set).unwrap().value;
        let lo = best_case(&g, &set).unwrap().value;
        let neg = worst_case(&g.negate(), &set).unwrap().value;
        dual = dual.max((lo + neg).abs());
        let v = rho(&g, &q).unwrap();
        viol = viol.max(lo - v).max(v - hi);
    }
    outcome(
        dual <= 1e-10 && viol <= 1e-7,
        format!("200 members: max |inf + sup(-g)| {dual:.2e}, max sandwich violation {:.2e}", viol.max(0.0)),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("two-asset weights, variability metrics", criterion1),
        ("two-asset weights, tail metrics", criterion2),
        ("concave multiplier closed form vs bisection", criterion3),
        ("moment-only closed forms", criterion4),
        ("projection exactness", criterion5),
        ("projection vs grid oracle", criterion6),
        ("extremal-quantile contracts", criterion7),
        ("bound ordering and radius monotonicity", criterion8),
        ("feasibility errors and singleton", criterion9),
        ("duality and sandwich", criterion10),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let o = f();
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {:>2}: {} {name} ({:.1}s)\n      {}",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            o.detail
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
