//! Command-line front end.
//!
//! Exit codes: 0 success, 1 numeric or regime failure, 2 infeasible set, 64 usage error.

use crate::distortion::{make_distortion, MetricSpec};
use crate::error::{Error, Result};
use crate::portfolio::{
    optimize, optimize_unimodal, table1_metrics, table1_setup, JointReference, PortfolioProblem, TABLE1_RADII,
    TABLE1_REFERENCE,
};
use crate::reference::{clustered_grid, read_grid_csv, read_sample_csv, QuantileFunction};
use crate::unimodal::{
    project, project_weight, worst_case_interval_inflection, worst_case_unimodal, worst_case_unimodal_wasserstein,
};
use crate::worstcase::{best_case, worst_case, BoundResult, MomentWassersteinSet};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_NUMERIC: i32 = 1;
pub const EXIT_INFEASIBLE: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

const QUANTILE_POINTS: usize = 401;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Infeasible(_) => EXIT_INFEASIBLE,
        Error::Param(_) | Error::Unsupported(_) => EXIT_USAGE,
        Error::Regime(_) | Error::Numeric(_) => EXIT_NUMERIC,
    }
}

mod opt_radius {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => crate::portfolio::radius::serialize(x, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        #[derive(Deserialize)]
        struct W(#[serde(with = "crate::portfolio::radius")] f64);
        Ok(Option::<W>::deserialize(d)?.map(|w| w.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum CommandKind {
    Bound,
    Best,
    Project,
    Portfolio,
    Table1,
    Frontier,
}

/// Log-spaced radius grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsGrid {
    pub min: f64,
    pub max: f64,
    pub points: usize,
}

impl Default for EpsGrid {
    fn default() -> Self {
        EpsGrid { min: 1e-6, max: 10.0, points: 40 }
    }
}

impl EpsGrid {
    pub fn values(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![self.min];
        }
        let (a, b) = (self.min.ln(), self.max.ln());
        (0..self.points).map(|i| (a + (b - a) * i as f64 / (self.points - 1) as f64).exp()).collect()
    }
}

/// Everything a run needs; loadable from JSON or TOML and overridable by flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: CommandKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_radius")]
    pub epsilon: Option<f64>,
    /// `normal(m,s)`, `t(nu,loc,scale)`, `uniform(a,b)`, `sample:<csv>`, `grid:<csv>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xi_range: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub portfolio: Option<PortfolioProblem>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_grid: Option<EpsGrid>,
    /// Covariance index (1 or 2) of the two-asset experiment, for `frontier`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub json: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantile_csv: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_precision")]
    pub precision: usize,
    /// Tolerance on |Δw₁| used to flag `table1` rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    #[serde(default)]
    pub stdout: bool,
}

fn default_precision() -> usize {
    6
}

impl RunConfig {
    pub fn new(command: CommandKind) -> Self {
        RunConfig {
            command,
            metric: None,
            mu: None,
            sigma: None,
            epsilon: None,
            reference: None,
            xi: None,
            xi_range: None,
            steps: None,
            portfolio: None,
            eps_grid: None,
            covariance: None,
            metrics: None,
            out: None,
            json: None,
            quantile_csv: None,
            seed: 0,
            precision: default_precision(),
            tolerance: None,
            stdout: false,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Param(format!("cannot read config {}: {e}", path.display())))?;
        let is_toml = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        if is_toml {
            toml::from_str(&text).map_err(|e| Error::Param(format!("bad TOML config {}: {e}", path.display())))
        } else {
            serde_json::from_str(&text).map_err(|e| Error::Param(format!("bad JSON config {}: {e}", path.display())))
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Param(e.to_string()))
    }

    fn metric_spec(&self) -> Result<MetricSpec> {
        self.metric.as_deref().ok_or_else(|| Error::Param("--metric is required".into()))?.parse()
    }

    /// Checks each field against the preconditions of the module that consumes it.
    pub fn validate(&self) -> Result<()> {
        if let Some(m) = &self.metric {
            m.parse::<MetricSpec>()?;
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Param(format!("sigma must be positive and finite, got {s}")));
            }
        }
        if let Some(m) = self.mu {
            if !m.is_finite() {
                return Err(Error::Param(format!("mu must be finite, got {m}")));
            }
        }
        if let Some(e) = self.epsilon {
            if !(e > 0.0) {
                return Err(Error::Param(format!("epsilon must be positive or inf, got {e}")));
            }
        }
        for xi in self.xi.iter().chain(self.xi_range.iter().flatten()) {
            if !(0.0..=1.0).contains(xi) {
                return Err(Error::Param(format!("xi must lie in [0,1], got {xi}")));
            }
        }
        if let Some([a, b]) = self.xi_range {
            if a > b {
                return Err(Error::Param(format!("xi range [{a}, {b}] is reversed")));
            }
        }
        if let Some(g) = &self.eps_grid {
            if !(g.min > 0.0 && g.max >= g.min && g.max.is_finite() && g.points >= 1) {
                return Err(Error::Param(format!("bad epsilon grid {g:?}")));
            }
        }
        if let Some(c) = self.covariance {
            if !(1..=2).contains(&c) {
                return Err(Error::Param(format!("covariance index must be 1 or 2, got {c}")));
            }
        }
        if let Some(ms) = &self.metrics {
            for m in ms {
                m.parse::<MetricSpec>()?;
            }
        }
        if let Some(p) = &self.portfolio {
            p.validate()?;
        }
        if let Some(t) = self.tolerance {
            if !(t > 0.0) {
                return Err(Error::Param(format!("tolerance must be positive, got {t}")));
            }
        }
        Ok(())
    }
}

fn call_args(s: &str) -> Result<(String, Vec<f64>)> {
    let s = s.trim();
    let (name, rest) = match s.find('(') {
        Some(i) if s.ends_with(')') => (&s[..i], &s[i + 1..s.len() - 1]),
        Some(_) => return Err(Error::Param(format!("missing ')' in {s:?}"))),
        None => (s, ""),
    };
    let args = rest
        .split(',')
        .map(str::trim)
        .filter(|a| !a.is_empty())
        .map(|a| a.parse::<f64>().map_err(|_| Error::Param(format!("bad number {a:?} in {s:?}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok((name.trim().to_ascii_lowercase(), args))
}

/// Parses a univariate reference spec.
pub fn parse_reference(spec: &str) -> Result<QuantileFunction> {
    if let Some(path) = spec.strip_prefix("sample:") {
        let path = Path::new(path);
        let values = read_sample_csv(path, false).or_else(|_| read_sample_csv(path, true))?;
        return QuantileFunction::empirical(values);
    }
    if let Some(path) = spec.strip_prefix("grid:") {
        return read_grid_csv(Path::new(path));
    }
    let (name, a) = call_args(spec)?;
    let arity = |n: usize| -> Result<()> {
        if a.len() == n {
            Ok(())
        } else {
            Err(Error::Param(format!("{name} takes {n} arguments, got {}", a.len())))
        }
    };
    match name.as_str() {
        "normal" | "n" => {
            if a.is_empty() {
                return Ok(QuantileFunction::standard_normal());
            }
            arity(2)?;
            QuantileFunction::normal(a[0], a[1])
        }
        "t" | "student_t" | "student" => {
            arity(3)?;
            QuantileFunction::student_t(a[0], a[1], a[2])
        }
        "uniform" | "u" => {
            arity(2)?;
            QuantileFunction::uniform(a[0], a[1])
        }
        other => Err(Error::Param(format!("unknown reference {other:?}"))),
    }
}

fn parse_matrix(s: &str) -> Result<Vec<Vec<f64>>> {
    s.split(';')
        .map(|row| {
            row.split(',')
                .map(|x| x.trim().parse::<f64>().map_err(|_| Error::Param(format!("bad matrix entry {x:?}"))))
                .collect()
        })
        .collect()
}

fn parse_vector(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|_| Error::Param(format!("bad vector entry {x:?}"))))
        .collect()
}

fn parse_pair(s: &str) -> std::result::Result<[f64; 2], String> {
    match parse_vector(s).map_err(|e| e.to_string())?.as_slice() {
        &[a, b] => Ok([a, b]),
        _ => Err(format!("expected two comma-separated numbers, got {s:?}")),
    }
}

fn parse_radius(s: &str) -> std::result::Result<f64, String> {
    crate::portfolio::radius::parse(s)
}

#[derive(Debug, Parser)]
#[command(name = "robustrisk", version, about = "Worst-case distortion risk over moment and Wasserstein sets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
    /// JSON or TOML RunConfig; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// CSV output path.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// JSON output path.
    #[arg(long, global = true)]
    pub json: Option<PathBuf>,
    /// Print the JSON result on stdout (diagnostics go to stderr).
    #[arg(long, global = true)]
    pub stdout: bool,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Decimals in CSV output.
    #[arg(long, global = true)]
    pub precision: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct SetArgs {
    #[arg(long)]
    pub metric: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Squared Wasserstein radius, or `inf`.
    #[arg(long = "eps", value_parser = parse_radius)]
    pub epsilon: Option<f64>,
    /// Reference distribution; defaults to normal(mu, sigma).
    #[arg(long = "ref")]
    pub reference: Option<String>,
    #[arg(long)]
    pub xi: Option<f64>,
    /// Inflection interval `a,b`.
    #[arg(long, value_parser = parse_pair)]
    pub xi_range: Option<[f64; 2]>,
    /// CSV path for the extremal quantile.
    #[arg(long)]
    pub quantile_csv: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Worst-case value sup ρ_g over the set.
    Bound(SetArgs),
    /// Best-case value inf ρ_g over the set.
    Best(SetArgs),
    /// Projection of the weight function onto a unimodal cone.
    Project {
        #[arg(long)]
        metric: Option<String>,
        #[arg(long)]
        xi: Option<f64>,
        /// Step count for non-step weights; exact projection when omitted.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Robust portfolio optimization.
    Portfolio {
        #[arg(long)]
        metric: Option<String>,
        /// Asset means, comma separated.
        #[arg(long, allow_hyphen_values = true)]
        mu_vec: Option<String>,
        /// Covariance rows separated by ';', entries by ','.
        #[arg(long, allow_hyphen_values = true)]
        cov: Option<String>,
        #[arg(long = "eps", value_parser = parse_radius)]
        epsilon: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        bound: Option<f64>,
        #[arg(long)]
        xi: Option<f64>,
        /// Student-t generator degrees of freedom (normal when omitted).
        #[arg(long)]
        nu: Option<f64>,
    },
    /// Optimal w₁ for the two-asset experiment, with expected values and deviations.
    Table1 {
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Optimal w₁ and objective over a log-spaced radius grid.
    Frontier {
        #[arg(long)]
        eps_min: Option<f64>,
        #[arg(long)]
        eps_max: Option<f64>,
        #[arg(long)]
        points: Option<usize>,
        /// 1 or 2.
        #[arg(long)]
        covariance: Option<usize>,
        /// Metric strings; repeat the flag for several.
        #[arg(long = "metric")]
        metrics: Vec<String>,
    },
}

fn set_if<T>(slot: &mut Option<T>, v: Option<T>) {
    if v.is_some() {
        *slot = v;
    }
}

impl Cli {
    /// Merge the optional config file with the flags.
    pub fn into_config(self) -> Result<RunConfig> {
        let kind = match &self.command {
            Cmd::Bound(_) => CommandKind::Bound,
            Cmd::Best(_) => CommandKind::Best,
            Cmd::Project { .. } => CommandKind::Project,
            Cmd::Portfolio { .. } => CommandKind::Portfolio,
            Cmd::Table1 { .. } => CommandKind::Table1,
            Cmd::Frontier { .. } => CommandKind::Frontier,
        };
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::new(kind),
        };
        c.command = kind;
        set_if(&mut c.out, self.out);
        set_if(&mut c.json, self.json);
        c.stdout |= self.stdout;
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(p) = self.precision {
            c.precision = p;
        }
        match self.command {
            Cmd::Bound(a) | Cmd::Best(a) => {
                set_if(&mut c.metric, a.metric);
                set_if(&mut c.mu, a.mu);
                set_if(&mut c.sigma, a.sigma);
                set_if(&mut c.epsilon, a.epsilon);
                set_if(&mut c.reference, a.reference);
                set_if(&mut c.xi, a.xi);
                set_if(&mut c.quantile_csv, a.quantile_csv);
                set_if(&mut c.xi_range, a.xi_range);
            }
            Cmd::Project { metric, xi, steps } => {
                set_if(&mut c.metric, metric);
                set_if(&mut c.xi, xi);
                set_if(&mut c.steps, steps);
            }
            Cmd::Portfolio { metric, mu_vec, cov, epsilon, bound, xi, nu } => {
                let given = metric.is_some() || mu_vec.is_some() || cov.is_some() || epsilon.is_some();
                if c.portfolio.is_none() && !given {
                    return Err(Error::Param("portfolio needs --config or --metric/--mu-vec/--cov/--eps".into()));
                }
                let mut p = match c.portfolio.take() {
                    Some(p) => p,
                    None => PortfolioProblem {
                        mu: parse_vector(mu_vec.as_deref().ok_or_else(|| Error::Param("--mu-vec is required".into()))?)?,
                        sigma0: parse_matrix(cov.as_deref().ok_or_else(|| Error::Param("--cov is required".into()))?)?,
                        epsilon: epsilon.ok_or_else(|| Error::Param("--eps is required".into()))?,
                        metric: metric.as_deref().ok_or_else(|| Error::Param("--metric is required".into()))?.parse()?,
                        reference: JointReference::Normal,
                        bound: None,
                        xi: None,
                        seed: c.seed,
                    },
                };
                if let Some(m) = metric {
                    p.metric = m.parse()?;
                }
                if let Some(v) = mu_vec {
                    p.mu = parse_vector(&v)?;
                }
                if let Some(m) = cov {
                    p.sigma0 = parse_matrix(&m)?;
                }
                set_if(&mut p.bound, bound);
                set_if(&mut p.xi, xi);
                if let Some(e) = epsilon {
                    p.epsilon = e;
                }
                if let Some(nu) = nu {
                    p.reference = JointReference::StudentT { nu };
                }
                if let Some(s) = self.seed {
                    p.seed = s;
                }
                c.portfolio = Some(p);
            }
            Cmd::Table1 { tolerance } => set_if(&mut c.tolerance, tolerance),
            Cmd::Frontier { eps_min, eps_max, points, covariance, metrics } => {
                let mut g = c.eps_grid.unwrap_or_default();
                if let Some(v) = eps_min {
                    g.min = v;
                }
                if let Some(v) = eps_max {
                    g.max = v;
                }
                if let Some(v) = points {
                    g.points = v;
                }
                c.eps_grid = Some(g);
                set_if(&mut c.covariance, covariance);
                if !metrics.is_empty() {
                    c.metrics = Some(metrics);
                }
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// Result of a run: a JSON document and, for tabular commands, CSV rows.
#[derive(Debug, Clone)]
pub struct Output {
    pub json: serde_json::Value,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub diagnostics: Vec<String>,
}

fn fmt(x: f64, p: usize) -> String {
    if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:.p$}")
    }
}

fn bound_set(c: &RunConfig) -> Result<(MomentWassersteinSet, f64, f64)> {
    let mu = c.mu.ok_or_else(|| Error::Param("--mu is required".into()))?;
    let sigma = c.sigma.ok_or_else(|| Error::Param("--sigma is required".into()))?;
    let eps = c.epsilon.ok_or_else(|| Error::Param("--eps is required".into()))?;
    let reference = match &c.reference {
        Some(r) => parse_reference(r)?,
        None => QuantileFunction::normal(mu, sigma)?,
    };
    Ok((MomentWassersteinSet::new(mu, sigma, eps, reference)?, mu, sigma))
}

fn run_bound(c: &RunConfig, best: bool) -> Result<Output> {
    let spec = c.metric_spec()?;
    let g = make_distortion(&spec)?;
    let (set, mu, sigma) = bound_set(c)?;
    let finite = set.epsilon.is_finite();
    let mut r: BoundResult = match (c.xi, c.xi_range) {
        (_, Some([a, b])) => {
            let g = if best { g.negate() } else { g.clone() };
            let mut r = worst_case_interval_inflection(&g, mu, sigma, a, b, finite.then_some(&set))?;
            if best {
                r.value = -r.value;
            }
            r
        }
        (Some(xi), None) => {
            let g = if best { g.negate() } else { g.clone() };
            let mut r = if finite {
                worst_case_unimodal_wasserstein(&g, &set, xi)?
            } else {
                worst_case_unimodal(&g, mu, sigma, xi)?
            };
            if best {
                r.value = -r.value;
            }
            r
        }
        (None, None) => {
            if best {
                best_case(&g, &set)?
            } else {
                worst_case(&g, &set)?
            }
        }
    };
    if let Some(path) = &c.quantile_csv {
        match &r.extremal_quantile {
            Some(q) => {
                let grid = clustered_grid(QUANTILE_POINTS, 3.0);
                q.write_csv(path, &grid[1..grid.len() - 1])?;
                r.quantile_csv_path = Some(path.display().to_string());
            }
            None => r.diagnostics.push(format!("bound not attained; {} not written", path.display())),
        }
    }
    let p = c.precision;
    let json = json!({
        "command": if best { "best" } else { "bound" },
        "metric": spec.to_string(),
        "mu": mu,
        "sigma": sigma,
        "epsilon": if set.epsilon.is_finite() { json!(set.epsilon) } else { json!("inf") },
        "result": serde_json::to_value(&r).map_err(|e| Error::Numeric(e.to_string()))?,
    });
    Ok(Output {
        json,
        header: ["metric", "mu", "sigma", "epsilon", "value", "lambda", "regime", "attained"].map(String::from).to_vec(),
        rows: vec![vec![
            spec.to_string(),
            fmt(mu, p),
            fmt(sigma, p),
            fmt(set.epsilon, p),
            fmt(r.value, p),
            r.lambda.map(|l| fmt(l, p)).unwrap_or_default(),
            r.regime.to_string(),
            r.attained.to_string(),
        ]],
        diagnostics: r.diagnostics.clone(),
    })
}

fn run_project(c: &RunConfig) -> Result<Output> {
    let spec = c.metric_spec()?;
    let gamma = make_distortion(&spec)?.weight()?;
    let xi = c.xi.ok_or_else(|| Error::Param("--xi is required".into()))?;
    let proj = match c.steps {
        Some(n) => project(&gamma, xi, n)?,
        None => project_weight(&gamma, xi)?,
    };
    let p = c.precision;
    let rows = proj
        .nodes
        .iter()
        .zip(&proj.values)
        .map(|(&u, &v)| vec![fmt(u, p), fmt(gamma.value(u), p), fmt(v, p)])
        .collect();
    let json = json!({
        "command": "project",
        "metric": spec.to_string(),
        "projection": serde_json::to_value(&proj).map_err(|e| Error::Numeric(e.to_string()))?,
    });
    Ok(Output { json, header: vec!["u".into(), "gamma".into(), "projected".into()], rows, diagnostics: vec![] })
}

fn run_portfolio(c: &RunConfig) -> Result<Output> {
    let problem = c.portfolio.as_ref().ok_or_else(|| Error::Param("portfolio problem missing".into()))?;
    let r = if problem.xi.is_some() { optimize_unimodal(problem)? } else { optimize(problem)? };
    let p = c.precision;
    let mut header: Vec<String> = (1..=r.weights.len()).map(|i| format!("w{i}")).collect();
    header.extend(["objective", "lambda_w"].map(String::from));
    let mut row: Vec<String> = r.weights.iter().map(|w| fmt(*w, p)).collect();
    row.push(fmt(r.objective, p));
    row.push(fmt(r.lambda_w, p));
    let json = json!({
        "command": "portfolio",
        "problem": serde_json::to_value(problem).map_err(|e| Error::Numeric(e.to_string()))?,
        "result": serde_json::to_value(&r).map_err(|e| Error::Numeric(e.to_string()))?,
    });
    Ok(Output { json, header, rows: vec![row], diagnostics: r.diagnostics.clone() })
}

/// One cell of the two-asset experiment.
#[derive(Debug, Clone, Serialize)]
pub struct Table1Cell {
    pub covariance: usize,
    pub epsilon: f64,
    pub metric: String,
    pub w1: f64,
    pub expected_w1: f64,
    pub abs_dev: f64,
    pub objective: f64,
    pub seconds: f64,
}

/// Optimal w₁ for every (covariance, radius, metric) cell, in table order.
pub fn table1(seed: u64) -> Result<Vec<Table1Cell>> {
    let (mu, covs) = table1_setup();
    let metrics = table1_metrics();
    let mut cells = Vec::new();
    for k in 0..2 {
        for j in 0..TABLE1_RADII.len() {
            for i in 0..metrics.len() {
                cells.push((k, j, i));
            }
        }
    }
    cells
        .par_iter()
        .map(|&(k, j, i)| {
            let t = std::time::Instant::now();
            let mut p = PortfolioProblem::new(mu.clone(), covs[k].clone(), TABLE1_RADII[j], metrics[i].clone())?;
            p.seed = seed;
            let r = optimize(&p)?;
            let expected = TABLE1_REFERENCE[k][j][i];
            Ok(Table1Cell {
                covariance: k + 1,
                epsilon: TABLE1_RADII[j],
                metric: metrics[i].to_string(),
                w1: r.weights[0],
                expected_w1: expected,
                abs_dev: (r.weights[0] - expected).abs(),
                objective: r.objective,
                seconds: t.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

fn run_table1(c: &RunConfig) -> Result<Output> {
    let cells = table1(c.seed)?;
    let p = c.precision;
    let mut header: Vec<String> =
        ["covariance", "epsilon", "metric", "w1", "expected_w1", "abs_dev", "objective"].map(String::from).to_vec();
    if c.tolerance.is_some() {
        header.push("within_tolerance".into());
    }
    let rows = cells
        .iter()
        .map(|cell| {
            let mut r = vec![
                cell.covariance.to_string(),
                format!("{}", cell.epsilon),
                cell.metric.clone(),
                fmt(cell.w1, p),
                fmt(cell.expected_w1, p),
                format!("{:.3e}", cell.abs_dev),
                fmt(cell.objective, p),
            ];
            if let Some(t) = c.tolerance {
                r.push((cell.abs_dev <= t).to_string());
            }
            r
        })
        .collect();
    let json = json!({ "command": "table1", "cells": serde_json::to_value(&cells).map_err(|e| Error::Numeric(e.to_string()))? });
    Ok(Output { json, header, rows, diagnostics: vec![] })
}

#[derive(Debug, Clone, Serialize)]
pub struct FrontierRow {
    pub metric: String,
    pub epsilon: f64,
    pub w1: f64,
    pub objective: f64,
}

/// Optimal two-asset w₁ over a radius grid for each metric.
pub fn frontier(metrics: &[MetricSpec], grid: &EpsGrid, covariance: usize, seed: u64) -> Result<Vec<FrontierRow>> {
    let (mu, covs) = table1_setup();
    let cov = covs
        .get(covariance.wrapping_sub(1))
        .ok_or_else(|| Error::Param(format!("covariance index must be 1 or 2, got {covariance}")))?;
    let eps = grid.values();
    let cells: Vec<(usize, usize)> = (0..metrics.len()).flat_map(|i| (0..eps.len()).map(move |j| (i, j))).collect();
    cells
        .par_iter()
        .map(|&(i, j)| {
            let mut p = PortfolioProblem::new(mu.clone(), cov.clone(), eps[j], metrics[i].clone())?;
            p.seed = seed;
            let r = optimize(&p)?;
            Ok(FrontierRow { metric: metrics[i].to_string(), epsilon: eps[j], w1: r.weights[0], objective: r.objective })
        })
        .collect()
}

fn run_frontier(c: &RunConfig) -> Result<Output> {
    let metrics: Vec<MetricSpec> = match &c.metrics {
        Some(ms) => ms.iter().map(|m| m.parse()).collect::<Result<_>>()?,
        None => table1_metrics(),
    };
    let grid = c.eps_grid.unwrap_or_default();
    let rows_data = frontier(&metrics, &grid, c.covariance.unwrap_or(1), c.seed)?;
    let p = c.precision;
    let rows = rows_data
        .iter()
        .map(|r| vec![r.metric.clone(), format!("{:e}", r.epsilon), fmt(r.w1, p), fmt(r.objective, p)])
        .collect();
    let json = json!({ "command": "frontier", "rows": serde_json::to_value(&rows_data).map_err(|e| Error::Numeric(e.to_string()))? });
    Ok(Output { json, header: ["metric", "epsilon", "w1", "objective"].map(String::from).to_vec(), rows, diagnostics: vec![] })
}

pub fn execute(c: &RunConfig) -> Result<Output> {
    c.validate()?;
    match c.command {
        CommandKind::Bound => run_bound(c, false),
        CommandKind::Best => run_bound(c, true),
        CommandKind::Project => run_project(c),
        CommandKind::Portfolio => run_portfolio(c),
        CommandKind::Table1 => run_table1(c),
        CommandKind::Frontier => run_frontier(c),
    }
}

pub fn write_outputs(c: &RunConfig, out: &Output) -> Result<()> {
    let io = |e: std::io::Error| Error::Numeric(e.to_string());
    if let Some(path) = &c.out {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Numeric(e.to_string()))?;
        w.write_record(&out.header).map_err(|e| Error::Numeric(e.to_string()))?;
        for r in &out.rows {
            w.write_record(r).map_err(|e| Error::Numeric(e.to_string()))?;
        }
        w.flush().map_err(io)?;
    }
    let text = serde_json::to_string_pretty(&out.json).map_err(|e| Error::Numeric(e.to_string()))?;
    if let Some(path) = &c.json {
        std::fs::write(path, &text).map_err(io)?;
    }
    if c.stdout || (c.out.is_none() && c.json.is_none()) {
        println!("{text}");
    }
    Ok(())
}

/// Caps the global worker pool from `ROBUSTRISK_THREADS`.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("ROBUSTRISK_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::Param(format!("ROBUSTRISK_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(Error::Param("ROBUSTRISK_THREADS must be at least 1".into()));
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Parse, run and report; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let run = || -> Result<()> {
        init_threads()?;
        let cfg = cli.into_config()?;
        let out = execute(&cfg)?;
        for d in &out.diagnostics {
            eprintln!("note: {d}");
        }
        write_outputs(&cfg, &out)
    };
    match run() {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
