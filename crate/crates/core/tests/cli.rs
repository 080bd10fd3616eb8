use robustrisk::cli::{CommandKind, EpsGrid, RunConfig};
use robustrisk::distortion::MetricSpec;
use robustrisk::portfolio::{JointReference, PortfolioProblem};
use std::process::Command;

fn run(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_robustrisk")).args(args).output().unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8(out.stdout).unwrap(),
        String::from_utf8(out.stderr).unwrap(),
    )
}

#[test]
fn bound_prints_json_on_stdout() {
    let (code, out, _) = run(&["bound", "--metric", "es(0.95)", "--mu", "0", "--sigma", "1", "--eps", "inf", "--stdout"]);
    assert_eq!(code, 0);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    let value = v["result"]["value"].as_f64().unwrap();
    assert!((value - 19f64.sqrt()).abs() < 1e-8);
    assert_eq!(v["epsilon"], "inf");
}

#[test]
fn var_bound_is_not_attained() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("b.csv");
    let (code, _, _) = run(&["bound", "--metric", "var(0.975)", "--mu", "0", "--sigma", "1", "--eps", "0.1", "--out", csv.to_str().unwrap()]);
    assert_eq!(code, 0);
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("metric,mu,sigma,epsilon,value"));
    assert!(lines.next().unwrap().ends_with(",false"));
}

#[test]
fn best_is_below_bound_and_quantile_csv_written() {
    let dir = tempfile::tempdir().unwrap();
    let q = dir.path().join("q.csv");
    let args = ["--metric", "es(0.9)", "--mu", "0.5", "--sigma", "1.2", "--eps", "0.6", "--ref", "t(5,0,1)", "--stdout"];
    let (c1, hi, _) = run(&[&["bound", "--quantile-csv", q.to_str().unwrap()][..], &args[..]].concat());
    let (c2, lo, _) = run(&[&["best"][..], &args[..]].concat());
    assert_eq!((c1, c2), (0, 0));
    let hi: serde_json::Value = serde_json::from_str(&hi).unwrap();
    let lo: serde_json::Value = serde_json::from_str(&lo).unwrap();
    assert!(lo["result"]["value"].as_f64().unwrap() < hi["result"]["value"].as_f64().unwrap());
    let rows = std::fs::read_to_string(&q).unwrap().lines().count();
    assert!(rows > 100);
}

#[test]
fn exit_codes() {
    let (code, _, err) = run(&["bound", "--metric", "gd", "--mu", "0", "--sigma", "1", "--eps", "0.1", "--ref", "normal(3,1)"]);
    assert_eq!(code, 2);
    assert!(err.contains("9"), "{err}");
    assert_eq!(run(&["bound", "--metric", "gd", "--mu", "0"]).0, 64);
    assert_eq!(run(&["bound", "--metric", "nope", "--mu", "0", "--sigma", "1", "--eps", "1"]).0, 64);
    assert_eq!(run(&["nope"]).0, 64);
    let (code, _, err) = run(&["portfolio", "--metric", "gd", "--mu-vec=-2,-1", "--cov", "4,0.5;0.5,1", "--eps", "0.01", "--bound=-5"]);
    assert_eq!(code, 2);
    assert!(err.contains("-2"), "{err}");
}

#[test]
fn project_writes_triples() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("p.csv");
    let (code, _, _) = run(&["project", "--metric", "mmd", "--xi", "0.5", "--out", csv.to_str().unwrap()]);
    assert_eq!(code, 0);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("u,gamma,projected\n"));
    for line in text.lines().skip(1) {
        let f: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert!((f[2] - 3.0 * (f[0] - 0.5)).abs() < 1e-5, "{line}");
    }
}

#[test]
fn portfolio_from_toml_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    let json = dir.path().join("out.json");
    let mut c = RunConfig::new(CommandKind::Portfolio);
    c.portfolio = Some(PortfolioProblem::new(vec![-2.0, -1.0], vec![vec![4.0, 0.5], vec![0.5, 1.0]], 1.0, MetricSpec::Gd).unwrap());
    std::fs::write(&cfg, c.to_toml().unwrap()).unwrap();
    let (code, _, _) = run(&["portfolio", "--config", cfg.to_str().unwrap(), "--json", json.to_str().unwrap()]);
    assert_eq!(code, 0);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    let w1 = v["result"]["weights"][0].as_f64().unwrap();
    assert!((w1 - 0.125).abs() < 1e-6, "{w1}");
}

#[test]
fn frontier_rows_in_grid_order() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("f.csv");
    let (code, _, _) = run(&[
        "frontier", "--metric", "gd", "--metric", "es(0.95)", "--points", "4", "--eps-min", "1e-4", "--eps-max", "1",
        "--out", csv.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let text = std::fs::read_to_string(&csv).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 8);
    assert!(rows[..4].iter().all(|r| r[0] == "gd") && rows[4..].iter().all(|r| r[0] == "es(alpha=0.95)"));
    let eps: Vec<f64> = rows[..4].iter().map(|r| r[1].parse().unwrap()).collect();
    assert!((eps[0] - 1e-4).abs() < 1e-16 && (eps[3] - 1.0).abs() < 1e-12 && eps.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn thread_cap_is_validated() {
    let out = Command::new(env!("CARGO_BIN_EXE_robustrisk"))
        .args(["bound", "--metric", "gd", "--mu", "0", "--sigma", "1", "--eps", "1"])
        .env("ROBUSTRISK_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(64));
}

fn sample_configs() -> Vec<RunConfig> {
    let mut a = RunConfig::new(CommandKind::Bound);
    a.metric = Some("gluevar(0.975,0.95,1/3,2/3)".into());
    a.mu = Some(0.1);
    a.sigma = Some(1.3);
    a.epsilon = Some(f64::INFINITY);
    a.xi = Some(0.4);
    a.reference = Some("t(5,0,1)".into());
    let mut b = RunConfig::new(CommandKind::Portfolio);
    let mut p = PortfolioProblem::new(vec![-2.0, -1.0], vec![vec![4.0, 0.5], vec![0.5, 1.0]], 0.01, MetricSpec::Es(0.95)).unwrap();
    p.reference = JointReference::StudentT { nu: 5.0 };
    p.bound = Some(-1.5);
    b.portfolio = Some(p);
    b.seed = 17;
    b.precision = 8;
    let mut c = RunConfig::new(CommandKind::Frontier);
    c.eps_grid = Some(EpsGrid { min: 1e-5, max: 2.0, points: 11 });
    c.metrics = Some(vec!["var(0.975)".into(), "gd".into()]);
    c.covariance = Some(2);
    c.stdout = true;
    vec![a, b, c, RunConfig::new(CommandKind::Table1)]
}

#[test]
fn run_config_round_trips() {
    for c in sample_configs() {
        let j: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(j, c);
        let t: RunConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(t, c);
    }
}
