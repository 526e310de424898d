use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn sepsurf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sepsurf")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = sepsurf(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn rows_per_surface(csv: &Path) -> Vec<usize> {
    let text = fs::read_to_string(csv).unwrap();
    let mut counts = Vec::new();
    for line in text.lines().skip(1) {
        let id: usize = line.split(',').next().unwrap().parse().unwrap();
        if counts.len() <= id {
            counts.resize(id + 1, 0);
        }
        counts[id] += 1;
    }
    counts
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn simulate(dir: &TempDir, extra: &[&str]) -> PathBuf {
    let out = p(dir, "sim.csv");
    let mut args = vec!["simulate", "--out", s(&out)];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

#[test]
fn simulate_counts_observations() {
    let dir = TempDir::new().unwrap();
    let out = simulate(&dir, &["--scenario", "brownian", "--grid", "20", "--n", "100", "--p", "0.1", "--seed", "1"]);
    let counts = rows_per_surface(&out);
    assert_eq!(counts.len(), 100);
    assert!(counts.iter().all(|&c| c == 40));
    let truth = json(&p(&dir, "sim.truth.json"));
    assert_eq!(truth["covariance"]["kind"], "separable");
    assert_eq!(truth["run"]["config"]["seed"], 1);

    let out = simulate(&dir, &["--scenario", "gneiting", "--grid", "20", "--n", "10", "--p", "0.02"]);
    assert!(rows_per_surface(&out).iter().all(|&c| c == 8));
}

#[test]
fn invalid_scenario_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = sepsurf(&["simulate", "--scenario", "wiener", "--out", s(&p(&dir, "x.csv"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = sepsurf(&["simulate", "--scenario", "brownian", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_errors_exit_with_three() {
    let dir = TempDir::new().unwrap();
    let out = sepsurf(&["estimate", "--input", s(&p(&dir, "missing.csv")), "--out", s(&p(&dir, "m.json"))]);
    assert_eq!(out.status.code(), Some(3));
    let bad = p(&dir, "bad.csv");
    fs::write(&bad, "surface_id,t,s,y\n0,0.5,1.5,1.0\n").unwrap();
    let out = sepsurf(&["estimate", "--input", s(&bad), "--out", s(&p(&dir, "m.json"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn rerun_from_embedded_config_is_identical() {
    let dir = TempDir::new().unwrap();
    let first = simulate(&dir, &["--scenario", "fourier", "--grid", "8", "--n", "20", "--p", "0.3", "--seed", "9"]);
    let again = p(&dir, "again.csv");
    let sidecar = p(&dir, "sim.csv.run.json");
    ok(&["simulate", "--config", s(&sidecar), "--out", s(&again), "--truth", s(&p(&dir, "again.truth.json"))]);
    assert_eq!(fs::read(&first).unwrap(), fs::read(&again).unwrap());

    // flags win over the config
    let other = p(&dir, "other.csv");
    ok(&["simulate", "--config", s(&sidecar), "--seed", "10", "--out", s(&other), "--truth", s(&p(&dir, "o.json"))]);
    assert_ne!(fs::read(&first).unwrap(), fs::read(&other).unwrap());
    assert_eq!(json(&p(&dir, "other.csv.run.json"))["run"]["config"]["seed"], 10);
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = TempDir::new().unwrap();
    let data = simulate(&dir, &["--scenario", "brownian", "--grid", "10", "--n", "40", "--p", "0.3", "--seed", "2"]);
    let (m1, m2) = (p(&dir, "m1.json"), p(&dir, "m2.json"));
    ok(&["estimate", "--input", s(&data), "--grid", "10", "--bandwidth", "0.2", "--threads", "1", "--out", s(&m1)]);
    let out = Command::new(env!("CARGO_BIN_EXE_sepsurf"))
        .args(["estimate", "--input", s(&data), "--grid", "10", "--bandwidth", "0.2", "--out", s(&m2)])
        .env("SEPSURF_THREADS", "3")
        .output()
        .unwrap();
    assert!(out.status.success());
    let (mut m1, mut m2) = (json(&m1), json(&m2));
    assert_eq!(m1["run"]["config"]["out"], s(&p(&dir, "m1.json")));
    m1["run"]["config"]["out"] = Value::Null;
    m2["run"]["config"]["out"] = Value::Null;
    assert_eq!(m1, m2);
}

#[test]
fn estimate_one_step_and_cv() {
    let dir = TempDir::new().unwrap();
    let data = simulate(&dir, &["--scenario", "brownian", "--grid", "10", "--n", "100", "--p", "0.4", "--seed", "3"]);
    let (one, two) = (p(&dir, "one.json"), p(&dir, "two.json"));
    ok(&["estimate", "--input", s(&data), "--grid", "10", "--bandwidth", "0.2", "--steps", "1", "--out", s(&one)]);
    ok(&["estimate", "--input", s(&data), "--grid", "10", "--bandwidth", "0.2", "--out", s(&two)]);
    let (one, two) = (json(&one), json(&two));
    assert_eq!(one["meta"]["steps"], 1);
    assert_eq!(one["run"]["config"]["steps"], 1);
    assert_ne!(one["A"], two["A"]);

    let cv = p(&dir, "cv.json");
    let started = std::time::Instant::now();
    ok(&["estimate", "--input", s(&data), "--grid", "10", "--out", s(&cv)]);
    assert!(started.elapsed().as_secs() < 60);
    let cv = json(&cv);
    assert!(cv["cv"]["mean"]["chosen"].is_object());
    assert_eq!(cv["bandwidths_used"].as_array().unwrap().len(), 8);
}

#[test]
fn four_d_on_a_large_grid_warns() {
    let dir = TempDir::new().unwrap();
    let data = simulate(&dir, &["--scenario", "brownian", "--grid", "20", "--n", "5", "--p", "0.1", "--seed", "4"]);
    let model = p(&dir, "m4.json");
    let out = Command::new(env!("CARGO_BIN_EXE_sepsurf"))
        .args(["estimate", "--input", s(&data), "--grid", "20", "--method", "4d", "--bandwidth", "0.5", "--out", s(&model)])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("4D smoothing"));
    assert_eq!(json(&model)["kind"], "full");
}

#[test]
fn predict_interpolates_without_noise() {
    let dir = TempDir::new().unwrap();
    let data = simulate(&dir, &["--scenario", "fourier", "--grid", "10", "--n", "100", "--p", "0.3", "--seed", "5"]);
    let model = p(&dir, "m.json");
    ok(&["estimate", "--input", s(&data), "--grid", "10", "--bandwidth", "0.2", "--psd-project", "--out", s(&model)]);
    let mut m = json(&model);
    m["sigma2"] = 0.0.into();
    fs::write(&model, serde_json::to_string(&m).unwrap()).unwrap();

    let pred = p(&dir, "pred.json");
    ok(&[
        "predict",
        "--model",
        s(&model),
        "--input",
        s(&data),
        "--surface",
        "7",
        "--ridge",
        "1e-12",
        "--alpha",
        "0.05",
        "--draws",
        "2000",
        "--out",
        s(&pred),
    ]);
    let r = json(&pred);
    assert!((r["u_quantile"].as_f64().unwrap() - 1.95996).abs() < 1e-5);
    assert_eq!(r["band_ordering"]["simultaneous_wider"], true);
    let d2 = 10;
    let predicted = r["predicted"].as_array().unwrap();
    let text = fs::read_to_string(&data).unwrap();
    let mut checked = 0;
    for line in text.lines().skip(1) {
        let f: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        if f[0] as usize != 7 {
            continue;
        }
        let (i, j) = ((f[1] * 10.0) as usize, (f[2] * 10.0) as usize);
        let v = predicted[i * d2 + j].as_f64().unwrap();
        assert!((v - f[3]).abs() < 1e-6, "cell ({i},{j}): {v} vs {}", f[3]);
        checked += 1;
    }
    assert_eq!(checked, 30);

    let out = sepsurf(&["predict", "--model", s(&model), "--input", s(&data), "--out", s(&pred)]);
    assert_eq!(out.status.code(), Some(2), "several surfaces need --surface");
}

#[test]
fn singular_prediction_exits_with_four() {
    let dir = TempDir::new().unwrap();
    let data = simulate(&dir, &["--scenario", "brownian", "--grid", "4", "--n", "20", "--p", "0.5", "--seed", "6"]);
    let model = p(&dir, "m.json");
    ok(&["estimate", "--input", s(&data), "--grid", "4", "--bandwidth", "0.4", "--out", s(&model)]);
    let mut m = json(&model);
    let g = m["A"].as_array().unwrap().len();
    m["A"] = Value::Array(vec![0.0.into(); g]);
    m["sigma2"] = 0.0.into();
    fs::write(&model, serde_json::to_string(&m).unwrap()).unwrap();
    let out =
        sepsurf(&["predict", "--model", s(&model), "--input", s(&data), "--surface", "0", "--ridge", "0", "--out", s(&p(&dir, "x.json"))]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ridge"));
}

#[test]
fn evaluate_reports_unit_benchmark_ratios() {
    let dir = TempDir::new().unwrap();
    let data = simulate(&dir, &["--scenario", "brownian", "--grid", "10", "--n", "30", "--p", "0.3", "--seed", "7"]);
    let out = p(&dir, "ev.csv");
    ok(&[
        "evaluate",
        "--input",
        s(&data),
        "--grid",
        "10",
        "--pattern",
        "chain",
        "--folds",
        "10",
        "--bandwidth",
        "0.2",
        "--methods",
        "presmooth,separable,oracle",
        "--truth",
        s(&p(&dir, "sim.truth.json")),
        "--out",
        s(&out),
    ]);
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().next().unwrap(), "pattern,fold,surface_id,method,rmse_ratio");
    let pre: Vec<&str> = text.lines().filter(|l| l.contains(",presmooth,")).collect();
    assert!(!pre.is_empty());
    assert!(pre.iter().all(|l| l.ends_with(",1.0")));
    let side = json(&p(&dir, "ev.csv.run.json"));
    assert_eq!(side["run"]["config"]["folds"], 10);

    let out = sepsurf(&[
        "evaluate",
        "--input",
        s(&data),
        "--grid",
        "10",
        "--pattern",
        "chain",
        "--bandwidth",
        "0.2",
        "--methods",
        "oracle",
        "--out",
        s(&p(&dir, "x.csv")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn benchmark_shape_and_determinism() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (p(&dir, "a.csv"), p(&dir, "b.csv"));
    let args = |out: &Path| {
        vec![
            "benchmark".to_string(),
            "--scenario".into(),
            "fourier".into(),
            "--grid".into(),
            "8".into(),
            "--n".into(),
            "30".into(),
            "--p".into(),
            "2,5,10".into(),
            "--replicates".into(),
            "2".into(),
            "--seed".into(),
            "4".into(),
            "--out".into(),
            out.to_str().unwrap().into(),
        ]
    };
    let run = |out: &Path| {
        let a = args(out);
        ok(&a.iter().map(String::as_str).collect::<Vec<_>>());
    };
    run(&a);
    run(&b);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().next().unwrap(), "scenario,p,n,method,replicate,rel_error");
    // 3 fractions x 3 methods (one_step, separable, bsa) x 2 replicates
    assert_eq!(text.lines().count() - 1, 18);
}

#[test]
fn ingest_options_converts_quotes() {
    use sepsurf::data::bs_call_price;
    let dir = TempDir::new().unwrap();
    let quotes = p(&dir, "q.csv");
    let mut text = String::from("surface_id,spot,strike,tau_days,rate,price\n");
    let sigma = 0.25;
    for (id, k, days) in [(0, 100.0, 60.0), (0, 110.0, 120.0), (1, 95.0, 200.0), (1, 105.0, 30.0)] {
        let price = bs_call_price(100.0, k, days / 365.0, 0.01, sigma).unwrap();
        text += &format!("{id},100,{k},{days},0.01,{price}\n");
    }
    text += "1,100,300,60,0.01,1.0\n"; // outside the moneyness range
    text += "1,100,100,60,0.01,150.0\n"; // above the spot: no implied volatility
    fs::write(&quotes, text).unwrap();
    let out = p(&dir, "iv.csv");
    ok(&["ingest-options", "--input", s(&quotes), "--out", s(&out)]);
    let rows: Vec<Vec<f64>> =
        fs::read_to_string(&out).unwrap().lines().skip(1).map(|l| l.split(',').map(|x| x.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| (r[3] - sigma.ln()).abs() < 1e-8));
    let report = json(&p(&dir, "iv.csv.run.json"))["report"].clone();
    assert_eq!(report["outside_domain"], 1);
    assert_eq!(report["outside_bracket"], 1);
}
