use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn vffgp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vffgp")).args(args).output().expect("spawn vffgp")
}

fn ok(args: &[&str]) -> Output {
    let o = vffgp(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn path(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn read_csv(p: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut r = csv::Reader::from_path(p).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(|v| v.parse().unwrap()).collect()).collect();
    (header, rows)
}

fn generate(dir: &TempDir, name: &str, extra: &[&str]) -> PathBuf {
    let out = path(dir, name);
    let mut args = vec!["generate", "--seed", "3", "--out", s(&out)];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

fn validate(result: &Value) {
    let schema_text = fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/result.schema.json")).unwrap();
    let schema: Value = serde_json::from_str(&schema_text).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(result).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "schema violations: {errors:?}");
}

#[test]
fn generate_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let a = generate(&dir, "a.csv", &["--set", "n=50"]);
    let b = generate(&dir, "b.csv", &["--set", "n=50"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let meta = read_json(&dir.path().join("a.csv.meta.json"));
    assert_eq!(meta["sampler"], "dense");
    assert_eq!(meta["n"], 50);
}

#[test]
fn generate_marginal_variance() {
    let dir = TempDir::new().unwrap();
    let out = generate(&dir, "d.csv", &["--set", "n=1000", "--set", "variance=1", "--set", "lengthscale=0.2", "--set", "noise=0.05"]);
    let (header, rows) = read_csv(&out);
    assert_eq!(header, ["x1", "y"]);
    assert_eq!(rows.len(), 1000);
    assert!(rows.iter().all(|r| (0.0..=20.0).contains(&r[0])));
    let n = rows.len() as f64;
    let mean = rows.iter().map(|r| r[1]).sum::<f64>() / n;
    let var = rows.iter().map(|r| (r[1] - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((0.7..=1.4).contains(&var), "sample variance {var}");
}

#[test]
fn generate_empty_writes_header_only() {
    let dir = TempDir::new().unwrap();
    let out = generate(&dir, "e.csv", &["--set", "n=0"]);
    assert_eq!(fs::read_to_string(out).unwrap().trim(), "x1,y");
}

#[test]
fn generate_needs_seed() {
    let dir = TempDir::new().unwrap();
    let o = vffgp(&["generate", "--out", s(&path(&dir, "x.csv"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn fit_is_deterministic_apart_from_timing() {
    let dir = TempDir::new().unwrap();
    let data = generate(&dir, "d.csv", &["--set", "n=80", "--set", "domain=0,5"]);
    let run = |name: &str| {
        let out = path(&dir, name);
        ok(&["fit", "--data", s(&data), "--M", "30", "--seed", "1", "--out", s(&out)]);
        let mut v = read_json(&out);
        v.as_object_mut().unwrap().remove("wall_time_seconds");
        v
    };
    assert_eq!(run("a.json"), run("b.json"));
}

#[test]
fn conjugate_fit_is_bounded_by_oracle_and_matches_schema() {
    let dir = TempDir::new().unwrap();
    let data = generate(&dir, "d.csv", &["--set", "n=200", "--set", "domain=0,5"]);
    let out = path(&dir, "fit.json");
    ok(&["fit", "--data", s(&data), "--M", "200", "--with-oracle", "--seed", "1", "--out", s(&out)]);
    let v = read_json(&out);
    validate(&v);
    let elbo = v["elbo"].as_f64().unwrap();
    let oracle = v["oracle_log_marginal"].as_f64().unwrap();
    assert!(elbo <= oracle + 1e-8, "elbo {elbo} above oracle {oracle}");
    assert_eq!(v["M"], serde_json::json!([200]));
    assert_eq!(v["n"], 200);
}

#[test]
fn malformed_csv_is_rejected() {
    let dir = TempDir::new().unwrap();
    let data = path(&dir, "bad.csv");
    fs::write(&data, "x1,y\n0.1,0.2\n0.3,abc\n").unwrap();
    let o = vffgp(&["fit", "--data", s(&data), "--out", s(&path(&dir, "f.json"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
}

#[test]
fn nonconvergence_writes_partial_result() {
    let dir = TempDir::new().unwrap();
    let data = generate(&dir, "d.csv", &["--set", "n=60", "--set", "domain=0,5"]);
    let out = path(&dir, "fit.json");
    let o = vffgp(&["fit", "--data", s(&data), "--set", "max_iter=1", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let v = read_json(&out);
    validate(&v);
    assert_eq!(v["converged"], false);
}

#[test]
fn kronsum_classification_elbo_increases_with_m() {
    let dir = TempDir::new().unwrap();
    let data = generate(&dir, "moons.csv", &["--set", "generator=moons", "--set", "n=100", "--set", "noise=0.01"]);
    let elbo: Vec<f64> = [2, 4, 6, 8]
        .iter()
        .map(|m| {
            let out = path(&dir, &format!("m{m}.json"));
            let ms = m.to_string();
            ok(&[
                "fit", "--data", s(&data), "--M", &ms, "--order", "5/2", "--bounds", "-2,3;-1.5,2", "--set", "kind=vgauss", "--set", "structure=product",
                "--set", "likelihood=bernoulli", "--set", "covariance=kronsum", "--set", "optimize=false", "--set", "variance=4", "--set", "lengthscale=0.7", "--set", "max_iter=5000",
                "--out", s(&out),
            ]);
            let v = read_json(&out);
            validate(&v);
            v["elbo"].as_f64().unwrap()
        })
        .collect();
    assert!(elbo.windows(2).all(|w| w[1] > w[0]), "{elbo:?}");
}

fn fitted_model(dir: &TempDir) -> (PathBuf, PathBuf, Value) {
    let data = generate(dir, "d.csv", &["--set", "n=100", "--set", "domain=0,1", "--set", "noise=1e-4"]);
    let out = path(dir, "fit.json");
    let model = path(dir, "model.json");
    ok(&["fit", "--data", s(&data), "--M", "100", "--set", "noise=1e-3", "--seed", "1", "--out", s(&out), "--save-model", s(&model)]);
    (data, model, read_json(&out))
}

#[test]
fn predict_interpolates_and_reverts_to_prior() {
    let dir = TempDir::new().unwrap();
    let (data, model, fit) = fitted_model(&dir);
    let pred = path(&dir, "p.csv");
    ok(&["predict", "--model", s(&model), "--xstar", s(&data), "--out", s(&pred)]);
    let (header, rows) = read_csv(&pred);
    assert_eq!(header, ["mean", "var"]);
    let (_, train) = read_csv(&data);
    let sd = 1e-4f64.sqrt();
    let worst = rows.iter().zip(&train).map(|(p, t)| (p[0] - t[1]).abs()).fold(0.0, f64::max);
    assert!(worst < 3.0 * sd, "max residual {worst}");

    let far = path(&dir, "far.csv");
    fs::write(&far, "x1\n1000\n-1000\n").unwrap();
    ok(&["predict", "--model", s(&model), "--xstar", s(&far), "--out", s(&pred)]);
    let variance = fit["hyperparameters"]["variance"].as_f64().unwrap();
    let (_, rows) = read_csv(&pred);
    for r in rows {
        assert!((r[1] - variance).abs() < 1e-2, "far variance {} vs {variance}", r[1]);
        assert!(r[0].abs() < 1e-8);
    }
}

#[test]
fn predict_edge_cases() {
    let dir = TempDir::new().unwrap();
    let (_, model, _) = fitted_model(&dir);
    let pred = path(&dir, "p.csv");

    let empty = path(&dir, "empty.csv");
    fs::write(&empty, "x1\n").unwrap();
    ok(&["predict", "--model", s(&model), "--xstar", s(&empty), "--out", s(&pred)]);
    assert_eq!(fs::read_to_string(&pred).unwrap().trim(), "mean,var");

    let wide = path(&dir, "wide.csv");
    fs::write(&wide, "x1,x2\n0.5,0.5\n").unwrap();
    let o = vffgp(&["predict", "--model", s(&model), "--xstar", s(&wide), "--out", s(&pred)]);
    assert_eq!(o.status.code(), Some(1));

    let o = vffgp(&["predict", "--model", s(&wide), "--xstar", s(&empty), "--out", s(&pred)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unknown_experiment_lists_names() {
    let dir = TempDir::new().unwrap();
    let o = vffgp(&["experiment", "nope", "--seed", "1", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("interval_sweep") && err.contains("banana"), "{err}");
}

#[test]
fn interval_sweep_adequate_row_wins() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("sweep");
    ok(&["experiment", "interval_sweep", "--seed", "1", "--out", s(&out)]);
    let mut r = csv::Reader::from_path(out.join("elbo.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 12);
    let summary = read_json(&out.join("summary.json"));
    let grid = summary["results"]["elbo"].as_array().unwrap();
    assert_eq!(grid.len(), 4);
    assert!(grid.iter().all(|row| row.as_array().unwrap().len() == 3));
    assert_eq!(summary["results"]["adequate_attains_column_max"], true);
}

#[test]
fn config_file_and_flags_combine() {
    let dir = TempDir::new().unwrap();
    let cfg = path(&dir, "run.cfg");
    fs::write(&cfg, "# generator settings\nn = 40\ndomain = 0,2\n").unwrap();
    let out = path(&dir, "d.csv");
    ok(&["generate", "--config", s(&cfg), "--seed", "5", "--set", "dim=2", "--out", s(&out)]);
    let (header, rows) = read_csv(&out);
    assert_eq!(header, ["x1", "x2", "y"]);
    assert_eq!(rows.len(), 40);
    assert!(rows.iter().all(|r| (0.0..=2.0).contains(&r[0]) && (0.0..=2.0).contains(&r[1])));

    let o = vffgp(&["generate", "--seed", "5", "--set", "bogus=1", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
}
