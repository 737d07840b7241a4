use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;
use vffgp::experiments::{self as ex, INTERVAL_SWEEP_ADEQUATE};
use vffgp::mcmc::HmcConfig;
use vffgp::variational::CovarianceKind;

use crate::commands::optimizer;
use crate::config::Config;
use crate::io::{fmt_f64, write_dataset, write_json, write_records, write_table};
use crate::model::SCHEMA_VERSION;
use crate::CliError;

pub const EXPERIMENTS: [&str; 6] = ["rff_compare", "interval_sweep", "dim_sweep", "banana", "lgcp", "solar_style"];

pub fn run(name: &str, cfg: &Config) -> Result<(), CliError> {
    if !EXPERIMENTS.contains(&name) {
        return Err(CliError::Input(format!("unknown experiment `{name}`; available: {}", EXPERIMENTS.join(", "))));
    }
    let seed = cfg.require_seed()?;
    let dir = cfg.out.clone().ok_or_else(|| CliError::Input("experiments need an output directory (--out)".into()))?;
    fs::create_dir_all(&dir).map_err(|e| CliError::Input(format!("cannot create {}: {e}", dir.display())))?;
    let summary = match name {
        "rff_compare" => rff_compare(&dir, seed, cfg)?,
        "interval_sweep" => interval_sweep(&dir, seed)?,
        "dim_sweep" => dim_sweep(&dir, seed, cfg)?,
        "banana" => banana(&dir, seed, cfg)?,
        "lgcp" => lgcp(&dir, seed, cfg)?,
        _ => solar_style(&dir, seed, cfg)?,
    };
    let summary = json!({ "schema_version": SCHEMA_VERSION, "experiment": name, "seed": seed, "results": summary });
    write_json(&dir.join("summary.json"), &summary)
}

fn file(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

fn rff_compare(dir: &Path, seed: u64, cfg: &Config) -> Result<serde_json::Value, CliError> {
    let r = ex::rff_compare(seed, cfg.replicates.max(1))?;
    let rows: Vec<Vec<String>> = r
        .rows
        .iter()
        .map(|g| vec![g.method.clone(), g.num_frequencies.to_string(), g.replicate.to_string(), fmt_f64(g.value), fmt_f64(g.gap), fmt_f64(g.relative_gap)])
        .collect();
    write_records(&file(dir, "gaps.csv"), &["method", "M", "replicate", "log_ml", "gap", "relative_gap"], &rows)?;
    let vff = r.mean_relative_gap("vff", 100).unwrap_or(f64::NAN);
    let rff = r.mean_relative_gap("rff", 100).unwrap_or(f64::NAN);
    Ok(json!({
        "log_marginal": r.log_marginal,
        "hyperparameters": { "variance": r.variance, "lengthscale": r.lengthscale, "noise_variance": r.noise_variance },
        "vff_relative_gap_M100": vff,
        "rff_relative_gap_M100": rff,
        "vff_within_1e-4": vff < 1e-4,
        "rff_gap_over_10x_vff": rff > 10.0 * vff,
    }))
}

fn interval_sweep(dir: &Path, seed: u64) -> Result<serde_json::Value, CliError> {
    let s = ex::interval_sweep(seed)?;
    write_dataset(&file(dir, "data.csv"), &s.data)?;
    let mut rows = Vec::new();
    for (row, (label, a, b)) in s.intervals.iter().enumerate() {
        for (col, m) in s.frequencies.iter().enumerate() {
            rows.push(vec![label.clone(), fmt_f64(*a), fmt_f64(*b), m.to_string(), fmt_f64(s.elbo[row][col])]);
        }
    }
    write_records(&file(dir, "elbo.csv"), &["interval", "a", "b", "M", "elbo"], &rows)?;
    let adequate_best = (0..s.frequencies.len()).all(|c| (0..s.intervals.len()).all(|r| s.elbo[INTERVAL_SWEEP_ADEQUATE][c] >= s.elbo[r][c]));
    Ok(json!({ "log_marginal": s.log_marginal, "elbo": s.elbo, "adequate_attains_column_max": adequate_best }))
}

fn dim_sweep(dir: &Path, seed: u64, cfg: &Config) -> Result<serde_json::Value, CliError> {
    let max_features = if cfg.quick { 300 } else { 1500 };
    let rows = ex::dim_sweep(seed, max_features, true)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| fmt_f64(x));
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.dim.to_string(),
                r.num_frequencies.to_string(),
                r.num_features.to_string(),
                fmt_f64(r.elbo),
                fmt_f64(r.kl),
                fmt_f64(r.setup_seconds),
                fmt_f64(r.elbo_seconds),
                opt(r.dense_elbo),
                opt(r.dense_seconds),
            ]
        })
        .collect();
    write_records(&file(dir, "kl_time.csv"), &["dim", "M", "features", "elbo", "kl", "setup_seconds", "elbo_seconds", "dense_elbo", "dense_seconds"], &table)?;
    let faster = rows.iter().filter(|r| r.dim == 2).all(|r| r.dense_seconds.is_none_or(|d| r.elbo_seconds < d));
    Ok(json!({ "rows": rows, "d2_vff_faster_than_dense": faster }))
}

fn banana(dir: &Path, seed: u64, cfg: &Config) -> Result<serde_json::Value, CliError> {
    let ms: &[usize] = if cfg.quick { &[2, 4] } else { &[2, 4, 6, 8] };
    let opt = optimizer(cfg);
    let b = ex::banana(seed, ms, &[CovarianceKind::Full, CovarianceKind::Kron, CovarianceKind::KronSum], opt)?;
    write_dataset(&file(dir, "data.csv"), &b.data)?;
    let rows: Vec<Vec<String>> = b
        .rows
        .iter()
        .map(|r| vec![r.covariance.clone(), r.num_frequencies.to_string(), fmt_f64(r.elbo), r.iterations.to_string(), r.converged.to_string(), fmt_f64(r.seconds)])
        .collect();
    write_records(&file(dir, "elbo.csv"), &["covariance", "M", "elbo", "iterations", "converged", "seconds"], &rows)?;
    let grid: Vec<Vec<f64>> = (0..b.grid.nrows()).map(|i| vec![b.grid[(i, 0)], b.grid[(i, 1)], b.probability[i]]).collect();
    write_table(&file(dir, "probability_grid.csv"), &["x1", "x2", "p"], &grid)?;
    Ok(json!({ "rows": b.rows }))
}

fn lgcp(dir: &Path, seed: u64, cfg: &Config) -> Result<serde_json::Value, CliError> {
    let ms: &[usize] = if cfg.quick { &[6, 8] } else { &[28, 30] };
    let hmc = HmcConfig {
        iterations: cfg.iterations,
        warmup_fraction: cfg.warmup,
        leapfrog_steps: cfg.leapfrog,
        initial_step_size: cfg.step_size,
        target_accept: cfg.target_accept,
        seed,
    };
    let (grid, runs) = ex::lgcp(seed, ms, &hmc)?;
    let g = grid.bins[1];
    let counts: Vec<Vec<f64>> = grid.counts.iter().enumerate().map(|(i, &c)| vec![grid.centres[0][i / g], grid.centres[1][i % g], c]).collect();
    write_table(&file(dir, "counts.csv"), &["x1", "x2", "count"], &counts)?;
    for r in &runs {
        let rows: Vec<Vec<f64>> = r.intensity.iter().enumerate().map(|(i, &v)| vec![grid.centres[0][i / g], grid.centres[1][i % g], v / grid.bin_area]).collect();
        write_table(&file(dir, &format!("intensity_M{}.csv", r.num_frequencies)), &["x1", "x2", "intensity"], &rows)?;
    }
    let change = match runs.as_slice() {
        [a, .., b] => Some((b.lengthscale_mean - a.lengthscale_mean).abs() / a.lengthscale_mean),
        _ => None,
    };
    Ok(json!({ "runs": runs, "lengthscale_relative_change": change }))
}

fn solar_style(dir: &Path, seed: u64, cfg: &Config) -> Result<serde_json::Value, CliError> {
    let m = if cfg.quick { 40 } else { 100 };
    let r = ex::solar_style(seed, m)?;
    let mut header = vec!["x".to_string(), "y".to_string(), "in_gap".to_string()];
    for (name, _) in &r.predictions {
        header.push(format!("{name}_mean"));
        header.push(format!("{name}_var"));
    }
    let rows: Vec<Vec<f64>> = (0..r.data.len())
        .map(|i| {
            let mut row = vec![r.data.x[(i, 0)], r.data.y[i], if r.in_gap[i] { 1.0 } else { 0.0 }];
            for (_, p) in &r.predictions {
                row.push(p[i].0);
                row.push(p[i].1);
            }
            row
        })
        .collect();
    write_table(&file(dir, "predictions.csv"), &header.iter().map(String::as_str).collect::<Vec<_>>(), &rows)?;
    let metrics: Vec<Vec<String>> = r.metrics.iter().map(|g| vec![g.method.clone(), fmt_f64(g.rmse), fmt_f64(g.nlpd)]).collect();
    write_records(&file(dir, "metrics.csv"), &["method", "rmse", "nlpd"], &metrics)?;
    Ok(json!({ "M": m, "gaps": ex::GAPS, "metrics": r.metrics }))
}
