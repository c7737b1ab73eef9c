use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use reset_ridge::io::read_csv;

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reset-ridge"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("RESET_RIDGE_SEED")
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn ridge_curve_has_one_row_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "f.json", r#"{"filters": [{"kind": "ridge", "lambda": 1}], "mu_grid": [0.5, 1, 2]}"#);
    let o = run(&["filter-curve", "--config", &cfg], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let (header, rows) = read_csv(dir.path().join("filter_curves.csv")).unwrap();
    assert_eq!(header, vec!["mu", "ridge(lambda=1)"]);
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[1][1].parse::<f64>().unwrap(), 0.5);
    assert!(dir.path().join("filter_0_ridge_lambda_1.csv").exists());
}

#[test]
fn exponential_and_matched_ridge_columns_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "f.json",
        r#"{"filters": [{"kind": "ridge", "lambda": 0.7},
                        {"kind": "renewal", "law": {"kind": "exponential", "rate": 0.7}}],
            "mu_grid": {"min": 0.01, "max": 100, "count": 50}}"#,
    );
    assert_eq!(run(&["filter-curve", "--config", &cfg], dir.path()).status.code(), Some(0));
    let (_, rows) = read_csv(dir.path().join("filter_curves.csv")).unwrap();
    for row in rows {
        let a: f64 = row[1].parse().unwrap();
        let b: f64 = row[2].parse().unwrap();
        assert!((a - b).abs() < 1e-14);
    }
    let adm = fs::read_to_string(dir.path().join("admissibility.json")).unwrap();
    assert!(adm.contains("\"passed\": true"));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad_law = write(
        dir.path(),
        "a.json",
        r#"{"filters": [{"kind": "renewal", "law": {"kind": "weibull", "rate": 1}}], "mu_grid": [1]}"#,
    );
    let o = run(&["filter-curve", "--config", &bad_law], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("weibull"));

    let bad_key = write(dir.path(), "b.json", r#"{"filterz": [], "mu_grid": [1]}"#);
    let o = run(&["filter-curve", "--config", &bad_key], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("filterz"));

    let bad_method = write(dir.path(), "c.json", r#"{"experiment": "spiked", "methods": ["ridge", "lasso"]}"#);
    let o = run(&["experiment", "--config", &bad_method], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("lasso") && err.contains("periodic"), "{err}");

    let tiny = write(dir.path(), "d.json", r#"{"experiment": "spiked", "gamma_grid": [0.01]}"#);
    assert_eq!(run(&["experiment", "--config", &tiny], dir.path()).status.code(), Some(2));

    let corrupt = write(dir.path(), "e.json", "{ not json");
    assert_eq!(run(&["verify", "--config", &corrupt], dir.path()).status.code(), Some(2));

    assert_eq!(run(&["experiment"], dir.path()).status.code(), Some(2));
    assert_eq!(run(&["no-such-command"], dir.path()).status.code(), Some(2));
}

#[test]
fn verify_passes_by_default_and_only_warns_with_few_samples() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["verify"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(!String::from_utf8_lossy(&o.stdout).contains("FAIL"));
    for seed in ["1", "2", "3"] {
        let o = run(&["verify", "--mc-samples", "1000", "--seed", seed], dir.path());
        assert_eq!(o.status.code(), Some(0));
    }
}

#[test]
fn spiked_smoke_run_emits_well_formed_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "s.json",
        r#"{"experiment": "spiked", "gamma_grid": [1.5], "trials": 5, "n_test": 500}"#,
    );
    let o = run(&["experiment", "--config", &cfg, "--table-g7", "--detail"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let (header, rows) = read_csv(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(header, vec!["sweep_value", "method", "mean_mse", "gain_pct", "se_gain_pct", "trials"]);
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0][1], "ridge");
    assert_eq!(rows[0][3].parse::<f64>().unwrap(), 0.0);
    assert!(rows.iter().all(|r| r[5] == "5"));
    let (_, trials) = read_csv(dir.path().join("trials.csv")).unwrap();
    assert_eq!(trials.len(), 20);
    assert!(fs::read_to_string(dir.path().join("table_g7.txt")).unwrap().contains("periodic"));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["base_seed"], 42);
}

#[test]
fn seed_comes_from_flag_then_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "s.json",
        r#"{"model": {"mu": [2, 0.5], "alpha": [1, -1]}, "law": {"kind": "gamma", "shape": 2, "mean": 1},
            "noise": {"isotropic": 0.3}, "mode": "snapshots", "count": 50}"#,
    );
    let read = |sub: &str| fs::read(dir.path().join(sub).join("snapshots.csv")).unwrap();
    let go = |sub: &str, seed: Option<&str>, env: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_reset-ridge"));
        c.args(["simulate", "--quiet", "--config", &cfg, "--out"]).arg(dir.path().join(sub));
        c.env_remove("RESET_RIDGE_SEED");
        if let Some(s) = seed {
            c.args(["--seed", s]);
        }
        if let Some(e) = env {
            c.env("RESET_RIDGE_SEED", e);
        }
        assert!(c.status().unwrap().success());
    };
    go("default", None, None);
    go("flag42", Some("42"), None);
    go("env7", None, Some("7"));
    go("flag7", Some("7"), Some("9"));
    assert_eq!(read("default"), read("flag42"));
    assert_eq!(read("env7"), read("flag7"));
    assert_ne!(read("default"), read("env7"));
}

#[test]
fn other_subcommands_produce_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let traj = write(
        d,
        "t.json",
        r#"{"model": {"h": [[2, 0.3], [0.3, 1]], "b": [1, 0.5]}, "law": {"kind": "deterministic", "period": 1.5},
            "noise": {"matrix": [[0.2, 0.05], [0.05, 0.1]]}, "mode": "trajectory", "horizon": 10, "dt": 0.1}"#,
    );
    assert_eq!(run(&["simulate", "--config", &traj], d).status.code(), Some(0));
    let (h, rows) = read_csv(d.join("trajectory.csv")).unwrap();
    assert_eq!(h, vec!["t", "w1", "w2"]);
    assert_eq!(rows.len(), 101);
    let (_, resets) = read_csv(d.join("resets.csv")).unwrap();
    assert_eq!(resets.len(), 6);

    let mom = write(
        d,
        "m.json",
        r#"{"model": {"mu": [3, 1, 0.2], "alpha": [1, 1, 1]}, "law": {"kind": "exponential", "rate": 1}, "noise": {"isotropic": 0.5}}"#,
    );
    assert_eq!(run(&["moments", "--config", &mom, "--mc-samples", "2000"], d).status.code(), Some(0));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("moments.json")).unwrap()).unwrap();
    assert!(m["lyapunov_residual"].as_f64().unwrap() < 1e-12);
    assert!(m["monte_carlo"]["max_abs_z"].as_f64().is_some());

    let risk = write(
        d,
        "r.json",
        r#"{"mu": [1], "alpha": [1], "b_tilde": [1.5], "noise_diag": [0.5],
            "estimators": [{"kind": "ridge", "lambda": 1}, {"kind": "poisson", "rate": 1},
                           {"kind": "renewal", "law": {"kind": "deterministic", "period": 1}}],
            "scan": {"min": 0.001, "max": 1000, "count": 61}}"#,
    );
    assert_eq!(run(&["risk", "--config", &risk], d).status.code(), Some(0));
    let (h, rows) = read_csv(d.join("risk_scan.csv")).unwrap();
    assert_eq!(h.len(), 6);
    assert_eq!(rows.len(), 61);

    assert_eq!(run(&["optimal-rate", "--config", &risk], d).status.code(), Some(0));
    let o: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("optimal_rate.json")).unwrap()).unwrap();
    let r = o["r_star"].as_f64().unwrap();
    assert!(r > 0.1 && r < 10.0 && o["boundary_flag"] == false);

    assert_eq!(run(&["landscape"], d).status.code(), Some(0));
    let (h, rows) = read_csv(d.join("landscape.csv")).unwrap();
    assert_eq!(h, vec!["mu_tau", "nu", "best_law", "gain"]);
    assert_eq!(rows.len(), 41 * 41);

    assert_eq!(run(&["mismatch"], d).status.code(), Some(0));
    let (_, rows) = read_csv(d.join("mismatch.csv")).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows[0][5].parse::<f64>().unwrap() < 1e-12);
    assert!(d.join("lambda_eff.csv").exists());
}

#[test]
fn csv_numbers_round_trip_to_full_precision() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "f.json",
        r#"{"filters": [{"kind": "renewal", "law": {"kind": "gamma", "shape": 3, "mean": 1}}], "mu_grid": {"min": 0.001, "max": 1000, "count": 25}}"#,
    );
    assert_eq!(run(&["filter-curve", "--config", &cfg], dir.path()).status.code(), Some(0));
    let law = reset_ridge::ResetLaw::gamma(3.0, 1.0).unwrap();
    let grid = reset_ridge::linalg::logspace(1e-3, 1e3, 25);
    let (_, rows) = read_csv(dir.path().join("filter_curves.csv")).unwrap();
    for (row, mu) in rows.iter().zip(grid) {
        assert_eq!(row[0].parse::<f64>().unwrap(), mu);
        assert_eq!(row[1].parse::<f64>().unwrap(), law.filter_g(mu).unwrap());
    }
}
