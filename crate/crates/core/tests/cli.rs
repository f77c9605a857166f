//! Binary-level checks: exit codes, diagnostics, schema guards, preset
//! validity, and output layout.

use std::path::{Path, PathBuf};
use std::process::Command;

use ndarray::Array2;
use rydotoc::config::{ExperimentConfigFile, ScanConfigFile};
use rydotoc::otoc::{OtocSeries, SeriesMeta, SERIES_SCHEMA};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_rydotoc")
}

fn preset_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets")
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.json");
    std::fs::write(
        &path,
        serde_json::json!({
            "name": "tiny",
            "geometry": { "chain": { "n_atoms": 2, "spacing_um": 9.5 } },
            "drive": { "omega_over_2pi_mhz": 2.5, "delta_over_2pi_mhz": 1.5 },
            "quench": { "mu_over_2pi_mhz": 0.0, "sigma_over_2pi_mhz": 10.0 },
            "time_grid_us": [0.0, 0.2],
            "n_instances": 4,
            "master_seed": 3,
            "scatter_times_us": [0.2]
        })
        .to_string(),
    )
    .unwrap();
    path
}

#[test]
fn all_shipped_presets_validate_against_the_default_profile() {
    for entry in std::fs::read_dir(preset_dir()).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        let text = std::fs::read_to_string(&path).unwrap();
        if name == "m2_scan.json" {
            let file: ScanConfigFile = serde_json::from_str(&text).unwrap();
            file.resolve().unwrap_or_else(|e| panic!("{name}: {e}"));
        } else {
            let file: ExperimentConfigFile = serde_json::from_str(&text).unwrap();
            file.resolve().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }
}

#[test]
fn missing_config_exits_2() {
    let out = Command::new(bin())
        .args(["run-otoc", "/definitely/not/here.json"])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(2),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn malformed_json_exits_2_with_line_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.json");
    std::fs::write(&path, "{ \"geometry\": { \"chain\": { } }\n  broken").unwrap();
    let out = Command::new(bin())
        .arg("run-otoc")
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("line") && stderr.contains("column"),
        "diagnostic missing line/column: {stderr}"
    );
}

#[test]
fn tiny_run_writes_series_scatter_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let out_dir = dir.path().join("out");
    let out = Command::new(bin())
        .arg("run-otoc")
        .arg(&config)
        .arg("--quiet")
        .arg("--out-dir")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(out_dir.join("otoc_series.csv").is_file());
    assert!(out_dir.join("scatter_t0.20.csv").is_file());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["status"], "ok");
    let outputs = manifest["outputs"].as_array().unwrap();
    assert_eq!(outputs.len(), 2);
    for o in outputs {
        assert_eq!(o["sha256"].as_str().unwrap().len(), 64);
    }
    assert!(!manifest["config_hash"].as_str().unwrap().is_empty());
}

#[test]
fn env_var_overrides_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let env_out = dir.path().join("from_env");
    let out = Command::new(bin())
        .arg("run-otoc")
        .arg(&config)
        .arg("--quiet")
        .env("RYDOTOC_OUT_DIR", &env_out)
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(env_out.join("otoc_series.csv").is_file());
}

#[test]
fn oracle_refuses_more_than_eleven_atoms() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.json");
    std::fs::write(
        &path,
        serde_json::json!({
            "geometry": { "chain": { "n_atoms": 12, "spacing_um": 9.5 } },
            "drive": { "omega_over_2pi_mhz": 2.5, "delta_over_2pi_mhz": 1.5 },
            "time_grid_us": [0.0],
            "n_instances": 1,
            "master_seed": 1
        })
        .to_string(),
    )
    .unwrap();
    let out = Command::new(bin())
        .arg("oracle")
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("guard"), "stderr: {stderr}");
}

#[test]
fn oracle_with_single_gridpoint_gives_exact_t0_row() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t0.json");
    std::fs::write(
        &path,
        serde_json::json!({
            "geometry": { "chain": { "n_atoms": 3, "spacing_um": 9.5 } },
            "drive": { "omega_over_2pi_mhz": 2.5, "delta_over_2pi_mhz": 1.5 },
            "time_grid_us": [0.0],
            "n_instances": 1,
            "master_seed": 1
        })
        .to_string(),
    )
    .unwrap();
    let out_dir = dir.path().join("oracle");
    let out = Command::new(bin())
        .arg("oracle")
        .arg(&path)
        .arg("--out-dir")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let series = OtocSeries::read_csv(&out_dir.join("oracle_series.csv")).unwrap();
    for (i, label) in series.site_labels.iter().enumerate() {
        if *label == series.meta.butterfly_site {
            continue;
        }
        assert!((series.otoc[[i, 0]] - 1.0).abs() < 1e-12);
    }
}

fn synthetic_series(dir: &Path) -> PathBuf {
    let times: Vec<f64> = (0..30).map(|k| k as f64 * 0.1).collect();
    let n = 5;
    let mut values = Array2::from_elem((n, times.len()), 1.0);
    for site in 0..n {
        let d = (site as f64 - 4.0).abs();
        let arrival = 0.45 * d + 0.2;
        for (k, t) in times.iter().enumerate() {
            values[[site, k]] = 1.0 - 0.6 * ((t - arrival) / 0.3 + 0.5).clamp(0.0, 1.0);
        }
    }
    let series = OtocSeries {
        site_labels: (1..=n).collect(),
        times_us: times.clone(),
        raw: values.clone(),
        norm: values.mapv(|_| 1.0),
        otoc: values.clone(),
        stderr: values.mapv(|_| 0.01),
        meta: SeriesMeta {
            schema: SERIES_SCHEMA.into(),
            kind: "estimator".into(),
            config_hash: "feedf00d".into(),
            master_seed: 1,
            n_instances: 10,
            n_shots: 0,
            butterfly_site: 5,
        },
    };
    let path = dir.join("series.csv");
    series.write_csv(&path).unwrap();
    path
}

#[test]
fn analyze_fit_and_compare_produce_reports() {
    let dir = tempfile::tempdir().unwrap();
    let series = synthetic_series(dir.path());
    let fit_dir = dir.path().join("fit");
    let out = Command::new(bin())
        .arg("analyze")
        .arg("--fit")
        .arg(&series)
        .arg("--mask-site")
        .arg("5")
        .arg("--out-dir")
        .arg(&fit_dir)
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let fit: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fit_dir.join("lightcone_fit.json")).unwrap())
            .unwrap();
    let slope = fit["slope_us_per_site"].as_f64().unwrap();
    assert!((slope - 0.45).abs() < 1e-6, "slope = {slope}");
    assert!(fit_dir.join("heatmap.csv").is_file());

    let cmp_dir = dir.path().join("cmp");
    let out = Command::new(bin())
        .arg("analyze")
        .arg("--compare")
        .arg(&series)
        .arg(&series)
        .arg("--out-dir")
        .arg(&cmp_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(cmp_dir.join("compare_report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["overall_max"].as_f64().unwrap(), 0.0);
}

#[test]
fn analyze_rejects_unknown_schema_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("wrong.csv");
    std::fs::write(&path, "# otoc_series.v9 kind=estimator\nsite,t_us\n").unwrap();
    let out = Command::new(bin())
        .arg("analyze")
        .arg("--fit")
        .arg(&path)
        .arg("--out-dir")
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn analyze_requires_exactly_one_mode() {
    let out = Command::new(bin()).arg("analyze").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
