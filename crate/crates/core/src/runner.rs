//! Command orchestration shared by the CLI binary and the Python bindings:
//! config loading, output layout, progress streaming, and manifests.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::analysis::{arrival_times, compare_series, fit_lightcone, write_json, Heatmap};
use crate::config::{
    load_json, noise_preset, ExperimentConfigFile, ResolvedExperiment, ScanConfigFile,
};
use crate::design::convergence_scan;
use crate::error::{io_err, Error, Result};
use crate::manifest::ManifestBuilder;
use crate::otoc::{
    exact_otoc_series, run_experiment_with_progress, scatter_export, write_branches_jsonl,
    OracleArgs, OtocSeries,
};
use crate::pulse::PulseSchedule;

pub const OUT_DIR_ENV: &str = "RYDOTOC_OUT_DIR";

/// Options shared by the run-style subcommands.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub workers: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub noise_preset: Option<String>,
    pub quiet: bool,
}

fn with_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match workers {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?
            .install(f),
    }
}

/// Output directory precedence: CLI flag, then the environment override,
/// then the config file, then `runs/<name>`.
fn resolve_out_dir(flag: &Option<PathBuf>, config: &Option<PathBuf>, name: &str) -> PathBuf {
    if let Some(dir) = flag {
        return dir.clone();
    }
    if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
        if !dir.is_empty() {
            return PathBuf::from(dir);
        }
    }
    if let Some(dir) = config {
        return dir.clone();
    }
    PathBuf::from("runs").join(name)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn progress_line(quiet: bool, value: serde_json::Value) {
    if quiet {
        return;
    }
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{value}");
}

fn load_experiment(config_path: &Path, opts: &RunOptions) -> Result<ResolvedExperiment> {
    let file: ExperimentConfigFile = load_json(config_path)?;
    let mut resolved = file.resolve()?;
    if let Some(seed) = opts.seed {
        resolved.experiment.master_seed = seed;
    }
    if let Some(preset) = &opts.noise_preset {
        resolved.experiment.noise = noise_preset(preset)?;
    }
    Ok(resolved)
}

/// Execute the full randomized protocol and write the series, scatter
/// exports, optional branch records, and the manifest. Files written before
/// a failure are still recorded in the manifest.
pub fn cmd_run_otoc(config_path: &Path, opts: &RunOptions) -> Result<PathBuf> {
    let resolved = load_experiment(config_path, opts)?;
    let out_dir = resolve_out_dir(&opts.out_dir, &resolved.out_dir, &resolved.name);
    ensure_dir(&out_dir)?;
    let mut mb = ManifestBuilder::new("run-otoc", config_path, &out_dir);
    let hash = resolved.experiment.config_hash();
    mb.set_config(&hash, resolved.experiment.master_seed);
    {
        // Resolved quench stage bookkeeping, including the clip fraction of
        // the Gaussian draws against the channel range.
        let exp = &resolved.experiment;
        let ensemble = crate::design::sample_ensemble(
            &exp.quench,
            exp.n_instances,
            exp.master_seed,
            &exp.profile,
        )?;
        let details = serde_json::json!({
            "quench_mean_rad_per_us": exp.quench.gaussian_mean,
            "quench_sigma_rad_per_us": exp.quench.gaussian_sigma,
            "n_quench": exp.quench.n_quench,
            "clip_fraction": ensemble.clip_fraction,
            "butterfly_phase_rad": exp.butterfly.phase_rad,
        });
        progress_line(
            opts.quiet,
            serde_json::json!({ "event": "ensemble", "clip_fraction": ensemble.clip_fraction }),
        );
        mb.set_details(details);
    }
    mb.finish_stage("load_config");
    let mut written: Vec<PathBuf> = Vec::new();
    let result = (|| -> Result<()> {
        let exp = &resolved.experiment;
        let quiet = opts.quiet;
        let n_total = exp.n_instances;
        let (results, mut series) = with_pool(opts.workers, || {
            run_experiment_with_progress(exp, &move |instance| {
                progress_line(
                    quiet,
                    serde_json::json!({
                        "event": "instance_done",
                        "instance": instance,
                        "of": n_total,
                    }),
                );
            })
        })?;
        series.meta.config_hash = hash.clone();
        let series_path = out_dir.join("otoc_series.csv");
        series.write_csv(&series_path)?;
        written.push(series_path);
        for &t in &resolved.scatter_times_us {
            let idx = series
                .times_us
                .iter()
                .position(|g| (g - t).abs() < 1e-9)
                .expect("scatter time validated against the grid");
            let mut table = scatter_export(&results, &series.times_us, idx, &resolved.mask_sites)?;
            table.config_hash = hash.clone();
            let path = out_dir.join(format!("scatter_t{t:.2}.csv"));
            table.write_csv(&path)?;
            written.push(path);
        }
        if resolved.persist_branches {
            let path = out_dir.join("branches.jsonl");
            write_branches_jsonl(&results, &path, &hash)?;
            written.push(path);
        }
        Ok(())
    })();
    mb.finish_stage("simulate_and_write");
    for path in &written {
        mb.record_output(path)?;
    }
    match result {
        Ok(()) => {
            mb.write()?;
            Ok(out_dir)
        }
        Err(e) => {
            mb.fail(&e.to_string());
            let _ = mb.write();
            Err(e)
        }
    }
}

/// Run the 2-design convergence scan and write `m2_scan.csv`.
pub fn cmd_m2_scan(config_path: &Path, opts: &RunOptions) -> Result<PathBuf> {
    let file: ScanConfigFile = load_json(config_path)?;
    let mut scan = file.resolve()?;
    if let Some(seed) = opts.seed {
        scan.master_seed = seed;
    }
    let out_dir = resolve_out_dir(&opts.out_dir, &scan.out_dir, &scan.name);
    ensure_dir(&out_dir)?;
    let mut mb = ManifestBuilder::new("m2-scan", config_path, &out_dir);
    let hash = {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_string(&file)?.as_bytes());
        hasher
            .finalize()
            .iter()
            .take(16)
            .map(|b| format!("{b:02x}"))
            .collect::<String>()
    };
    mb.set_config(&hash, scan.master_seed);
    mb.finish_stage("load_config");
    let run = || -> Result<PathBuf> {
        let rows = with_pool(opts.workers, || {
            convergence_scan(
                &scan.quench,
                &scan.n_quench_values,
                scan.n_instances,
                &scan.geometry,
                &scan.profile,
                &scan.propagator,
                scan.drive_omega,
                scan.master_seed,
            )
        })?;
        let path = out_dir.join("m2_scan.csv");
        let mut fileh = std::fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        writeln!(
            fileh,
            "# m2_scan.v1 config={hash} seed={}",
            scan.master_seed
        )
        .map_err(|e| io_err(&path, e))?;
        let mut w = csv::Writer::from_writer(fileh);
        w.write_record([
            "n_quench",
            "m2_mean",
            "m2_haar",
            "abs_diff",
            "stderr",
            "n_instances",
            "seed",
        ])?;
        for row in &rows {
            w.write_record(&[
                row.n_quench.to_string(),
                row.m2_mean.to_string(),
                row.m2_haar.to_string(),
                row.abs_diff.to_string(),
                row.stderr.to_string(),
                row.n_instances.to_string(),
                row.seed.to_string(),
            ])?;
        }
        w.flush().map_err(|e| io_err(&path, e))?;
        Ok(path)
    };
    match run() {
        Ok(path) => {
            mb.finish_stage("scan");
            mb.record_output(&path)?;
            mb.write()?;
            Ok(out_dir)
        }
        Err(e) => {
            mb.fail(&e.to_string());
            let _ = mb.write();
            Err(e)
        }
    }
}

/// Exact infinite-temperature oracle over the configured grid; same CSV
/// schema as the estimator series for direct comparison.
pub fn cmd_oracle(config_path: &Path, opts: &RunOptions) -> Result<PathBuf> {
    let resolved = load_experiment(config_path, opts)?;
    let exp = &resolved.experiment;
    if exp.n_atoms() > 11 {
        return Err(Error::DimensionGuard {
            n_atoms: exp.n_atoms(),
            max: 1 << 11,
        });
    }
    let out_dir = resolve_out_dir(&opts.out_dir, &resolved.out_dir, &resolved.name);
    ensure_dir(&out_dir)?;
    let mut mb = ManifestBuilder::new("oracle", config_path, &out_dir);
    let hash = exp.config_hash();
    mb.set_config(&hash, exp.master_seed);
    mb.finish_stage("load_config");
    let run = || -> Result<PathBuf> {
        let grid_max = exp.time_grid_us.iter().cloned().fold(0.0, f64::max);
        let sched = PulseSchedule::constant_drive(exp.drive.omega, exp.drive.delta, grid_max);
        let mut series = with_pool(opts.workers, || {
            exact_otoc_series(
                &OracleArgs {
                    geometry: &exp.geometry,
                    schedule: &sched,
                    profile: &exp.profile,
                    butterfly: &exp.butterfly,
                    propagator: &exp.propagator,
                    convention: resolved.oracle_convention,
                },
                &exp.time_grid_us,
            )
        })?;
        series.meta.config_hash = hash.clone();
        series.meta.master_seed = exp.master_seed;
        let path = out_dir.join("oracle_series.csv");
        series.write_csv(&path)?;
        Ok(path)
    };
    match run() {
        Ok(path) => {
            mb.finish_stage("oracle");
            mb.record_output(&path)?;
            mb.write()?;
            Ok(out_dir)
        }
        Err(e) => {
            mb.fail(&e.to_string());
            let _ = mb.write();
            Err(e)
        }
    }
}

/// Options for `analyze`.
#[derive(Clone, Debug, Default)]
pub struct AnalyzeOptions {
    pub threshold: Option<f64>,
    pub cutoff_time_us: Option<f64>,
    pub mask_sites: Option<Vec<usize>>,
    pub out_dir: Option<PathBuf>,
}

/// Lightcone fit of one series: writes `lightcone_fit.json` and
/// `heatmap.csv`.
pub fn cmd_analyze_fit(series_path: &Path, opts: &AnalyzeOptions) -> Result<PathBuf> {
    let series = OtocSeries::read_csv(series_path)?;
    let out_dir = opts
        .out_dir
        .clone()
        .unwrap_or_else(|| resolve_out_dir(&None, &None, "analysis"));
    ensure_dir(&out_dir)?;
    let mut mb = ManifestBuilder::new("analyze --fit", series_path, &out_dir);
    mb.set_config(&series.meta.config_hash, series.meta.master_seed);
    let run = || -> Result<Vec<PathBuf>> {
        let threshold = opts.threshold.unwrap_or(0.5);
        let cutoff = opts.cutoff_time_us.unwrap_or(4.0);
        let hm = Heatmap::from_series(&series, opts.mask_sites.clone());
        let arrivals = arrival_times(&hm, threshold)?;
        let mut fit = fit_lightcone(
            &arrivals,
            crate::analysis::FitOrientation::TimeVsSite,
            cutoff,
            threshold,
        )?;
        fit.config_hash = series.meta.config_hash.clone();
        let fit_path = out_dir.join("lightcone_fit.json");
        write_json(&fit, &fit_path)?;
        let hm_path = out_dir.join("heatmap.csv");
        hm.write_csv(&hm_path)?;
        println!(
            "lightcone: {:.4} +- {:.4} us/site ({:.4} +- {:.4} sites/us) over {} sites",
            fit.slope_us_per_site,
            fit.slope_us_per_site_err,
            fit.slope_sites_per_us,
            fit.slope_sites_per_us_err,
            fit.n_points
        );
        Ok(vec![fit_path, hm_path])
    };
    match run() {
        Ok(outputs) => {
            mb.finish_stage("fit");
            for path in &outputs {
                mb.record_output(path)?;
            }
            mb.write()?;
            Ok(out_dir)
        }
        Err(e) => {
            mb.fail(&e.to_string());
            let _ = mb.write();
            Err(e)
        }
    }
}

/// Compare two series files: writes `compare_report.json`.
pub fn cmd_analyze_compare(path_a: &Path, path_b: &Path, opts: &AnalyzeOptions) -> Result<PathBuf> {
    let a = OtocSeries::read_csv(path_a)?;
    let b = OtocSeries::read_csv(path_b)?;
    let out_dir = opts
        .out_dir
        .clone()
        .unwrap_or_else(|| resolve_out_dir(&None, &None, "analysis"));
    ensure_dir(&out_dir)?;
    let mut mb = ManifestBuilder::new("analyze --compare", path_a, &out_dir);
    mb.set_config(&a.meta.config_hash, a.meta.master_seed);
    let run = || -> Result<PathBuf> {
        let threshold = opts.threshold.unwrap_or(0.5);
        let cutoff = opts.cutoff_time_us.unwrap_or(4.0);
        let mask = opts
            .mask_sites
            .clone()
            .unwrap_or_else(|| vec![a.meta.butterfly_site]);
        let report = compare_series(&a, &b, &mask, threshold, cutoff)?;
        let path = out_dir.join("compare_report.json");
        write_json(&report, &path)?;
        println!("{}", report.summary);
        Ok(path)
    };
    match run() {
        Ok(path) => {
            mb.finish_stage("compare");
            mb.record_output(&path)?;
            mb.write()?;
            Ok(out_dir)
        }
        Err(e) => {
            mb.fail(&e.to_string());
            let _ = mb.write();
            Err(e)
        }
    }
}
