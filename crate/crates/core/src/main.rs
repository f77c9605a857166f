use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rydotoc::runner::{
    cmd_analyze_compare, cmd_analyze_fit, cmd_m2_scan, cmd_oracle, cmd_run_otoc, AnalyzeOptions,
    RunOptions,
};

/// Randomized-quench OTOC simulator and lightcone analysis for Rydberg
/// chains.
#[derive(Parser)]
#[command(name = "rydotoc", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads for instance/trajectory parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory (overrides RYDOTOC_OUT_DIR and the config file).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Suppress per-instance progress lines on stderr.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the randomized-measurement OTOC protocol from a config file.
    RunOtoc {
        /// Experiment config (JSON).
        #[arg(value_name = "CONFIG", required_unless_present = "config_flag")]
        config: Option<PathBuf>,
        #[arg(long = "config", value_name = "CONFIG", conflicts_with = "config")]
        config_flag: Option<PathBuf>,
        /// Noise preset override: none, appA_low, appA_high.
        #[arg(long)]
        noise_preset: Option<String>,
    },
    /// 2-design convergence scan over the number of quenches.
    M2Scan {
        #[arg(value_name = "CONFIG", required_unless_present = "config_flag")]
        config: Option<PathBuf>,
        #[arg(long = "config", value_name = "CONFIG", conflicts_with = "config")]
        config_flag: Option<PathBuf>,
    },
    /// Exact infinite-temperature OTOC of the drive Hamiltonian (N <= 11).
    Oracle {
        #[arg(value_name = "CONFIG", required_unless_present = "config_flag")]
        config: Option<PathBuf>,
        #[arg(long = "config", value_name = "CONFIG", conflicts_with = "config")]
        config_flag: Option<PathBuf>,
    },
    /// Lightcone fits and series comparisons on written CSV outputs.
    Analyze {
        /// Fit a lightcone to this series file.
        #[arg(long, value_name = "SERIES_CSV")]
        fit: Option<PathBuf>,
        /// Compare two series files.
        #[arg(long, num_args = 2, value_names = ["A_CSV", "B_CSV"])]
        compare: Option<Vec<PathBuf>>,
        /// Arrival threshold as a fraction of each site's total drop.
        #[arg(long)]
        threshold: Option<f64>,
        /// Exclude arrivals after this time from fits, us.
        #[arg(long)]
        cutoff_time: Option<f64>,
        /// 1-based site labels to mask (repeatable).
        #[arg(long = "mask-site")]
        mask_site: Vec<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let opts = RunOptions {
        workers: cli.workers,
        out_dir: cli.out_dir.clone(),
        seed: cli.seed,
        noise_preset: None,
        quiet: cli.quiet,
    };
    let outcome = match cli.command {
        Command::RunOtoc {
            config,
            config_flag,
            noise_preset,
        } => {
            let opts = RunOptions {
                noise_preset,
                ..opts
            };
            cmd_run_otoc(
                &config.or(config_flag).expect("clap enforces config"),
                &opts,
            )
        }
        Command::M2Scan {
            config,
            config_flag,
        } => cmd_m2_scan(
            &config.or(config_flag).expect("clap enforces config"),
            &opts,
        ),
        Command::Oracle {
            config,
            config_flag,
        } => cmd_oracle(
            &config.or(config_flag).expect("clap enforces config"),
            &opts,
        ),
        Command::Analyze {
            fit,
            compare,
            threshold,
            cutoff_time,
            mask_site,
        } => {
            let aopts = AnalyzeOptions {
                threshold,
                cutoff_time_us: cutoff_time,
                mask_sites: if mask_site.is_empty() {
                    None
                } else {
                    Some(mask_site)
                },
                out_dir: cli.out_dir.clone(),
            };
            match (fit, compare) {
                (Some(series), None) => cmd_analyze_fit(&series, &aopts),
                (None, Some(paths)) if paths.len() == 2 => {
                    cmd_analyze_compare(&paths[0], &paths[1], &aopts)
                }
                _ => {
                    eprintln!("analyze needs exactly one of --fit or --compare");
                    return ExitCode::from(2);
                }
            }
        }
    };
    match outcome {
        Ok(out_dir) => {
            eprintln!("outputs written to {}", out_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
