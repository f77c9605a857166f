//! User-facing experiment configuration.
//!
//! Config files quote angular frequencies as `value / 2pi` in MHz, matching
//! the way drive parameters are usually stated for these machines; internally
//! everything is rad/us. Site fields (`butterfly.site`, `mask_sites`) are
//! 1-based labels; site 1 is the first atom of the chain.

use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};
use std::path::{Path, PathBuf};

use crate::analysis::FitOrientation;
use crate::design::{QuenchConfig, RandomizedChannel};
use crate::error::{Error, Result};
use crate::evolve::{NoiseModel, PropagatorConfig};
use crate::otoc::{
    ButterflyKind, ButterflyOperator, DriveParams, HeisenbergConvention, OtocExperiment,
};
use crate::pulse::{AtomGeometry, HardwareProfile};

fn mhz(x: f64) -> f64 {
    TAU * x
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSpec {
    pub n_atoms: usize,
    pub spacing_um: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain: Option<ChainSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positions_um: Option<Vec<[f64; 2]>>,
}

impl GeometrySpec {
    fn resolve(&self) -> Result<AtomGeometry> {
        match (&self.chain, &self.positions_um) {
            (Some(chain), None) => Ok(AtomGeometry::chain(chain.n_atoms, chain.spacing_um)),
            (None, Some(positions)) => Ok(AtomGeometry::from_positions(positions.clone())),
            _ => Err(Error::Config(
                "geometry needs exactly one of `chain` or `positions_um`".into(),
            )),
        }
    }
}

/// Per-field overrides of the default hardware profile.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileSpec {
    pub omega_max_over_2pi_mhz: Option<f64>,
    pub omega_slew_over_2pi_mhz_per_us: Option<f64>,
    pub delta_min_over_2pi_mhz: Option<f64>,
    pub delta_max_over_2pi_mhz: Option<f64>,
    pub delta_slew_over_2pi_mhz_per_us: Option<f64>,
    pub local_delta_min_over_2pi_mhz: Option<f64>,
    pub local_delta_max_over_2pi_mhz: Option<f64>,
    pub local_delta_slew_over_2pi_mhz_per_us: Option<f64>,
    pub max_duration_us: Option<f64>,
    pub min_spacing_um: Option<f64>,
    pub c6_over_2pi_mhz_um6: Option<f64>,
    pub rabi_half_convention: Option<bool>,
}

impl ProfileSpec {
    fn resolve(&self) -> HardwareProfile {
        let mut p = HardwareProfile::default();
        if let Some(v) = self.omega_max_over_2pi_mhz {
            p.omega_max = mhz(v);
        }
        if let Some(v) = self.omega_slew_over_2pi_mhz_per_us {
            p.omega_slew = mhz(v);
        }
        if let Some(v) = self.delta_min_over_2pi_mhz {
            p.delta_min = mhz(v);
        }
        if let Some(v) = self.delta_max_over_2pi_mhz {
            p.delta_max = mhz(v);
        }
        if let Some(v) = self.delta_slew_over_2pi_mhz_per_us {
            p.delta_slew = mhz(v);
        }
        if let Some(v) = self.local_delta_min_over_2pi_mhz {
            p.local_delta_min = mhz(v);
        }
        if let Some(v) = self.local_delta_max_over_2pi_mhz {
            p.local_delta_max = mhz(v);
        }
        if let Some(v) = self.local_delta_slew_over_2pi_mhz_per_us {
            p.local_delta_slew = mhz(v);
        }
        if let Some(v) = self.max_duration_us {
            p.max_duration_us = v;
        }
        if let Some(v) = self.min_spacing_um {
            p.min_spacing_um = v;
        }
        if let Some(v) = self.c6_over_2pi_mhz_um6 {
            p.c6 = mhz(v);
        }
        if let Some(v) = self.rabi_half_convention {
            p.rabi_half_convention = v;
        }
        p
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriveSpec {
    pub omega_over_2pi_mhz: f64,
    pub delta_over_2pi_mhz: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuenchSpec {
    pub n_quench: usize,
    pub t_quench_us: f64,
    pub spacing_us: f64,
    pub ramp_us: f64,
    pub stage_budget_us: f64,
    /// Defaults to half the detuning channel maximum.
    pub mu_over_2pi_mhz: Option<f64>,
    /// Defaults to mu / 2.
    pub sigma_over_2pi_mhz: Option<f64>,
    pub channel: RandomizedChannel,
    /// Rabi amplitude held during the quench stage; defaults to the drive.
    pub omega_quench_over_2pi_mhz: Option<f64>,
}

impl Default for QuenchSpec {
    fn default() -> Self {
        QuenchSpec {
            n_quench: 4,
            t_quench_us: 0.1,
            spacing_us: 0.1,
            ramp_us: 0.05,
            stage_budget_us: 1.0,
            mu_over_2pi_mhz: None,
            sigma_over_2pi_mhz: None,
            channel: RandomizedChannel::Detuning,
            omega_quench_over_2pi_mhz: None,
        }
    }
}

impl QuenchSpec {
    fn resolve(&self, profile: &HardwareProfile) -> QuenchConfig {
        let mean = self.mu_over_2pi_mhz.map(mhz).unwrap_or(match self.channel {
            RandomizedChannel::Detuning | RandomizedChannel::Both => profile.delta_max / 2.0,
            RandomizedChannel::Rabi => profile.omega_max / 2.0,
        });
        QuenchConfig {
            n_quench: self.n_quench,
            t_quench_us: self.t_quench_us,
            spacing_us: self.spacing_us,
            ramp_time_us: self.ramp_us,
            stage_budget_us: self.stage_budget_us,
            gaussian_mean: mean,
            gaussian_sigma: self.sigma_over_2pi_mhz.map(mhz).unwrap_or(mean / 2.0),
            channel: self.channel,
            omega_quench: self.omega_quench_over_2pi_mhz.map(mhz),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ButterflySpec {
    pub kind: ButterflyKind,
    /// 1-based site label; defaults to the last atom.
    pub site: Option<usize>,
    pub phi_rad: f64,
    pub pulse_amplitude_over_2pi_mhz: f64,
}

impl Default for ButterflySpec {
    fn default() -> Self {
        ButterflySpec {
            kind: ButterflyKind::PhaseUnitary,
            site: None,
            phi_rad: PI,
            pulse_amplitude_over_2pi_mhz: 12.5,
        }
    }
}

impl ButterflySpec {
    fn resolve(&self, n_atoms: usize) -> Result<ButterflyOperator> {
        let label = self.site.unwrap_or(n_atoms);
        if label == 0 || label > n_atoms {
            return Err(Error::Config(format!(
                "butterfly site label {label} outside 1..={n_atoms}"
            )));
        }
        let site = label - 1;
        Ok(match self.kind {
            ButterflyKind::PhaseUnitary => {
                let amplitude = mhz(self.pulse_amplitude_over_2pi_mhz);
                ButterflyOperator {
                    kind: ButterflyKind::PhaseUnitary,
                    site,
                    phase_rad: self.phi_rad,
                    pulse_amplitude: amplitude,
                    pulse_duration_us: self.phi_rad / amplitude,
                }
            }
            ButterflyKind::Projector => ButterflyOperator::projector(site),
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TimeGridSpec {
    Range {
        start_us: f64,
        stop_us: f64,
        step_us: f64,
    },
    Explicit(Vec<f64>),
}

impl TimeGridSpec {
    fn resolve(&self) -> Result<Vec<f64>> {
        match self {
            TimeGridSpec::Explicit(times) => {
                if times.is_empty() {
                    return Err(Error::Config("time grid is empty".into()));
                }
                Ok(times.clone())
            }
            TimeGridSpec::Range {
                start_us,
                stop_us,
                step_us,
            } => {
                if *step_us <= 0.0 || stop_us < start_us {
                    return Err(Error::Config(format!(
                        "bad time grid range [{start_us}, {stop_us}] step {step_us}"
                    )));
                }
                let n = ((stop_us - start_us) / step_us + 1e-9).floor() as usize;
                Ok((0..=n).map(|k| start_us + k as f64 * step_us).collect())
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseInlineSpec {
    pub gamma_depol: f64,
    pub gamma_rg: f64,
    pub delta_detuning_sigma_over_2pi_mhz: f64,
    pub relative_rabi_sigma: f64,
    pub position_sigma_um: f64,
    pub local_site_noise_multiplier: f64,
    pub n_trajectories: usize,
    pub depol_three_channel: bool,
}

impl Default for NoiseInlineSpec {
    fn default() -> Self {
        NoiseInlineSpec {
            gamma_depol: 0.0,
            gamma_rg: 0.0,
            delta_detuning_sigma_over_2pi_mhz: 0.0,
            relative_rabi_sigma: 0.0,
            position_sigma_um: 0.0,
            local_site_noise_multiplier: 2.0,
            n_trajectories: 600,
            depol_three_channel: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NoiseSpec {
    Preset(String),
    Inline(NoiseInlineSpec),
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec::Preset("none".into())
    }
}

/// Resolve a preset name to a noise model; `none` means noiseless.
pub fn noise_preset(name: &str) -> Result<Option<NoiseModel>> {
    match name {
        "none" => Ok(None),
        "appA_low" => Ok(Some(NoiseModel::app_a_low())),
        "appA_high" => Ok(Some(NoiseModel::app_a_high())),
        other => Err(Error::Config(format!(
            "unknown noise preset `{other}` (expected none, appA_low, appA_high)"
        ))),
    }
}

impl NoiseSpec {
    fn resolve(&self) -> Result<Option<NoiseModel>> {
        match self {
            NoiseSpec::Preset(name) => noise_preset(name),
            NoiseSpec::Inline(inline) => Ok(Some(NoiseModel {
                gamma_depol: inline.gamma_depol,
                gamma_rg: inline.gamma_rg,
                delta_detuning_sigma: mhz(inline.delta_detuning_sigma_over_2pi_mhz),
                relative_rabi_sigma: inline.relative_rabi_sigma,
                position_sigma_um: inline.position_sigma_um,
                local_site_noise_multiplier: inline.local_site_noise_multiplier,
                n_trajectories: inline.n_trajectories,
                depol_three_channel: inline.depol_three_channel,
                boosted_sites: Vec::new(),
            })),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSpec {
    pub threshold: f64,
    pub cutoff_time_us: f64,
    pub orientation: FitOrientation,
}

impl Default for AnalysisSpec {
    fn default() -> Self {
        AnalysisSpec {
            threshold: 0.5,
            cutoff_time_us: 4.0,
            orientation: FitOrientation::TimeVsSite,
        }
    }
}

/// One experiment config document.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfigFile {
    #[serde(default)]
    pub name: Option<String>,
    pub geometry: GeometrySpec,
    #[serde(default)]
    pub profile: ProfileSpec,
    pub drive: DriveSpec,
    #[serde(default)]
    pub quench: QuenchSpec,
    #[serde(default)]
    pub butterfly: ButterflySpec,
    pub time_grid_us: TimeGridSpec,
    pub n_instances: usize,
    #[serde(default)]
    pub n_shots: usize,
    #[serde(default)]
    pub noise: NoiseSpec,
    pub master_seed: u64,
    /// 1-based labels excluded from analysis; defaults to the butterfly site.
    #[serde(default)]
    pub mask_sites: Option<Vec<usize>>,
    #[serde(default)]
    pub scatter_times_us: Vec<f64>,
    #[serde(default)]
    pub persist_branches: bool,
    #[serde(default)]
    pub out_dir: Option<String>,
    #[serde(default)]
    pub propagator: PropagatorConfig,
    #[serde(default)]
    pub analysis: AnalysisSpec,
    /// Oracle Heisenberg convention; flip for sensitivity checks.
    #[serde(default)]
    pub oracle_reverse_convention: bool,
}

/// A fully resolved run: the experiment plus presentation options.
#[derive(Clone, Debug)]
pub struct ResolvedExperiment {
    pub name: String,
    pub experiment: OtocExperiment,
    pub mask_sites: Vec<usize>,
    pub scatter_times_us: Vec<f64>,
    pub persist_branches: bool,
    pub out_dir: Option<PathBuf>,
    pub analysis: AnalysisSpec,
    pub oracle_convention: HeisenbergConvention,
}

impl ExperimentConfigFile {
    pub fn resolve(&self) -> Result<ResolvedExperiment> {
        let geometry = self.geometry.resolve()?;
        let n_atoms = geometry.n_atoms();
        let profile = self.profile.resolve();
        profile.validate()?;
        let drive = DriveParams {
            omega: mhz(self.drive.omega_over_2pi_mhz),
            delta: mhz(self.drive.delta_over_2pi_mhz),
        };
        let quench = self.quench.resolve(&profile);
        let butterfly = self.butterfly.resolve(n_atoms)?;
        let time_grid_us = self.time_grid_us.resolve()?;
        for &t in &self.scatter_times_us {
            if !time_grid_us.iter().any(|g| (g - t).abs() < 1e-9) {
                return Err(Error::Config(format!(
                    "scatter time {t} us is not a grid point"
                )));
            }
        }
        let mask_sites = self
            .mask_sites
            .clone()
            .unwrap_or_else(|| vec![butterfly.site + 1]);
        for &m in &mask_sites {
            if m == 0 || m > n_atoms {
                return Err(Error::Config(format!(
                    "mask site label {m} outside 1..={n_atoms}"
                )));
            }
        }
        let experiment = OtocExperiment {
            geometry,
            profile,
            drive,
            quench,
            butterfly,
            time_grid_us,
            n_instances: self.n_instances,
            n_shots: self.n_shots,
            noise: self.noise.resolve()?,
            master_seed: self.master_seed,
            propagator: self.propagator,
            persist_shots: self.persist_branches && self.n_shots > 0,
        };
        experiment.validate()?;
        Ok(ResolvedExperiment {
            name: self.name.clone().unwrap_or_else(|| "experiment".into()),
            experiment,
            mask_sites,
            scatter_times_us: self.scatter_times_us.clone(),
            persist_branches: self.persist_branches,
            out_dir: self.out_dir.clone().map(PathBuf::from),
            analysis: self.analysis.clone(),
            oracle_convention: if self.oracle_reverse_convention {
                HeisenbergConvention::Reverse
            } else {
                HeisenbergConvention::Forward
            },
        })
    }
}

/// Config document for the 2-design convergence scan.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfigFile {
    #[serde(default)]
    pub name: Option<String>,
    pub geometry: GeometrySpec,
    #[serde(default)]
    pub profile: ProfileSpec,
    pub drive: DriveSpec,
    #[serde(default)]
    pub quench: QuenchSpec,
    pub n_quench_values: Vec<usize>,
    pub n_instances: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub out_dir: Option<String>,
    #[serde(default)]
    pub propagator: PropagatorConfig,
}

#[derive(Clone, Debug)]
pub struct ResolvedScan {
    pub name: String,
    pub geometry: AtomGeometry,
    pub profile: HardwareProfile,
    pub quench: QuenchConfig,
    pub drive_omega: f64,
    pub n_quench_values: Vec<usize>,
    pub n_instances: usize,
    pub master_seed: u64,
    pub out_dir: Option<PathBuf>,
    pub propagator: PropagatorConfig,
}

impl ScanConfigFile {
    pub fn resolve(&self) -> Result<ResolvedScan> {
        let geometry = self.geometry.resolve()?;
        let profile = self.profile.resolve();
        profile.validate()?;
        let quench = self.quench.resolve(&profile);
        if self.n_quench_values.is_empty() {
            return Err(Error::Config("n_quench_values is empty".into()));
        }
        for &n in &self.n_quench_values {
            QuenchConfig {
                n_quench: n,
                ..quench.clone()
            }
            .validate()?;
        }
        Ok(ResolvedScan {
            name: self.name.clone().unwrap_or_else(|| "m2_scan".into()),
            geometry,
            profile,
            quench,
            drive_omega: mhz(self.drive.omega_over_2pi_mhz),
            n_quench_values: self.n_quench_values.clone(),
            n_instances: self.n_instances,
            master_seed: self.master_seed,
            out_dir: self.out_dir.clone().map(PathBuf::from),
            propagator: self.propagator,
        })
    }
}

/// Parse a JSON config file; parse errors carry line/column diagnostics and
/// an unreadable config is reported as a config error (CLI exit 2).
pub fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
