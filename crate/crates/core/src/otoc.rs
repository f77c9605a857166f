//! The paired-branch randomized-measurement protocol end to end, the
//! ensemble OTOC estimator, and the exact infinite-temperature oracle.
//!
//! For each quench instance u the protocol runs two branches that share the
//! same random quenches: the plain branch evolves and measures the Rydberg
//! density, the butterflied branch applies the local perturbation V right
//! after the quench stage and then evolves identically. The estimator is
//!
//!   raw(t, i)  = mean_u  <n_i(t)>_u^plain * <n_i(t)>_u^butterflied
//!   norm(t, i) = mean_u (<n_i(t)>_u^plain)^2
//!   otoc       = raw / norm
//!
//! with jackknife standard errors over instances. Site labels in series and
//! files are 1-based (site 1 = first atom); library indices are 0-based.

use ndarray::{Array1, Array2};
use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::f64::consts::TAU;
use std::io::Write;
use std::path::Path;

use crate::design::{
    instance_schedule, sample_ensemble, FragmentTargets, QuenchConfig, QuenchEnsemble,
    QuenchInstance,
};
use crate::error::{io_err, Error, Result};
use crate::evolve::{
    draw_static_noise, propagate_unitary_matrix, walk, JumpOperatorSet, JumpState, NoiseModel,
    PropagatorConfig, SystemOp, WalkMode,
};
use crate::pulse::{validate_schedule, AtomGeometry, HardwareProfile, PulseSchedule, Waveform};
use crate::quantum::{bit_of, occupancy_estimates, sample_shots, StateVector};
use crate::rng::{rng_from_seed, stream_seed};

/// Hard ceiling on the dense Hilbert dimension (2^12).
pub const MAX_DENSE_DIM: usize = 4096;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ButterflyKind {
    /// V = exp(i phi n_j): the phase accumulated by a local detuning pulse.
    PhaseUnitary,
    /// V = n_j; not unitary, usable only in the exact oracle.
    Projector,
}

/// The local perturbation whose spreading the protocol tracks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ButterflyOperator {
    pub kind: ButterflyKind,
    /// 0-based atom index.
    pub site: usize,
    /// Accumulated phase, rad (phase-unitary kind).
    pub phase_rad: f64,
    /// Local detuning realization: phase = amplitude * duration.
    pub pulse_amplitude: f64,
    pub pulse_duration_us: f64,
}

impl ButterflyOperator {
    /// Phase pulse at `site` with the default hardware realization:
    /// amplitude 2pi * 12.5 MHz for phi / (2pi * 12.5) us.
    pub fn phase_pulse(site: usize, phase_rad: f64) -> Self {
        let amplitude = TAU * 12.5;
        ButterflyOperator {
            kind: ButterflyKind::PhaseUnitary,
            site,
            phase_rad,
            pulse_amplitude: amplitude,
            pulse_duration_us: phase_rad / amplitude,
        }
    }

    pub fn projector(site: usize) -> Self {
        ButterflyOperator {
            kind: ButterflyKind::Projector,
            site,
            phase_rad: 0.0,
            pulse_amplitude: 0.0,
            pulse_duration_us: 0.0,
        }
    }

    pub fn validate(&self, n_atoms: usize, profile: &HardwareProfile) -> Result<()> {
        if self.site >= n_atoms {
            return Err(Error::SiteOutOfRange {
                site: self.site,
                n_atoms,
            });
        }
        if self.kind == ButterflyKind::PhaseUnitary {
            let realized = self.pulse_amplitude * self.pulse_duration_us;
            if (realized - self.phase_rad).abs() > 1e-6 {
                return Err(Error::Config(format!(
                    "butterfly pulse realizes phase {realized:.6} rad but phase_rad = {:.6}",
                    self.phase_rad
                )));
            }
            if self.pulse_amplitude < profile.local_delta_min - 1e-9
                || self.pulse_amplitude > profile.local_delta_max + 1e-9
            {
                return Err(Error::Config(format!(
                    "butterfly pulse amplitude {:.4} rad/us outside the local detuning range",
                    self.pulse_amplitude
                )));
            }
        }
        Ok(())
    }

    /// Diagonal matrix elements of V over the occupation basis.
    pub fn diag(&self, n_atoms: usize) -> Vec<C64> {
        let dim = 1usize << n_atoms;
        (0..dim)
            .map(|s| {
                let bit = bit_of(s, self.site, n_atoms);
                match self.kind {
                    ButterflyKind::PhaseUnitary => {
                        if bit == 1 {
                            C64::new(0.0, self.phase_rad).exp()
                        } else {
                            C64::new(1.0, 0.0)
                        }
                    }
                    ButterflyKind::Projector => C64::new(bit as f64, 0.0),
                }
            })
            .collect()
    }
}

/// Constant post-quench drive, rad/us.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriveParams {
    pub omega: f64,
    pub delta: f64,
}

/// The full protocol description for one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OtocExperiment {
    pub geometry: AtomGeometry,
    pub profile: HardwareProfile,
    pub drive: DriveParams,
    pub quench: QuenchConfig,
    pub butterfly: ButterflyOperator,
    /// Evolution times after the quench stage, us.
    pub time_grid_us: Vec<f64>,
    pub n_instances: usize,
    /// Shots per instance per branch per time; 0 means exact expectations.
    pub n_shots: usize,
    pub noise: Option<NoiseModel>,
    pub master_seed: u64,
    pub propagator: PropagatorConfig,
    /// Keep raw bitstrings in the branch results (shot mode only).
    pub persist_shots: bool,
}

impl OtocExperiment {
    pub fn n_atoms(&self) -> usize {
        self.geometry.n_atoms()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_atoms();
        if n == 0 {
            return Err(Error::Config("geometry has no atoms".into()));
        }
        if (1usize << n) > MAX_DENSE_DIM {
            return Err(Error::DimensionGuard {
                n_atoms: n,
                max: MAX_DENSE_DIM,
            });
        }
        self.quench.validate()?;
        self.butterfly.validate(n, &self.profile)?;
        if self.n_instances == 0 {
            return Err(Error::EmptyEnsemble);
        }
        if self.time_grid_us.is_empty() {
            return Err(Error::Config("time grid is empty".into()));
        }
        if self.time_grid_us.iter().any(|t| *t < 0.0) {
            return Err(Error::Config("time grid contains negative times".into()));
        }
        let total = self.quench.fragment_duration() + self.grid_max();
        if total > self.profile.max_duration_us + 1e-9 {
            return Err(Error::Config(format!(
                "quench stage ({:.3} us) plus evolution grid ({:.3} us) exceeds the \
                 profile maximum duration {:.3} us",
                self.quench.fragment_duration(),
                self.grid_max(),
                self.profile.max_duration_us
            )));
        }
        if let Some(noise) = &self.noise {
            noise.validate()?;
        }
        self.geometry.validate(&self.profile).into_result()?;
        Ok(())
    }

    fn grid_max(&self) -> f64 {
        self.time_grid_us.iter().cloned().fold(0.0, f64::max)
    }

    /// Hash of the full experiment description; embedded in every output.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("experiment serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let bytes = hasher.finalize();
        bytes.iter().take(16).map(|b| format!("{b:02x}")).collect()
    }

    /// The composed per-instance schedule: quench fragment ramping into the
    /// constant drive, held to the end of the evolution grid.
    pub fn instance_full_schedule(&self, instance: &QuenchInstance) -> Result<PulseSchedule> {
        let targets = FragmentTargets {
            omega_end: self.drive.omega,
            delta_end: self.drive.delta,
        };
        let fragment = instance_schedule(&self.quench, instance, self.drive.omega, targets)?;
        let t_frag = fragment.total_time_us;
        let total = t_frag + self.grid_max();
        if self.grid_max() == 0.0 {
            return Ok(fragment);
        }
        let extend = |w: &Waveform, end: f64| -> Result<Waveform> {
            let mut pts = w.points().to_vec();
            pts.push((total, end));
            Waveform::new(pts)
        };
        Ok(PulseSchedule {
            omega_global: extend(&fragment.omega_global, self.drive.omega)?,
            delta_global: extend(&fragment.delta_global, self.drive.delta)?,
            delta_local: None,
            total_time_us: total,
        })
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Plain,
    Butterflied,
}

/// Per-site density estimates of one instance on one branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchResult {
    pub instance_id: usize,
    pub branch: Branch,
    pub quench_seed: u64,
    pub amplitudes: Vec<f64>,
    /// [site][time] estimates of <n_i(t)>, each in [0, 1].
    pub occupations: Array2<f64>,
    /// Raw bitstrings per time point when persisted.
    pub shots: Option<Vec<Vec<String>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesMeta {
    pub schema: String,
    pub kind: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub n_instances: usize,
    pub n_shots: usize,
    /// 1-based label of the butterfly site.
    pub butterfly_site: usize,
}

/// Per-site, per-time OTOC estimates with uncertainties.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OtocSeries {
    /// 1-based site labels.
    pub site_labels: Vec<usize>,
    pub times_us: Vec<f64>,
    pub raw: Array2<f64>,
    pub norm: Array2<f64>,
    pub otoc: Array2<f64>,
    pub stderr: Array2<f64>,
    pub meta: SeriesMeta,
}

pub const SERIES_SCHEMA: &str = "otoc_series.v1";

impl OtocSeries {
    pub fn n_sites(&self) -> usize {
        self.site_labels.len()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
        writeln!(
            file,
            "# {} kind={} config={} seed={} n_instances={} n_shots={} butterfly_site={}",
            self.meta.schema,
            self.meta.kind,
            self.meta.config_hash,
            self.meta.master_seed,
            self.meta.n_instances,
            self.meta.n_shots,
            self.meta.butterfly_site
        )
        .map_err(|e| io_err(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["site", "t_us", "raw", "norm", "otoc", "stderr"])?;
        for (i, label) in self.site_labels.iter().enumerate() {
            for (k, t) in self.times_us.iter().enumerate() {
                w.write_record(&[
                    label.to_string(),
                    t.to_string(),
                    self.raw[[i, k]].to_string(),
                    self.norm[[i, k]].to_string(),
                    self.otoc[[i, k]].to_string(),
                    self.stderr[[i, k]].to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| io_err(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<OtocSeries> {
        let content = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut lines = content.lines();
        let header = lines.next().unwrap_or_default();
        let meta = parse_series_header(header, path)?;
        let body: String = lines.collect::<Vec<_>>().join("\n");
        let mut rdr = csv::Reader::from_reader(body.as_bytes());
        let mut sites: Vec<usize> = Vec::new();
        let mut times: Vec<f64> = Vec::new();
        let mut rows: Vec<(usize, f64, [f64; 4])> = Vec::new();
        for record in rdr.records() {
            let record = record?;
            let site: usize = record[0]
                .parse()
                .map_err(|_| Error::Config(format!("bad site field `{}`", &record[0])))?;
            let t: f64 = record[1]
                .parse()
                .map_err(|_| Error::Config(format!("bad time field `{}`", &record[1])))?;
            let mut vals = [0.0; 4];
            for (j, v) in vals.iter_mut().enumerate() {
                *v = record[j + 2]
                    .parse()
                    .map_err(|_| Error::Config(format!("bad value `{}`", &record[j + 2])))?;
            }
            if !sites.contains(&site) {
                sites.push(site);
            }
            if !times.iter().any(|x| (x - t).abs() < 1e-12) {
                times.push(t);
            }
            rows.push((site, t, vals));
        }
        if sites.is_empty() || times.is_empty() {
            return Err(Error::Config(format!(
                "{} contains no data rows",
                path.display()
            )));
        }
        let mut raw = Array2::zeros((sites.len(), times.len()));
        let mut norm = Array2::zeros((sites.len(), times.len()));
        let mut otoc = Array2::zeros((sites.len(), times.len()));
        let mut stderr = Array2::zeros((sites.len(), times.len()));
        for (site, t, vals) in rows {
            let i = sites.iter().position(|s| *s == site).unwrap();
            let k = times.iter().position(|x| (x - t).abs() < 1e-12).unwrap();
            raw[[i, k]] = vals[0];
            norm[[i, k]] = vals[1];
            otoc[[i, k]] = vals[2];
            stderr[[i, k]] = vals[3];
        }
        Ok(OtocSeries {
            site_labels: sites,
            times_us: times,
            raw,
            norm,
            otoc,
            stderr,
            meta,
        })
    }
}

fn parse_series_header(header: &str, path: &Path) -> Result<SeriesMeta> {
    let body = header
        .strip_prefix("# ")
        .ok_or_else(|| Error::SchemaMismatch {
            path: path.display().to_string(),
            found: header.chars().take(32).collect(),
            expected: SERIES_SCHEMA.into(),
        })?;
    let mut parts = body.split_whitespace();
    let schema = parts.next().unwrap_or_default().to_string();
    if schema != SERIES_SCHEMA {
        return Err(Error::SchemaMismatch {
            path: path.display().to_string(),
            found: schema,
            expected: SERIES_SCHEMA.into(),
        });
    }
    let mut meta = SeriesMeta {
        schema,
        kind: String::new(),
        config_hash: String::new(),
        master_seed: 0,
        n_instances: 0,
        n_shots: 0,
        butterfly_site: 0,
    };
    for kv in parts {
        if let Some((k, v)) = kv.split_once('=') {
            match k {
                "kind" => meta.kind = v.to_string(),
                "config" => meta.config_hash = v.to_string(),
                "seed" => meta.master_seed = v.parse().unwrap_or(0),
                "n_instances" => meta.n_instances = v.parse().unwrap_or(0),
                "n_shots" => meta.n_shots = v.parse().unwrap_or(0),
                "butterfly_site" => meta.butterfly_site = v.parse().unwrap_or(0),
                _ => {}
            }
        }
    }
    Ok(meta)
}

/// Total shot cost of the protocol: 2 * N_U * N_S.
pub fn shot_budget(n_instances: usize, n_shots: usize) -> Result<u64> {
    if n_instances == 0 {
        return Err(Error::EmptyEnsemble);
    }
    if n_shots == 0 {
        return Err(Error::TooFewValues { needed: 1, got: 0 });
    }
    Ok(2 * n_instances as u64 * n_shots as u64)
}

fn apply_diag(state: &mut Array1<C64>, diag: &[C64]) {
    for (z, d) in state.iter_mut().zip(diag.iter()) {
        *z *= *d;
    }
}

struct InstanceOutcome {
    plain: BranchResult,
    butterflied: BranchResult,
}

/// Run the paired-branch protocol for every quench instance and aggregate the
/// ensemble estimator.
pub fn run_experiment(exp: &OtocExperiment) -> Result<(Vec<BranchResult>, OtocSeries)> {
    run_experiment_with_progress(exp, &|_| {})
}

pub fn run_experiment_with_progress(
    exp: &OtocExperiment,
    progress: &(dyn Fn(usize) + Sync),
) -> Result<(Vec<BranchResult>, OtocSeries)> {
    exp.validate()?;
    if exp.butterfly.kind == ButterflyKind::Projector {
        return Err(Error::ProjectorNotRunnable);
    }
    let ensemble = sample_ensemble(&exp.quench, exp.n_instances, exp.master_seed, &exp.profile)?;
    let outcomes: Vec<InstanceOutcome> = ensemble
        .instances
        .par_iter()
        .map(|instance| {
            let out = run_instance(exp, &ensemble, instance)
                .map_err(|e| e.for_instance(instance.instance_id))?;
            progress(instance.instance_id);
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut results = Vec::with_capacity(2 * outcomes.len());
    let series = aggregate_series(exp, &outcomes)?;
    for o in outcomes {
        results.push(o.plain);
        results.push(o.butterflied);
    }
    Ok((results, series))
}

fn run_instance(
    exp: &OtocExperiment,
    ensemble: &QuenchEnsemble,
    instance: &QuenchInstance,
) -> Result<InstanceOutcome> {
    let sched = exp.instance_full_schedule(instance)?;
    validate_schedule(&sched, &exp.profile).into_result()?;
    let t_frag = ensemble.config.fragment_duration();
    let abs_times: Vec<f64> = exp.time_grid_us.iter().map(|t| t_frag + t).collect();
    let v_diag = exp.butterfly.diag(exp.n_atoms());
    let (occ_plain, occ_butter, shots_plain, shots_butter) = match &exp.noise {
        None => run_instance_unitary(exp, instance, &sched, t_frag, &abs_times, &v_diag)?,
        Some(noise) => {
            run_instance_noisy(exp, instance, &sched, t_frag, &abs_times, &v_diag, noise)?
        }
    };
    let mk =
        |branch: Branch, occupations: Array2<f64>, shots: Option<Vec<Vec<String>>>| BranchResult {
            instance_id: instance.instance_id,
            branch,
            quench_seed: instance.seed,
            amplitudes: instance.amplitudes.clone(),
            occupations,
            shots,
        };
    Ok(InstanceOutcome {
        plain: mk(Branch::Plain, occ_plain, shots_plain),
        butterflied: mk(Branch::Butterflied, occ_butter, shots_butter),
    })
}

type BranchData = (
    Array2<f64>,
    Array2<f64>,
    Option<Vec<Vec<String>>>,
    Option<Vec<Vec<String>>>,
);

fn run_instance_unitary(
    exp: &OtocExperiment,
    instance: &QuenchInstance,
    sched: &PulseSchedule,
    t_frag: f64,
    abs_times: &[f64],
    v_diag: &[C64],
) -> Result<BranchData> {
    let n = exp.n_atoms();
    let sys = SystemOp::new(&exp.geometry, None, &exp.profile)?;
    let cfg = &exp.propagator;
    // Quench stage, shared by both branches.
    let mut stage = vec![StateVector::ground(n).amplitudes().clone()];
    walk(
        &mut stage,
        &sys,
        sched,
        cfg,
        0.0,
        t_frag,
        &[],
        &mut WalkMode::Unitary,
        &mut |_, _| {},
    )?;
    let quenched = stage.pop().unwrap();
    let mut butterflied = quenched.clone();
    apply_diag(&mut butterflied, v_diag);
    let mut states = vec![quenched, butterflied];
    let n_times = abs_times.len();
    let mut occ = [Array2::zeros((n, n_times)), Array2::zeros((n, n_times))];
    let mut shots_store: [Option<Vec<Vec<String>>>; 2] = if exp.n_shots > 0 && exp.persist_shots {
        [Some(Vec::new()), Some(Vec::new())]
    } else {
        [None, None]
    };
    let mut snap_err: Option<Error> = None;
    walk(
        &mut states,
        &sys,
        sched,
        cfg,
        t_frag,
        sched.total_time_us,
        abs_times,
        &mut WalkMode::Unitary,
        &mut |k, st| {
            if snap_err.is_some() {
                return;
            }
            for (b, amps) in st.iter().enumerate() {
                let sv = StateVector::from_amplitudes(n, amps.clone()).unwrap();
                let estimates = if exp.n_shots == 0 {
                    sv.occupation_expectations()
                } else {
                    let seed = stream_seed(
                        exp.master_seed,
                        "shots",
                        &[instance.instance_id as u64, b as u64, k as u64],
                    );
                    match sample_shots(&sv, exp.n_shots, seed) {
                        Ok(shots) => {
                            let est = occupancy_estimates(&shots).unwrap();
                            if let Some(store) = &mut shots_store[b] {
                                store.push(shots);
                            }
                            est
                        }
                        Err(e) => {
                            snap_err = Some(e);
                            return;
                        }
                    }
                };
                for (i, v) in estimates.iter().enumerate() {
                    occ[b][[i, k]] = *v;
                }
            }
        },
    )?;
    if let Some(e) = snap_err {
        return Err(e);
    }
    let [occ_p, occ_b] = occ;
    let [sh_p, sh_b] = shots_store;
    Ok((occ_p, occ_b, sh_p, sh_b))
}

#[allow(clippy::too_many_arguments)]
fn run_instance_noisy(
    exp: &OtocExperiment,
    instance: &QuenchInstance,
    sched: &PulseSchedule,
    t_frag: f64,
    abs_times: &[f64],
    v_diag: &[C64],
    noise: &NoiseModel,
) -> Result<BranchData> {
    let n = exp.n_atoms();
    let n_times = abs_times.len();
    let n_traj = noise.n_trajectories;
    let mut branch_occ: Vec<Array2<f64>> = Vec::with_capacity(2);
    for branch_idx in 0..2usize {
        // The local-detuning pulse only exists on the butterflied branch, so
        // only that branch carries the boosted per-site rates.
        let mut branch_noise = noise.clone();
        if branch_idx == 1 && !branch_noise.boosted_sites.contains(&exp.butterfly.site) {
            branch_noise.boosted_sites.push(exp.butterfly.site);
        }
        let jumps_template = JumpOperatorSet::build(&branch_noise, n)?;
        let per_traj: Vec<Array2<f64>> = (0..n_traj)
            .into_par_iter()
            .map(|k| {
                trajectory_occupations(
                    exp,
                    instance,
                    sched,
                    t_frag,
                    abs_times,
                    v_diag,
                    &branch_noise,
                    &jumps_template,
                    branch_idx,
                    k,
                )
            })
            .collect::<Result<_>>()?;
        let mut mean = Array2::zeros((n, n_times));
        for t in &per_traj {
            mean += t;
        }
        mean /= n_traj as f64;
        branch_occ.push(mean);
    }
    let occ_b = branch_occ.pop().unwrap();
    let occ_p = branch_occ.pop().unwrap();
    Ok((occ_p, occ_b, None, None))
}

#[allow(clippy::too_many_arguments)]
fn trajectory_occupations(
    exp: &OtocExperiment,
    instance: &QuenchInstance,
    sched: &PulseSchedule,
    t_frag: f64,
    abs_times: &[f64],
    v_diag: &[C64],
    noise: &NoiseModel,
    jumps: &JumpOperatorSet,
    branch_idx: usize,
    traj_idx: usize,
) -> Result<Array2<f64>> {
    let n = exp.n_atoms();
    let seed = stream_seed(
        exp.master_seed,
        "traj",
        &[
            instance.instance_id as u64,
            branch_idx as u64,
            traj_idx as u64,
        ],
    );
    let mut rng = rng_from_seed(seed);
    let draws = draw_static_noise(&exp.geometry, noise, &mut rng);
    let mut sys = SystemOp::new(&draws.geometry, None, &exp.profile)?;
    sys.delta_offset = draws.delta_offset;
    sys.omega_scale = draws.omega_scale;
    let cfg = &exp.propagator;
    let mut occ = Array2::zeros((n, abs_times.len()));
    let mut states = vec![StateVector::ground(n).amplitudes().clone()];
    let mut record = |k: usize, st: &[Array1<C64>]| {
        let mut sv = StateVector::from_amplitudes(n, st[0].clone()).unwrap();
        sv.normalize();
        for (i, v) in sv.occupation_expectations().iter().enumerate() {
            occ[[i, k]] = *v;
        }
    };
    if jumps.is_empty() {
        walk(
            &mut states,
            &sys,
            sched,
            cfg,
            0.0,
            t_frag,
            &[],
            &mut WalkMode::Unitary,
            &mut |_, _| {},
        )?;
        if branch_idx == 1 {
            apply_diag(&mut states[0], v_diag);
        }
        walk(
            &mut states,
            &sys,
            sched,
            cfg,
            t_frag,
            sched.total_time_us,
            abs_times,
            &mut WalkMode::Unitary,
            &mut record,
        )?;
    } else {
        let decay = jumps.decay_diagonal(n);
        let mut jump_state = JumpState::fresh(&mut rng);
        walk(
            &mut states,
            &sys,
            sched,
            cfg,
            0.0,
            t_frag,
            &[],
            &mut WalkMode::Jump {
                decay: &decay,
                jumps,
                rng: &mut rng,
                state: &mut jump_state,
            },
            &mut |_, _| {},
        )?;
        if branch_idx == 1 {
            apply_diag(&mut states[0], v_diag);
        }
        walk(
            &mut states,
            &sys,
            sched,
            cfg,
            t_frag,
            sched.total_time_us,
            abs_times,
            &mut WalkMode::Jump {
                decay: &decay,
                jumps,
                rng: &mut rng,
                state: &mut jump_state,
            },
            &mut record,
        )?;
    }
    Ok(occ)
}

/// Jackknife standard error of the ratio mean(x) / mean(y).
fn jackknife_ratio_stderr(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let sx: f64 = x.iter().sum();
    let sy: f64 = y.iter().sum();
    let loo: Vec<f64> = (0..n)
        .map(|u| {
            let denom = sy - y[u];
            if denom == 0.0 {
                f64::NAN
            } else {
                (sx - x[u]) / denom
            }
        })
        .collect();
    let mean = loo.iter().sum::<f64>() / n as f64;
    let var = loo.iter().map(|v| (v - mean).powi(2)).sum::<f64>() * (n as f64 - 1.0) / n as f64;
    var.sqrt()
}

fn aggregate_series(exp: &OtocExperiment, outcomes: &[InstanceOutcome]) -> Result<OtocSeries> {
    let n = exp.n_atoms();
    let n_times = exp.time_grid_us.len();
    let n_u = outcomes.len();
    let mut raw = Array2::zeros((n, n_times));
    let mut norm = Array2::zeros((n, n_times));
    let mut otoc = Array2::zeros((n, n_times));
    let mut stderr = Array2::zeros((n, n_times));
    for i in 0..n {
        for k in 0..n_times {
            let x: Vec<f64> = outcomes
                .iter()
                .map(|o| o.plain.occupations[[i, k]] * o.butterflied.occupations[[i, k]])
                .collect();
            let y: Vec<f64> = outcomes
                .iter()
                .map(|o| o.plain.occupations[[i, k]].powi(2))
                .collect();
            let mx = x.iter().sum::<f64>() / n_u as f64;
            let my = y.iter().sum::<f64>() / n_u as f64;
            raw[[i, k]] = mx;
            norm[[i, k]] = my;
            otoc[[i, k]] = if my == 0.0 { f64::NAN } else { mx / my };
            stderr[[i, k]] = jackknife_ratio_stderr(&x, &y);
        }
    }
    Ok(OtocSeries {
        site_labels: (1..=n).collect(),
        times_us: exp.time_grid_us.clone(),
        raw,
        norm,
        otoc,
        stderr,
        meta: SeriesMeta {
            schema: SERIES_SCHEMA.into(),
            kind: "estimator".into(),
            config_hash: exp.config_hash(),
            master_seed: exp.master_seed,
            n_instances: exp.n_instances,
            n_shots: exp.n_shots,
            butterfly_site: exp.butterfly.site + 1,
        },
    })
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeisenbergConvention {
    /// W(t) = U W U^dag, the forward-conjugation form.
    Forward,
    /// W(t) = U^dag W U.
    Reverse,
}

/// Exact infinite-temperature OTOC of the drive dynamics at one time:
/// Tr[W(t) V^dag W(t) V] / D with W = n_site.
///
/// Returns (raw, normalization Tr[W(t)^2]/D).
pub struct OracleArgs<'a> {
    pub geometry: &'a AtomGeometry,
    pub schedule: &'a PulseSchedule,
    pub profile: &'a HardwareProfile,
    pub butterfly: &'a ButterflyOperator,
    pub propagator: &'a PropagatorConfig,
    pub convention: HeisenbergConvention,
}

pub fn exact_otoc(args: &OracleArgs<'_>, site: usize, t: f64) -> Result<f64> {
    let series = exact_otoc_series(args, &[t])?;
    let idx = series
        .site_labels
        .iter()
        .position(|l| *l == site + 1)
        .ok_or(Error::SiteOutOfRange {
            site,
            n_atoms: series.site_labels.len(),
        })?;
    Ok(series.raw[[idx, 0]])
}

/// Exact oracle over a whole time grid for every site. The `otoc` field holds
/// the normalized variant raw / (Tr[W(t)^2] / D) used for comparison with the
/// randomized estimator; `stderr` is zero.
pub fn exact_otoc_series(args: &OracleArgs<'_>, times: &[f64]) -> Result<OtocSeries> {
    let n = args.geometry.n_atoms();
    let dim = 1usize << n;
    if dim > MAX_DENSE_DIM {
        return Err(Error::DimensionGuard {
            n_atoms: n,
            max: MAX_DENSE_DIM,
        });
    }
    if times.is_empty() {
        return Err(Error::Config("oracle time grid is empty".into()));
    }
    validate_schedule(args.schedule, args.profile).into_result()?;
    args.geometry.validate(args.profile).into_result()?;
    if let Some(shortest) = args.schedule.shortest_segment() {
        if args.propagator.dt_us <= 0.0 || args.propagator.dt_us > shortest + 1e-12 {
            return Err(Error::BadSubstep {
                dt: args.propagator.dt_us,
                shortest,
            });
        }
    }
    args.butterfly.validate(n, args.profile)?;
    let local_mask = args
        .schedule
        .delta_local
        .as_ref()
        .map(|l| l.site_mask.as_slice());
    let sys = SystemOp::new(args.geometry, local_mask, args.profile)?;
    let v_diag = args.butterfly.diag(n);
    let t_max = times.iter().cloned().fold(0.0, f64::max);
    let mut raw = Array2::zeros((n, times.len()));
    let mut norm = Array2::zeros((n, times.len()));
    let mut otoc = Array2::zeros((n, times.len()));
    let mut residue_violation: Option<Error> = None;
    propagate_unitary_matrix(
        &sys,
        args.schedule,
        args.propagator,
        0.0,
        t_max,
        times,
        &mut |k, u| {
            if residue_violation.is_some() {
                return;
            }
            let u_eff = match args.convention {
                HeisenbergConvention::Forward => u.clone(),
                HeisenbergConvention::Reverse => u.t().mapv(|z| z.conj()),
            };
            let u_dag = u_eff.t().mapv(|z| z.conj());
            for site in 0..n {
                // W(t) = U n_site U^dag via a column-masked product.
                let mut masked = u_eff.clone();
                for (col, mut c) in masked.columns_mut().into_iter().enumerate() {
                    if bit_of(col, site, n) == 0 {
                        c.fill(C64::new(0.0, 0.0));
                    }
                }
                let w_t = masked.dot(&u_dag);
                let mut num = C64::new(0.0, 0.0);
                let mut den = 0.0;
                for r in 0..dim {
                    for s in 0..dim {
                        let a2 = w_t[[r, s]].norm_sqr();
                        num += v_diag[r] * v_diag[s].conj() * a2;
                        den += a2;
                    }
                }
                if num.im.abs() > 1e-8 {
                    residue_violation = Some(Error::ImaginaryResidue {
                        residue: num.im.abs(),
                        bound: 1e-8,
                    });
                    return;
                }
                let raw_val = num.re / dim as f64;
                let norm_val = den / dim as f64;
                raw[[site, k]] = raw_val;
                norm[[site, k]] = norm_val;
                otoc[[site, k]] = raw_val / norm_val;
            }
        },
    )?;
    if let Some(e) = residue_violation {
        return Err(e);
    }
    Ok(OtocSeries {
        site_labels: (1..=n).collect(),
        times_us: times.to_vec(),
        raw,
        norm,
        otoc,
        stderr: Array2::zeros((n, times.len())),
        meta: SeriesMeta {
            schema: SERIES_SCHEMA.into(),
            kind: "oracle".into(),
            config_hash: String::new(),
            master_seed: 0,
            n_instances: 0,
            n_shots: 0,
            butterfly_site: args.butterfly.site + 1,
        },
    })
}

/// One point of the branch-correlation scatter at a fixed time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub instance_id: usize,
    /// 1-based site label.
    pub site: usize,
    pub plain: f64,
    pub butterflied: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterTable {
    pub t_us: f64,
    pub rows: Vec<ScatterRow>,
    /// Pearson correlation over the rows; None when degenerate.
    pub pearson_r: Option<f64>,
    /// Hash of the experiment that produced the branches.
    pub config_hash: String,
}

/// Pair up the two branches of every instance at one grid time, excluding the
/// listed (1-based) site labels.
pub fn scatter_export(
    results: &[BranchResult],
    times_us: &[f64],
    time_index: usize,
    excluded_sites: &[usize],
) -> Result<ScatterTable> {
    let mut plain: Vec<&BranchResult> = Vec::new();
    let mut butter: Vec<&BranchResult> = Vec::new();
    for r in results {
        match r.branch {
            Branch::Plain => plain.push(r),
            Branch::Butterflied => butter.push(r),
        }
    }
    plain.sort_by_key(|r| r.instance_id);
    butter.sort_by_key(|r| r.instance_id);
    for (p, b) in plain.iter().zip(butter.iter()) {
        if p.instance_id != b.instance_id {
            return Err(Error::BranchMismatch {
                instance: p.instance_id.min(b.instance_id),
                missing: "paired",
            });
        }
    }
    if plain.len() != butter.len() {
        let instance = if plain.len() > butter.len() {
            plain.last().unwrap().instance_id
        } else {
            butter.last().unwrap().instance_id
        };
        return Err(Error::BranchMismatch {
            instance,
            missing: if plain.len() > butter.len() {
                "butterflied"
            } else {
                "plain"
            },
        });
    }
    let t_us = *times_us.get(time_index).ok_or(Error::TimeOutOfRange {
        t: time_index as f64,
        max: times_us.len() as f64,
    })?;
    let mut rows = Vec::new();
    for (p, b) in plain.iter().zip(butter.iter()) {
        let n_sites = p.occupations.nrows();
        for site_idx in 0..n_sites {
            let label = site_idx + 1;
            if excluded_sites.contains(&label) {
                continue;
            }
            rows.push(ScatterRow {
                instance_id: p.instance_id,
                site: label,
                plain: p.occupations[[site_idx, time_index]],
                butterflied: b.occupations[[site_idx, time_index]],
            });
        }
    }
    let pearson_r = pearson(
        &rows.iter().map(|r| r.plain).collect::<Vec<_>>(),
        &rows.iter().map(|r| r.butterflied).collect::<Vec<_>>(),
    );
    Ok(ScatterTable {
        t_us,
        rows,
        pearson_r,
        config_hash: String::new(),
    })
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (a, b) in x.iter().zip(y.iter()) {
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
        sxy += (a - mx) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

impl ScatterTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
        let r = self.pearson_r.map_or("nan".to_string(), |r| r.to_string());
        writeln!(
            file,
            "# scatter.v1 t_us={} pearson_r={} config={}",
            self.t_us, r, self.config_hash
        )
        .map_err(|e| io_err(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["instance", "site", "w_plain", "w_butterflied"])?;
        for row in &self.rows {
            w.write_record(&[
                row.instance_id.to_string(),
                row.site.to_string(),
                row.plain.to_string(),
                row.butterflied.to_string(),
            ])?;
        }
        w.flush().map_err(|e| io_err(path, e))?;
        Ok(())
    }
}

/// One line per instance per branch, optionally with raw shots.
pub fn write_branches_jsonl(
    results: &[BranchResult],
    path: &Path,
    config_hash: &str,
) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    for r in results {
        let line = serde_json::json!({
            "config_hash": config_hash,
            "instance": r.instance_id,
            "branch": match r.branch { Branch::Plain => "plain", Branch::Butterflied => "butterflied" },
            "quench_seed": r.quench_seed,
            "amplitudes": r.amplitudes,
            "occupations": r.occupations.rows().into_iter().map(|row| row.to_vec()).collect::<Vec<_>>(),
            "shots": r.shots,
        });
        writeln!(file, "{line}").map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::RandomizedChannel;
    use approx::assert_abs_diff_eq;

    fn small_experiment(n_atoms: usize, seed: u64) -> OtocExperiment {
        let profile = HardwareProfile::default();
        let quench = QuenchConfig {
            gaussian_mean: TAU * 2.0,
            gaussian_sigma: TAU * 1.5,
            ..QuenchConfig::default_for(&profile)
        };
        OtocExperiment {
            geometry: AtomGeometry::chain(n_atoms, 9.5),
            profile,
            drive: DriveParams {
                omega: TAU * 2.5,
                delta: TAU * 1.5,
            },
            quench,
            butterfly: ButterflyOperator::phase_pulse(n_atoms - 1, std::f64::consts::PI),
            time_grid_us: vec![0.0, 0.2, 0.4],
            n_instances: 12,
            n_shots: 0,
            noise: None,
            master_seed: seed,
            propagator: PropagatorConfig::default(),
            persist_shots: false,
        }
    }

    #[test]
    fn shot_budget_examples() {
        assert_eq!(shot_budget(200, 500).unwrap(), 200_000);
        assert_eq!(shot_budget(1, 1).unwrap(), 2);
        assert!(matches!(shot_budget(0, 10), Err(Error::EmptyEnsemble)));
    }

    #[test]
    fn butterfly_diag_and_validation() {
        let v = ButterflyOperator::phase_pulse(1, std::f64::consts::PI);
        assert_abs_diff_eq!(
            v.pulse_amplitude * v.pulse_duration_us,
            std::f64::consts::PI,
            epsilon = 1e-12
        );
        let diag = v.diag(2);
        assert_abs_diff_eq!(diag[0].re, 1.0);
        assert!((diag[1] - C64::new(-1.0, 0.0)).norm() < 1e-12);
        // Unitary: |v_s| = 1 for every s.
        for d in &diag {
            assert_abs_diff_eq!(d.norm(), 1.0, epsilon = 1e-12);
        }
        let p = ButterflyOperator::projector(0);
        let pd = p.diag(2);
        assert_eq!(pd[0b10].re, 1.0);
        assert_eq!(pd[0b01].re, 0.0);
        assert!(v.validate(2, &HardwareProfile::default()).is_ok());
        assert!(v.validate(1, &HardwareProfile::default()).is_err());
    }

    #[test]
    fn oracle_t0_values() {
        let geom = AtomGeometry::chain(2, 9.5);
        let profile = HardwareProfile::default();
        let sched = PulseSchedule::constant_drive(TAU * 2.5, 0.0, 0.5);
        let cfg = PropagatorConfig::default();
        // t = 0, W = n_0, V unitary on site 1: Tr[n V^dag n V]/D = 1/2.
        let v = ButterflyOperator::phase_pulse(1, std::f64::consts::PI);
        let args = OracleArgs {
            geometry: &geom,
            schedule: &sched,
            profile: &profile,
            butterfly: &v,
            propagator: &cfg,
            convention: HeisenbergConvention::Forward,
        };
        let series = exact_otoc_series(&args, &[0.0]).unwrap();
        assert_abs_diff_eq!(series.raw[[0, 0]], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(series.otoc[[0, 0]], 1.0, epsilon = 1e-12);
        // Projector V = n on the same site: Tr[n^4]/D = 1/2.
        let proj = ButterflyOperator::projector(0);
        let args_p = OracleArgs {
            butterfly: &proj,
            ..args
        };
        let series_p = exact_otoc_series(&args_p, &[0.0]).unwrap();
        assert_abs_diff_eq!(series_p.raw[[0, 0]], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn oracle_constant_for_noninteracting_sites() {
        // Two driven atoms without interactions never correlate, so the OTOC
        // of n_0 against a phase kick on site 1 stays at 1/2.
        let geom = AtomGeometry::chain(2, 9.5);
        let profile = HardwareProfile {
            c6: 0.0,
            ..HardwareProfile::default()
        };
        let sched = PulseSchedule::constant_drive(TAU * 2.5, 0.0, 1.0);
        let cfg = PropagatorConfig::default();
        let v = ButterflyOperator::phase_pulse(1, std::f64::consts::PI);
        let args = OracleArgs {
            geometry: &geom,
            schedule: &sched,
            profile: &profile,
            butterfly: &v,
            propagator: &cfg,
            convention: HeisenbergConvention::Forward,
        };
        let times: Vec<f64> = (0..=10).map(|k| k as f64 * 0.1).collect();
        let series = exact_otoc_series(&args, &times).unwrap();
        for k in 0..times.len() {
            assert_abs_diff_eq!(series.raw[[0, k]], 0.5, epsilon = 1e-10);
        }
    }

    #[test]
    fn oracle_is_bounded_and_real_for_unitary_butterfly() {
        let geom = AtomGeometry::chain(3, 9.0);
        let profile = HardwareProfile::default();
        let sched = PulseSchedule::constant_drive(TAU * 2.5, TAU * 1.5, 1.0);
        let cfg = PropagatorConfig::default();
        let v = ButterflyOperator::phase_pulse(2, std::f64::consts::PI);
        let args = OracleArgs {
            geometry: &geom,
            schedule: &sched,
            profile: &profile,
            butterfly: &v,
            propagator: &cfg,
            convention: HeisenbergConvention::Forward,
        };
        let times: Vec<f64> = (0..=8).map(|k| k as f64 * 0.125).collect();
        let series = exact_otoc_series(&args, &times).unwrap();
        // Cauchy-Schwarz: |O(t)| <= Tr[W(t)^2]/D for unitary V.
        for i in 0..3 {
            for k in 0..times.len() {
                assert!(series.otoc[[i, k]].abs() <= 1.0 + 1e-10);
                assert_abs_diff_eq!(series.norm[[i, k]], 0.5, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn oracle_conventions_agree_for_real_hamiltonian() {
        let geom = AtomGeometry::chain(2, 9.5);
        let profile = HardwareProfile::default();
        let sched = PulseSchedule::constant_drive(TAU * 2.0, TAU * 1.0, 0.6);
        let cfg = PropagatorConfig::default();
        let v = ButterflyOperator::phase_pulse(1, 1.1);
        let fwd = exact_otoc_series(
            &OracleArgs {
                geometry: &geom,
                schedule: &sched,
                profile: &profile,
                butterfly: &v,
                propagator: &cfg,
                convention: HeisenbergConvention::Forward,
            },
            &[0.3, 0.6],
        )
        .unwrap();
        let rev = exact_otoc_series(
            &OracleArgs {
                geometry: &geom,
                schedule: &sched,
                profile: &profile,
                butterfly: &v,
                propagator: &cfg,
                convention: HeisenbergConvention::Reverse,
            },
            &[0.3, 0.6],
        )
        .unwrap();
        for k in 0..2 {
            assert_abs_diff_eq!(fwd.raw[[0, k]], rev.raw[[0, k]], epsilon = 1e-9);
        }
    }

    #[test]
    fn oracle_refuses_oversized_systems() {
        let geom = AtomGeometry::chain(13, 9.5);
        let profile = HardwareProfile::default();
        let sched = PulseSchedule::constant_drive(TAU * 2.5, 0.0, 0.1);
        let cfg = PropagatorConfig::default();
        let v = ButterflyOperator::phase_pulse(12, std::f64::consts::PI);
        let args = OracleArgs {
            geometry: &geom,
            schedule: &sched,
            profile: &profile,
            butterfly: &v,
            propagator: &cfg,
            convention: HeisenbergConvention::Forward,
        };
        assert!(matches!(
            exact_otoc_series(&args, &[0.0]),
            Err(Error::DimensionGuard { .. })
        ));
    }

    #[test]
    fn protocol_normalized_otoc_is_one_at_t_zero() {
        let exp = small_experiment(3, 41);
        let (_, series) = run_experiment(&exp).unwrap();
        for i in 0..3 {
            if i == exp.butterfly.site {
                continue;
            }
            assert!(
                (series.otoc[[i, 0]] - 1.0).abs() < 1e-10,
                "site {i}: otoc(0) = {}",
                series.otoc[[i, 0]]
            );
        }
    }

    #[test]
    fn branches_share_quench_amplitudes() {
        let exp = small_experiment(2, 7);
        let (results, _) = run_experiment(&exp).unwrap();
        for pair in results.chunks(2) {
            assert_eq!(pair[0].instance_id, pair[1].instance_id);
            assert_eq!(pair[0].amplitudes, pair[1].amplitudes);
            assert_eq!(pair[0].branch, Branch::Plain);
            assert_eq!(pair[1].branch, Branch::Butterflied);
            for v in pair[0].occupations.iter() {
                assert!((0.0..=1.0 + 1e-12).contains(v));
            }
        }
    }

    #[test]
    fn projector_butterfly_cannot_run_on_protocol() {
        let mut exp = small_experiment(2, 7);
        exp.butterfly = ButterflyOperator::projector(1);
        assert!(matches!(
            run_experiment(&exp),
            Err(Error::ProjectorNotRunnable)
        ));
    }

    #[test]
    fn duration_overflow_is_rejected() {
        let mut exp = small_experiment(2, 7);
        exp.time_grid_us = vec![0.0, 3.5];
        assert!(exp.validate().is_err());
    }

    #[test]
    fn run_is_deterministic() {
        let exp = small_experiment(2, 99);
        let (_, a) = run_experiment(&exp).unwrap();
        let (_, b) = run_experiment(&exp).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shot_mode_converges_toward_exact_mode() {
        let mut exact = small_experiment(2, 13);
        exact.time_grid_us = vec![0.3];
        exact.n_instances = 6;
        let (_, exact_series) = run_experiment(&exact).unwrap();
        let mut errs = Vec::new();
        for n_shots in [100usize, 10_000] {
            let mut shotty = exact.clone();
            shotty.n_shots = n_shots;
            let (_, series) = run_experiment(&shotty).unwrap();
            let err = (0..2)
                .map(|i| (series.otoc[[i, 0]] - exact_series.otoc[[i, 0]]).abs())
                .fold(0.0, f64::max);
            errs.push(err);
        }
        assert!(errs[1] < errs[0], "shot errors did not shrink: {errs:?}");
    }

    #[test]
    fn scatter_t0_sits_on_the_diagonal() {
        let exp = small_experiment(3, 5);
        let (results, series) = run_experiment(&exp).unwrap();
        let table =
            scatter_export(&results, &series.times_us, 0, &[exp.butterfly.site + 1]).unwrap();
        assert_eq!(table.t_us, 0.0);
        let r = table.pearson_r.unwrap();
        assert!(r > 0.99, "pearson r = {r}");
        for row in &table.rows {
            assert_abs_diff_eq!(row.plain, row.butterflied, epsilon = 1e-10);
        }
    }

    #[test]
    fn degenerate_ensemble_gives_identical_scatter_points() {
        let mut exp = small_experiment(2, 5);
        exp.quench.gaussian_sigma = 0.0;
        let (results, series) = run_experiment(&exp).unwrap();
        // Restricted to a single site, every instance lands on the same point
        // and the correlation is undefined.
        let table = scatter_export(&results, &series.times_us, 1, &[2]).unwrap();
        assert!(table.pearson_r.is_none());
        let first = &table.rows[0];
        for row in &table.rows {
            assert_abs_diff_eq!(row.plain, first.plain, epsilon = 1e-12);
            assert_abs_diff_eq!(row.butterflied, first.butterflied, epsilon = 1e-12);
        }
    }

    #[test]
    fn scatter_detects_missing_branch() {
        let exp = small_experiment(2, 5);
        let (mut results, series) = run_experiment(&exp).unwrap();
        results.pop();
        assert!(matches!(
            scatter_export(&results, &series.times_us, 0, &[]),
            Err(Error::BranchMismatch { .. })
        ));
    }

    #[test]
    fn series_csv_roundtrip() {
        let exp = small_experiment(2, 21);
        let (_, series) = run_experiment(&exp).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("otoc_series.csv");
        series.write_csv(&path).unwrap();
        let back = OtocSeries::read_csv(&path).unwrap();
        assert_eq!(back.site_labels, series.site_labels);
        assert_eq!(back.times_us, series.times_us);
        assert_eq!(back.otoc, series.otoc);
        assert_eq!(back.meta.config_hash, series.meta.config_hash);
        assert_eq!(back.meta.butterfly_site, series.meta.butterfly_site);
    }

    #[test]
    fn rabi_randomized_channel_also_runs() {
        let mut exp = small_experiment(2, 3);
        exp.quench.channel = RandomizedChannel::Rabi;
        exp.quench.gaussian_mean = TAU * 1.25;
        exp.quench.gaussian_sigma = TAU * 0.6;
        exp.n_instances = 4;
        let (_, series) = run_experiment(&exp).unwrap();
        assert_eq!(series.otoc.dim(), (2, 3));
    }

    #[test]
    fn noisy_mode_runs_and_t0_identity_degrades_gracefully() {
        let mut exp = small_experiment(2, 31);
        exp.n_instances = 3;
        exp.time_grid_us = vec![0.0, 0.2];
        exp.noise = Some(NoiseModel {
            gamma_depol: 0.05,
            gamma_rg: 0.03,
            n_trajectories: 8,
            ..NoiseModel::none()
        });
        let (results, series) = run_experiment(&exp).unwrap();
        assert_eq!(results.len(), 6);
        for v in series.otoc.iter() {
            assert!(v.is_finite());
        }
    }
}
