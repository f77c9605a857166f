//! Atom geometry, hardware limits, piecewise-linear waveforms, and assembly
//! of the time-dependent Rydberg Hamiltonian
//!
//!   H(t) = sum_j Omega_j(t) X_j - sum_j Delta_j(t) n_j
//!        + sum_{j<k} C6 / r_jk^6 n_j n_k
//!
//! All angular frequencies are stored in rad/us; distances in um. User-facing
//! configs quote values as `value/2pi` in MHz, which is numerically identical
//! once multiplied by 2pi (1 MHz * 2pi rad <-> 2pi rad/us).

use ndarray::Array2;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::fmt;

use crate::error::{Error, Result};
use crate::quantum::{bit_of, flip_mask, Operator};

/// Atom positions in the plane, in um.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtomGeometry {
    pub positions_um: Vec<[f64; 2]>,
    /// Lattice spacing for chain-built geometries, recorded for bookkeeping.
    pub lattice_spacing_um: Option<f64>,
}

impl AtomGeometry {
    /// 1D chain at positions (0, a, 2a, ...).
    pub fn chain(n_atoms: usize, spacing_um: f64) -> Self {
        AtomGeometry {
            positions_um: (0..n_atoms).map(|i| [i as f64 * spacing_um, 0.0]).collect(),
            lattice_spacing_um: Some(spacing_um),
        }
    }

    pub fn from_positions(positions_um: Vec<[f64; 2]>) -> Self {
        AtomGeometry {
            positions_um,
            lattice_spacing_um: None,
        }
    }

    pub fn n_atoms(&self) -> usize {
        self.positions_um.len()
    }

    pub fn distance(&self, j: usize, k: usize) -> f64 {
        let [xa, ya] = self.positions_um[j];
        let [xb, yb] = self.positions_um[k];
        ((xa - xb).powi(2) + (ya - yb).powi(2)).sqrt()
    }

    /// Spacing violations against the profile's minimum pairwise distance.
    pub fn validate(&self, profile: &HardwareProfile) -> ValidationReport {
        let mut report = ValidationReport::default();
        for j in 0..self.n_atoms() {
            for k in (j + 1)..self.n_atoms() {
                let d = self.distance(j, k);
                if d < profile.min_spacing_um {
                    report.push(
                        ViolationKind::Spacing,
                        "geometry",
                        format!(
                            "atoms {j} and {k} are {d:.3} um apart (minimum {:.3} um)",
                            profile.min_spacing_um
                        ),
                    );
                }
            }
        }
        report
    }
}

/// Piecewise-linear waveform: breakpoints (time us, value rad/us), exact at
/// breakpoints and linear between them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(f64, f64)>", into = "Vec<(f64, f64)>")]
pub struct Waveform {
    points: Vec<(f64, f64)>,
}

impl Waveform {
    /// Breakpoints must start at t = 0 and be strictly increasing.
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.is_empty() || points[0].0 != 0.0 {
            return Err(Error::BadWaveform);
        }
        for pair in points.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(Error::BadWaveform);
            }
        }
        if points.iter().any(|(t, v)| !t.is_finite() || !v.is_finite()) {
            return Err(Error::BadWaveform);
        }
        Ok(Waveform { points })
    }

    /// Constant value over [0, duration].
    pub fn constant(value: f64, duration: f64) -> Self {
        if duration > 0.0 {
            Waveform {
                points: vec![(0.0, value), (duration, value)],
            }
        } else {
            Waveform {
                points: vec![(0.0, value)],
            }
        }
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn duration(&self) -> f64 {
        self.points.last().unwrap().0
    }

    /// Value at time `t`; clamped to the endpoint values outside the span.
    pub fn value(&self, t: f64) -> f64 {
        if t <= self.points[0].0 {
            return self.points[0].1;
        }
        if t >= self.duration() {
            return self.points.last().unwrap().1;
        }
        let idx = self.points.partition_point(|(pt, _)| *pt <= t);
        let (t0, v0) = self.points[idx - 1];
        let (t1, v1) = self.points[idx];
        v0 + (t - t0) * (v1 - v0) / (t1 - t0)
    }

    /// Length of the shortest segment between breakpoints.
    pub fn shortest_segment(&self) -> Option<f64> {
        self.points
            .windows(2)
            .map(|p| p[1].0 - p[0].0)
            .fold(None, |acc, d| Some(acc.map_or(d, |a: f64| a.min(d))))
    }

    /// True if the waveform is constant on [a, b] (linear pieces with equal
    /// endpoint values are exactly constant).
    pub fn constant_on(&self, a: f64, b: f64) -> bool {
        let va = self.value(a);
        if self.value(b) != va {
            return false;
        }
        self.points
            .iter()
            .filter(|(t, _)| *t > a && *t < b)
            .all(|(_, v)| *v == va)
    }
}

impl TryFrom<Vec<(f64, f64)>> for Waveform {
    type Error = Error;
    fn try_from(points: Vec<(f64, f64)>) -> Result<Self> {
        Waveform::new(points)
    }
}

impl From<Waveform> for Vec<(f64, f64)> {
    fn from(w: Waveform) -> Self {
        w.points
    }
}

/// Per-channel hardware limits plus the interaction constant.
///
/// Defaults follow publicly documented ranges for current neutral-atom analog
/// machines; every field is configurable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HardwareProfile {
    /// Max global Rabi amplitude, rad/us.
    pub omega_max: f64,
    /// Max |dOmega/dt|, rad/us^2.
    pub omega_slew: f64,
    /// Global detuning range, rad/us.
    pub delta_min: f64,
    pub delta_max: f64,
    /// Max |dDelta/dt|, rad/us^2.
    pub delta_slew: f64,
    /// Local detuning range and slew.
    pub local_delta_min: f64,
    pub local_delta_max: f64,
    pub local_delta_slew: f64,
    /// Maximum total schedule duration, us.
    pub max_duration_us: f64,
    /// Minimum pairwise atom distance, um.
    pub min_spacing_um: f64,
    /// Van der Waals coefficient, rad um^6 / us.
    pub c6: f64,
    /// Use Omega/2 as the drive coefficient instead of Omega.
    pub rabi_half_convention: bool,
}

impl Default for HardwareProfile {
    fn default() -> Self {
        HardwareProfile {
            omega_max: TAU * 2.5,
            omega_slew: TAU * 60.0,
            delta_min: -TAU * 20.0,
            delta_max: TAU * 20.0,
            delta_slew: TAU * 500.0,
            local_delta_min: 0.0,
            local_delta_max: TAU * 20.0,
            local_delta_slew: TAU * 500.0,
            max_duration_us: 4.0,
            min_spacing_um: 4.0,
            c6: TAU * 862_690.0,
            rabi_half_convention: false,
        }
    }
}

impl HardwareProfile {
    /// All limits must be positive and the detuning range must contain 0.
    pub fn validate(&self) -> Result<()> {
        if self.omega_max <= 0.0
            || self.omega_slew <= 0.0
            || self.delta_slew <= 0.0
            || self.local_delta_slew <= 0.0
            || self.max_duration_us <= 0.0
            || self.min_spacing_um <= 0.0
            || self.c6 < 0.0
        {
            return Err(Error::Config(
                "hardware profile limits must be positive".into(),
            ));
        }
        if self.delta_min > 0.0 || self.delta_max < 0.0 {
            return Err(Error::Config("the detuning range must contain 0".into()));
        }
        if self.local_delta_min > self.local_delta_max {
            return Err(Error::Config("empty local detuning range".into()));
        }
        Ok(())
    }
}

/// Local detuning channel: one waveform gated by a per-site boolean mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalDetuning {
    pub site_mask: Vec<bool>,
    pub waveform: Waveform,
}

/// Global Rabi and detuning waveforms plus the optional local detuning
/// channel, spanning [0, total_time].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PulseSchedule {
    pub omega_global: Waveform,
    pub delta_global: Waveform,
    pub delta_local: Option<LocalDetuning>,
    pub total_time_us: f64,
}

impl PulseSchedule {
    /// Constant drive over [0, total_time].
    pub fn constant_drive(omega: f64, delta: f64, total_time_us: f64) -> Self {
        PulseSchedule {
            omega_global: Waveform::constant(omega, total_time_us),
            delta_global: Waveform::constant(delta, total_time_us),
            delta_local: None,
            total_time_us,
        }
    }

    /// Shortest inter-breakpoint segment over all channels.
    pub fn shortest_segment(&self) -> Option<f64> {
        let mut shortest: Option<f64> = None;
        let mut fold = |w: &Waveform| {
            if let Some(s) = w.shortest_segment() {
                shortest = Some(shortest.map_or(s, |a: f64| a.min(s)));
            }
        };
        fold(&self.omega_global);
        fold(&self.delta_global);
        if let Some(local) = &self.delta_local {
            fold(&local.waveform);
        }
        shortest
    }

    /// Breakpoint times of every channel, merged and sorted.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut ts: Vec<f64> = self
            .omega_global
            .points()
            .iter()
            .chain(self.delta_global.points().iter())
            .map(|(t, _)| *t)
            .collect();
        if let Some(local) = &self.delta_local {
            ts.extend(local.waveform.points().iter().map(|(t, _)| *t));
        }
        ts.push(self.total_time_us);
        ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ts.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        ts
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Duration,
    Range,
    Slew,
    Span,
    Spacing,
    Structure,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub channel: String,
    pub message: String,
}

/// Everything wrong with a schedule; empty means valid.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn push(&mut self, kind: ViolationKind, channel: &str, message: String) {
        self.violations.push(Violation {
            kind,
            channel: channel.to_string(),
            message,
        });
    }

    pub fn merge(&mut self, other: ValidationReport) {
        self.violations.extend(other.violations);
    }

    pub fn has_kind(&self, kind: ViolationKind) -> bool {
        self.violations.iter().any(|v| v.kind == kind)
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::InvalidSchedule(self))
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "valid");
        }
        for v in &self.violations {
            writeln!(f, "- [{:?}/{}] {}", v.kind, v.channel, v.message)?;
        }
        Ok(())
    }
}

fn check_channel(
    report: &mut ValidationReport,
    name: &str,
    w: &Waveform,
    lo: f64,
    hi: f64,
    slew: f64,
    total_time: f64,
) {
    for (t, v) in w.points() {
        if *v < lo - 1e-9 || *v > hi + 1e-9 {
            report.push(
                ViolationKind::Range,
                name,
                format!("value {v:.4} rad/us at t = {t:.4} us outside [{lo:.4}, {hi:.4}]"),
            );
        }
    }
    for pair in w.points().windows(2) {
        let (t0, v0) = pair[0];
        let (t1, v1) = pair[1];
        let rate = ((v1 - v0) / (t1 - t0)).abs();
        if rate > slew + 1e-9 {
            report.push(
                ViolationKind::Slew,
                name,
                format!("slope {rate:.2} rad/us^2 on [{t0:.4}, {t1:.4}] exceeds {slew:.2}"),
            );
        }
    }
    if (w.duration() - total_time).abs() > 1e-9 {
        report.push(
            ViolationKind::Span,
            name,
            format!(
                "waveform spans [0, {:.4}] but the schedule runs to {total_time:.4} us",
                w.duration()
            ),
        );
    }
}

/// Check a schedule against a hardware profile. The report lists every
/// violation; an empty report means the schedule is valid.
pub fn validate_schedule(sched: &PulseSchedule, profile: &HardwareProfile) -> ValidationReport {
    let mut report = ValidationReport::default();
    if sched.total_time_us > profile.max_duration_us + 1e-9 {
        report.push(
            ViolationKind::Duration,
            "schedule",
            format!(
                "total time {:.4} us exceeds maximum {:.4} us",
                sched.total_time_us, profile.max_duration_us
            ),
        );
    }
    if sched.total_time_us < 0.0 {
        report.push(
            ViolationKind::Structure,
            "schedule",
            "total time is negative".into(),
        );
    }
    check_channel(
        &mut report,
        "omega_global",
        &sched.omega_global,
        0.0,
        profile.omega_max,
        profile.omega_slew,
        sched.total_time_us,
    );
    check_channel(
        &mut report,
        "delta_global",
        &sched.delta_global,
        profile.delta_min,
        profile.delta_max,
        profile.delta_slew,
        sched.total_time_us,
    );
    if let Some(local) = &sched.delta_local {
        check_channel(
            &mut report,
            "delta_local",
            &local.waveform,
            profile.local_delta_min,
            profile.local_delta_max,
            profile.local_delta_slew,
            sched.total_time_us,
        );
        if local.site_mask.iter().all(|m| !m) {
            report.push(
                ViolationKind::Structure,
                "delta_local",
                "local detuning present but the site mask is empty".into(),
            );
        }
    }
    report
}

/// Blockade radius R_b = (C6 / Omega)^(1/6), in um.
pub fn blockade_radius(omega: f64, c6: f64) -> Result<f64> {
    if omega <= 0.0 {
        return Err(Error::NonPositiveOmega(omega));
    }
    Ok((c6 / omega).powf(1.0 / 6.0))
}

/// Pairwise van der Waals couplings C6 / r_jk^6 (full all-to-all sum, no
/// nearest-neighbor truncation).
pub fn interaction_couplings(
    geom: &AtomGeometry,
    profile: &HardwareProfile,
) -> Vec<(usize, usize, f64)> {
    let n = geom.n_atoms();
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for j in 0..n {
        for k in (j + 1)..n {
            out.push((j, k, profile.c6 / geom.distance(j, k).powi(6)));
        }
    }
    out
}

/// Diagonal interaction term per basis index: sum_{j<k} V_jk b_j b_k.
pub fn interaction_diagonal(geom: &AtomGeometry, profile: &HardwareProfile) -> Vec<f64> {
    let n = geom.n_atoms();
    let dim = 1usize << n;
    let couplings = interaction_couplings(geom, profile);
    let mut diag = vec![0.0; dim];
    for (s, d) in diag.iter_mut().enumerate() {
        for (j, k, v) in &couplings {
            if bit_of(s, *j, n) == 1 && bit_of(s, *k, n) == 1 {
                *d += v;
            }
        }
    }
    diag
}

/// Channel values of a schedule at one instant.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct ChannelSample {
    pub omega: f64,
    pub delta_global: f64,
    pub delta_local: f64,
}

pub fn sample_channels(sched: &PulseSchedule, t: f64) -> ChannelSample {
    ChannelSample {
        omega: sched.omega_global.value(t),
        delta_global: sched.delta_global.value(t),
        delta_local: sched
            .delta_local
            .as_ref()
            .map_or(0.0, |l| l.waveform.value(t)),
    }
}

/// Assemble the dense Hamiltonian H(t), in rad/us.
pub fn build_hamiltonian(
    geom: &AtomGeometry,
    sched: &PulseSchedule,
    profile: &HardwareProfile,
    t: f64,
) -> Result<Operator> {
    validate_schedule(sched, profile).into_result()?;
    if !(0.0..=sched.total_time_us + 1e-12).contains(&t) {
        return Err(Error::TimeOutOfRange {
            t,
            max: sched.total_time_us,
        });
    }
    let n = geom.n_atoms();
    if let Some(local) = &sched.delta_local {
        if local.site_mask.len() != n {
            return Err(Error::DimensionMismatch {
                left: local.site_mask.len(),
                right: n,
            });
        }
    }
    let dim = 1usize << n;
    let ch = sample_channels(sched, t);
    let omega_coeff = if profile.rabi_half_convention {
        ch.omega / 2.0
    } else {
        ch.omega
    };
    let pair_diag = interaction_diagonal(geom, profile);
    let mut h = Array2::<C64>::zeros((dim, dim));
    for s in 0..dim {
        let mut diag = pair_diag[s];
        for site in 0..n {
            if bit_of(s, site, n) == 1 {
                let local = sched
                    .delta_local
                    .as_ref()
                    .filter(|l| l.site_mask[site])
                    .map_or(0.0, |_| ch.delta_local);
                diag -= ch.delta_global + local;
            }
        }
        h[[s, s]] = C64::new(diag, 0.0);
        for site in 0..n {
            let flipped = s ^ flip_mask(site, n);
            h[[flipped, s]] += C64::new(omega_coeff, 0.0);
        }
    }
    Operator::hermitian(h)
}
