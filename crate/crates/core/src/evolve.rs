//! Time-dependent propagation of state vectors under a pulse schedule, and
//! stochastic Lindblad trajectories.
//!
//! The default propagator applies the time-ordered product of substep
//! propagators exp(-i H(t_mid) dt). Each substep exponential is evaluated to
//! machine precision by a scaled Taylor expansion applied directly to the
//! state, so no dense matrix is formed in the hot path; cost per substep is
//! O(D * N). A classic fourth-order integrator is available behind the same
//! interface.

use ndarray::Array1;
use num_complex::Complex64 as C64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pulse::{
    interaction_diagonal, validate_schedule, AtomGeometry, HardwareProfile, PulseSchedule,
};
use crate::quantum::{bit_of, flip_mask, StateVector};
use crate::rng::rng_from_seed;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropagationMethod {
    /// exp(-i H(t_mid) dt) per substep, evaluated to machine precision.
    ExactExpm,
    /// Classic RK4 on d|psi>/dt; cheaper per substep but not norm-preserving.
    RungeKutta4,
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PropagatorConfig {
    /// Substep length, us. Must be positive and no longer than the shortest
    /// waveform segment.
    pub dt_us: f64,
    pub method: PropagationMethod,
    /// Bound on |norm - 1| after unitary propagation.
    pub norm_tolerance: f64,
}

impl Default for PropagatorConfig {
    fn default() -> Self {
        PropagatorConfig {
            dt_us: 1e-3,
            method: PropagationMethod::ExactExpm,
            norm_tolerance: 1e-8,
        }
    }
}

/// Static and quenched-noise parameters of the Lindblad model.
///
/// Rates are in 1/us; the laser and position spreads are drawn once per
/// trajectory (quenched noise), not per time step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    pub gamma_depol: f64,
    pub gamma_rg: f64,
    /// Std-dev of a static global detuning offset, rad/us.
    pub delta_detuning_sigma: f64,
    /// Std-dev of the relative Rabi amplitude error.
    pub relative_rabi_sigma: f64,
    /// Std-dev of per-coordinate atom position jitter, um.
    pub position_sigma_um: f64,
    /// Rate multiplier applied at `boosted_sites`.
    pub local_site_noise_multiplier: f64,
    pub n_trajectories: usize,
    /// Split the combined depolarizing collapse operator into separate X, Y,
    /// Z channels.
    pub depol_three_channel: bool,
    /// Sites whose jump rates get the local multiplier (e.g. the site driven
    /// by a local detuning pulse).
    pub boosted_sites: Vec<usize>,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            gamma_depol: 0.0,
            gamma_rg: 0.0,
            delta_detuning_sigma: 0.0,
            relative_rabi_sigma: 0.0,
            position_sigma_um: 0.0,
            local_site_noise_multiplier: 2.0,
            n_trajectories: 1,
            depol_three_channel: false,
            boosted_sites: Vec::new(),
        }
    }
}

impl NoiseModel {
    pub fn none() -> Self {
        NoiseModel::default()
    }

    /// Low-depolarization preset: gamma_depol = 0.05 /us.
    pub fn app_a_low() -> Self {
        NoiseModel {
            gamma_depol: 0.05,
            ..Self::app_a_high()
        }
    }

    /// High-depolarization preset: gamma_depol = 0.2 /us.
    pub fn app_a_high() -> Self {
        NoiseModel {
            gamma_depol: 0.2,
            gamma_rg: 0.03,
            delta_detuning_sigma: std::f64::consts::TAU * 0.18,
            relative_rabi_sigma: 0.018,
            position_sigma_um: 0.05,
            local_site_noise_multiplier: 2.0,
            n_trajectories: 600,
            depol_three_channel: false,
            boosted_sites: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma_depol < 0.0
            || self.gamma_rg < 0.0
            || self.delta_detuning_sigma < 0.0
            || self.relative_rabi_sigma < 0.0
            || self.position_sigma_um < 0.0
            || self.local_site_noise_multiplier < 0.0
        {
            return Err(Error::BadNoiseModel(
                "rates and spreads must be non-negative".into(),
            ));
        }
        if self.n_trajectories < 1 {
            return Err(Error::BadNoiseModel("n_trajectories must be >= 1".into()));
        }
        Ok(())
    }

    fn is_quiet(&self) -> bool {
        self.gamma_depol == 0.0 && self.gamma_rg == 0.0
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum JumpKind {
    /// sqrt(gamma) (X + Y + Z) at one site.
    DepolCombined,
    DepolX,
    DepolY,
    DepolZ,
    /// sqrt(gamma) |1><0| at one site (drives occupation upward, as written).
    GroundToRydberg,
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct JumpChannel {
    pub site: usize,
    pub kind: JumpKind,
    pub rate: f64,
}

/// The collapse operators of the noise model, embedded per site.
#[derive(Clone, Debug, Default)]
pub struct JumpOperatorSet {
    pub channels: Vec<JumpChannel>,
}

impl JumpOperatorSet {
    pub fn build(noise: &NoiseModel, n_atoms: usize) -> Result<Self> {
        noise.validate()?;
        for &site in &noise.boosted_sites {
            if site >= n_atoms {
                return Err(Error::SiteOutOfRange { site, n_atoms });
            }
        }
        let mut channels = Vec::new();
        for site in 0..n_atoms {
            let boost = if noise.boosted_sites.contains(&site) {
                noise.local_site_noise_multiplier
            } else {
                1.0
            };
            if noise.gamma_depol > 0.0 {
                let rate = noise.gamma_depol * boost;
                if noise.depol_three_channel {
                    channels.push(JumpChannel {
                        site,
                        kind: JumpKind::DepolX,
                        rate,
                    });
                    channels.push(JumpChannel {
                        site,
                        kind: JumpKind::DepolY,
                        rate,
                    });
                    channels.push(JumpChannel {
                        site,
                        kind: JumpKind::DepolZ,
                        rate,
                    });
                } else {
                    channels.push(JumpChannel {
                        site,
                        kind: JumpKind::DepolCombined,
                        rate,
                    });
                }
            }
            if noise.gamma_rg > 0.0 {
                channels.push(JumpChannel {
                    site,
                    kind: JumpKind::GroundToRydberg,
                    rate: noise.gamma_rg * boost,
                });
            }
        }
        Ok(JumpOperatorSet { channels })
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    /// Diagonal of sum_k c_k^dag c_k over the occupation basis, in 1/us.
    ///
    /// (X+Y+Z)^2 = 3 I, so each combined depolarizing channel contributes a
    /// uniform 3*gamma; the pump channel contributes gamma (1 - n_site).
    pub fn decay_diagonal(&self, n_atoms: usize) -> Vec<f64> {
        let dim = 1usize << n_atoms;
        let mut diag = vec![0.0; dim];
        for ch in &self.channels {
            match ch.kind {
                JumpKind::DepolCombined => {
                    for d in diag.iter_mut() {
                        *d += 3.0 * ch.rate;
                    }
                }
                JumpKind::DepolX | JumpKind::DepolY | JumpKind::DepolZ => {
                    for d in diag.iter_mut() {
                        *d += ch.rate;
                    }
                }
                JumpKind::GroundToRydberg => {
                    for (s, d) in diag.iter_mut().enumerate() {
                        if bit_of(s, ch.site, n_atoms) == 0 {
                            *d += ch.rate;
                        }
                    }
                }
            }
        }
        diag
    }
}

/// Structured Hamiltonian operator: interactions precomputed on the diagonal,
/// drive terms applied per site. Static (quenched) noise draws enter through
/// `omega_scale` and `delta_offset`.
pub(crate) struct SystemOp {
    pub n_atoms: usize,
    pub dim: usize,
    flips: Vec<usize>,
    pair_diag: Vec<f64>,
    pair_max: f64,
    n_total: Vec<u8>,
    n_local: Vec<u8>,
    local_count: usize,
    rabi_half: bool,
    pub omega_scale: f64,
    pub delta_offset: f64,
}

impl SystemOp {
    pub fn new(
        geom: &AtomGeometry,
        local_mask: Option<&[bool]>,
        profile: &HardwareProfile,
    ) -> Result<Self> {
        let n = geom.n_atoms();
        if n == 0 {
            return Err(Error::Config("geometry has no atoms".into()));
        }
        if let Some(mask) = local_mask {
            if mask.len() != n {
                return Err(Error::DimensionMismatch {
                    left: mask.len(),
                    right: n,
                });
            }
        }
        let dim = 1usize << n;
        let pair_diag = interaction_diagonal(geom, profile);
        let pair_max = pair_diag.iter().cloned().fold(0.0, f64::max);
        let mut n_total = vec![0u8; dim];
        let mut n_local = vec![0u8; dim];
        for s in 0..dim {
            for site in 0..n {
                if bit_of(s, site, n) == 1 {
                    n_total[s] += 1;
                    if local_mask.is_some_and(|m| m[site]) {
                        n_local[s] += 1;
                    }
                }
            }
        }
        Ok(SystemOp {
            n_atoms: n,
            dim,
            flips: (0..n).map(|site| flip_mask(site, n)).collect(),
            pair_diag,
            pair_max,
            n_total,
            n_local,
            local_count: local_mask.map_or(0, |m| m.iter().filter(|x| **x).count()),
            rabi_half: profile.rabi_half_convention,
            omega_scale: 1.0,
            delta_offset: 0.0,
        })
    }

    /// Effective channel values at time t, with static noise applied.
    pub fn channels_at(&self, sched: &PulseSchedule, t: f64) -> EffectiveChannels {
        let raw = crate::pulse::sample_channels(sched, t);
        let omega = raw.omega * self.omega_scale * if self.rabi_half { 0.5 } else { 1.0 };
        EffectiveChannels {
            omega,
            delta_global: raw.delta_global + self.delta_offset,
            delta_local: raw.delta_local,
        }
    }

    #[inline]
    fn diag_at(&self, ch: &EffectiveChannels, s: usize) -> f64 {
        self.pair_diag[s]
            - ch.delta_global * self.n_total[s] as f64
            - ch.delta_local * self.n_local[s] as f64
    }

    /// out = H |psi>.
    pub fn apply(&self, ch: &EffectiveChannels, psi: &Array1<C64>, out: &mut Array1<C64>) {
        let p = psi.as_slice().unwrap();
        let o = out.as_slice_mut().unwrap();
        for (s, os) in o.iter_mut().enumerate() {
            *os = p[s] * self.diag_at(ch, s);
        }
        if ch.omega != 0.0 {
            for &mask in &self.flips {
                for (s, os) in o.iter_mut().enumerate() {
                    *os += p[s ^ mask] * ch.omega;
                }
            }
        }
    }

    /// Upper bound on the spectral norm of H at these channel values.
    pub fn norm_bound(&self, ch: &EffectiveChannels) -> f64 {
        self.pair_max
            + ch.delta_global.abs() * self.n_atoms as f64
            + ch.delta_local.abs() * self.local_count as f64
            + ch.omega.abs() * self.n_atoms as f64
    }

    /// Dense matrix of H at these channel values.
    pub fn assemble_dense(&self, ch: &EffectiveChannels) -> ndarray::Array2<C64> {
        let mut h = ndarray::Array2::<C64>::zeros((self.dim, self.dim));
        for s in 0..self.dim {
            h[[s, s]] = C64::new(self.diag_at(ch, s), 0.0);
            if ch.omega != 0.0 {
                for &mask in &self.flips {
                    h[[s ^ mask, s]] += C64::new(ch.omega, 0.0);
                }
            }
        }
        h
    }

    /// out = H * m, row-wise.
    pub fn apply_matrix(
        &self,
        ch: &EffectiveChannels,
        m: &ndarray::Array2<C64>,
        out: &mut ndarray::Array2<C64>,
    ) {
        for s in 0..self.dim {
            let diag = C64::new(self.diag_at(ch, s), 0.0);
            let src = m.row(s);
            let mut dst = out.row_mut(s);
            dst.assign(&src);
            dst.mapv_inplace(|z| z * diag);
        }
        if ch.omega != 0.0 {
            let omega = C64::new(ch.omega, 0.0);
            for &mask in &self.flips {
                for s in 0..self.dim {
                    let src = m.row(s ^ mask).to_owned();
                    let mut dst = out.row_mut(s);
                    dst.scaled_add(omega, &src);
                }
            }
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub(crate) struct EffectiveChannels {
    pub omega: f64,
    pub delta_global: f64,
    pub delta_local: f64,
}

/// Scratch buffers for the Taylor exponential.
pub(crate) struct ExpWork {
    term: Array1<C64>,
    htermaction: Array1<C64>,
    acc: Array1<C64>,
}

impl ExpWork {
    pub fn new(dim: usize) -> Self {
        ExpWork {
            term: Array1::zeros(dim),
            htermaction: Array1::zeros(dim),
            acc: Array1::zeros(dim),
        }
    }
}

fn linf(v: &Array1<C64>) -> f64 {
    v.iter()
        .map(|z| z.re.abs() + z.im.abs())
        .fold(0.0, f64::max)
}

/// psi <- exp(-i tau H(ch)) psi, exact to machine precision.
///
/// The anti-Hermitian exponent is split into blocks of norm <= 1 and each
/// block is summed by its Taylor series, applied matrix-free to the state.
pub(crate) fn expm_apply(
    sys: &SystemOp,
    ch: &EffectiveChannels,
    tau: f64,
    psi: &mut Array1<C64>,
    work: &mut ExpWork,
) {
    const MAX_TERMS: usize = 64;
    let bound = sys.norm_bound(ch) * tau.abs();
    let blocks = bound.ceil().max(1.0) as usize;
    let tau_block = tau / blocks as f64;
    for _ in 0..blocks {
        work.acc.assign(psi);
        work.term.assign(psi);
        for k in 1..=MAX_TERMS {
            sys.apply(ch, &work.term, &mut work.htermaction);
            let factor = C64::new(0.0, -tau_block / k as f64);
            ndarray::Zip::from(&mut work.term)
                .and(&work.htermaction)
                .for_each(|t, h| *t = h * factor);
            work.acc += &work.term;
            if linf(&work.term) <= 1e-16 * linf(&work.acc) {
                break;
            }
        }
        psi.assign(&work.acc);
    }
}

fn rk4_step(
    sys: &SystemOp,
    sched: &PulseSchedule,
    decay_half: Option<&[f64]>,
    t: f64,
    tau: f64,
    psi: &mut Array1<C64>,
) {
    let deriv = |time: f64, state: &Array1<C64>| -> Array1<C64> {
        let ch = sys.channels_at(sched, time);
        let mut out = Array1::zeros(sys.dim);
        sys.apply(&ch, state, &mut out);
        out.mapv_inplace(|z| z * C64::new(0.0, -1.0));
        if let Some(decay) = decay_half {
            for (s, o) in out.iter_mut().enumerate() {
                *o -= state[s] * decay[s];
            }
        }
        out
    };
    let k1 = deriv(t, psi);
    let k2 = deriv(t + tau / 2.0, &(&*psi + &(&k1 * C64::new(tau / 2.0, 0.0))));
    let k3 = deriv(t + tau / 2.0, &(&*psi + &(&k2 * C64::new(tau / 2.0, 0.0))));
    let k4 = deriv(t + tau, &(&*psi + &(&k3 * C64::new(tau, 0.0))));
    let sixth = C64::new(tau / 6.0, 0.0);
    *psi += &((&k1 + &(&k2 * C64::new(2.0, 0.0))) * sixth);
    *psi += &((&(&k3 * C64::new(2.0, 0.0)) + &k4) * sixth);
}

/// One boundary of the substep walk, with the snapshot indices that land on it.
struct Boundary {
    t: f64,
    snaps: Vec<usize>,
}

fn build_partition(
    sched: &PulseSchedule,
    t0: f64,
    t1: f64,
    snapshots: &[f64],
) -> Result<Vec<Boundary>> {
    const EPS: f64 = 1e-12;
    for &s in snapshots {
        if s < t0 - EPS || s > t1 + EPS {
            return Err(Error::TimeOutOfRange { t: s, max: t1 });
        }
    }
    let mut pts: Vec<f64> = vec![t0, t1];
    pts.extend(
        sched
            .breakpoints()
            .into_iter()
            .filter(|t| *t > t0 + EPS && *t < t1 - EPS),
    );
    pts.extend(snapshots.iter().map(|s| s.clamp(t0, t1)));
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup_by(|a, b| (*a - *b).abs() < EPS);
    let mut boundaries: Vec<Boundary> = pts
        .into_iter()
        .map(|t| Boundary {
            t,
            snaps: Vec::new(),
        })
        .collect();
    for (idx, &s) in snapshots.iter().enumerate() {
        let s = s.clamp(t0, t1);
        let b = boundaries
            .iter_mut()
            .min_by(|a, b| (a.t - s).abs().partial_cmp(&(b.t - s).abs()).unwrap())
            .unwrap();
        b.snaps.push(idx);
    }
    Ok(boundaries)
}

pub(crate) struct JumpState {
    pub threshold: f64,
}

impl JumpState {
    pub fn fresh(rng: &mut ChaCha8Rng) -> Self {
        JumpState {
            threshold: rng.random::<f64>(),
        }
    }
}

pub(crate) enum WalkMode<'a> {
    Unitary,
    Jump {
        decay: &'a [f64],
        jumps: &'a JumpOperatorSet,
        rng: &'a mut ChaCha8Rng,
        state: &'a mut JumpState,
    },
}

/// Propagate a set of states from t0 to t1 under the schedule, invoking
/// `on_snapshot(snapshot_index, states)` at each requested time. Jump mode
/// expects exactly one state.
#[allow(clippy::too_many_arguments)]
pub(crate) fn walk(
    states: &mut [Array1<C64>],
    sys: &SystemOp,
    sched: &PulseSchedule,
    cfg: &PropagatorConfig,
    t0: f64,
    t1: f64,
    snapshots: &[f64],
    mode: &mut WalkMode<'_>,
    on_snapshot: &mut dyn FnMut(usize, &[Array1<C64>]),
) -> Result<()> {
    if matches!(mode, WalkMode::Jump { .. }) {
        assert_eq!(states.len(), 1, "jump mode propagates one state");
    }
    let boundaries = build_partition(sched, t0, t1, snapshots)?;
    let mut work = ExpWork::new(sys.dim);
    for &snap in &boundaries[0].snaps {
        on_snapshot(snap, states);
    }
    for pair in boundaries.windows(2) {
        let (a, b) = (pair[0].t, pair[1].t);
        let span = b - a;
        let n_sub = ((span / cfg.dt_us) - 1e-9).ceil().max(1.0) as usize;
        let tau = span / n_sub as f64;
        for k in 0..n_sub {
            let t_mid = a + (k as f64 + 0.5) * tau;
            let t_start = a + k as f64 * tau;
            match mode {
                WalkMode::Unitary => {
                    let ch = sys.channels_at(sched, t_mid);
                    for psi in states.iter_mut() {
                        match cfg.method {
                            PropagationMethod::ExactExpm => {
                                expm_apply(sys, &ch, tau, psi, &mut work)
                            }
                            PropagationMethod::RungeKutta4 => {
                                rk4_step(sys, sched, None, t_start, tau, psi)
                            }
                        }
                    }
                }
                WalkMode::Jump {
                    decay,
                    jumps,
                    rng,
                    state,
                } => {
                    let psi = &mut states[0];
                    match cfg.method {
                        PropagationMethod::ExactExpm => {
                            // Strang split: the amplitude decay rate is
                            // Gamma/2, so each half-step applies exp(-Gamma tau/4).
                            for (s, z) in psi.iter_mut().enumerate() {
                                *z *= (-decay[s] * tau / 4.0).exp();
                            }
                            let ch = sys.channels_at(sched, t_mid);
                            expm_apply(sys, &ch, tau, psi, &mut work);
                            for (s, z) in psi.iter_mut().enumerate() {
                                *z *= (-decay[s] * tau / 4.0).exp();
                            }
                        }
                        PropagationMethod::RungeKutta4 => {
                            let decay_half: Vec<f64> = decay.iter().map(|g| g / 2.0).collect();
                            rk4_step(sys, sched, Some(&decay_half), t_start, tau, psi);
                        }
                    }
                    let norm_sq: f64 = psi.iter().map(|z| z.norm_sqr()).sum();
                    if norm_sq <= state.threshold {
                        apply_jump(psi, jumps, sys.n_atoms, norm_sq, rng);
                        state.threshold = rng.random::<f64>();
                    }
                }
            }
        }
        for &snap in &pair[1].snaps {
            on_snapshot(snap, states);
        }
    }
    Ok(())
}

fn site_occupation_weight(psi: &Array1<C64>, site: usize, n_atoms: usize) -> f64 {
    psi.iter()
        .enumerate()
        .filter(|(s, _)| bit_of(*s, site, n_atoms) == 1)
        .map(|(_, z)| z.norm_sqr())
        .sum()
}

fn apply_jump(
    psi: &mut Array1<C64>,
    jumps: &JumpOperatorSet,
    n_atoms: usize,
    norm_sq: f64,
    rng: &mut ChaCha8Rng,
) {
    // Channel weights <psi| c^dag c |psi> on the pre-jump state.
    let weights: Vec<f64> = jumps
        .channels
        .iter()
        .map(|ch| match ch.kind {
            JumpKind::DepolCombined => 3.0 * ch.rate * norm_sq,
            JumpKind::DepolX | JumpKind::DepolY | JumpKind::DepolZ => ch.rate * norm_sq,
            JumpKind::GroundToRydberg => {
                ch.rate * (norm_sq - site_occupation_weight(psi, ch.site, n_atoms))
            }
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let mut pick = rng.random::<f64>() * total;
    let mut chosen = jumps.channels.len() - 1;
    for (i, w) in weights.iter().enumerate() {
        if pick < *w {
            chosen = i;
            break;
        }
        pick -= w;
    }
    let ch = jumps.channels[chosen];
    let mask = flip_mask(ch.site, n_atoms);
    let dim = psi.len();
    for s0 in 0..dim {
        if s0 & mask != 0 {
            continue;
        }
        let s1 = s0 | mask;
        let a0 = psi[s0];
        let a1 = psi[s1];
        let (b0, b1) = match ch.kind {
            // X + Y + Z = [[1, 1-i], [1+i, -1]]
            JumpKind::DepolCombined => {
                (a0 + a1 * C64::new(1.0, -1.0), a0 * C64::new(1.0, 1.0) - a1)
            }
            JumpKind::DepolX => (a1, a0),
            JumpKind::DepolY => (a1 * C64::new(0.0, -1.0), a0 * C64::new(0.0, 1.0)),
            JumpKind::DepolZ => (a0, -a1),
            JumpKind::GroundToRydberg => (C64::new(0.0, 0.0), a0),
        };
        psi[s0] = b0;
        psi[s1] = b1;
    }
    let norm: f64 = psi.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    let inv = C64::new(1.0 / norm, 0.0);
    psi.mapv_inplace(|z| z * inv);
}

fn check_inputs(
    geom: &AtomGeometry,
    sched: &PulseSchedule,
    profile: &HardwareProfile,
    cfg: &PropagatorConfig,
    t_final: f64,
) -> Result<()> {
    validate_schedule(sched, profile).into_result()?;
    let report = geom.validate(profile);
    report.into_result()?;
    if !(0.0..=sched.total_time_us + 1e-12).contains(&t_final) {
        return Err(Error::TimeOutOfRange {
            t: t_final,
            max: sched.total_time_us,
        });
    }
    if let Some(shortest) = sched.shortest_segment() {
        if cfg.dt_us <= 0.0 || cfg.dt_us > shortest + 1e-12 {
            return Err(Error::BadSubstep {
                dt: cfg.dt_us,
                shortest,
            });
        }
    } else if cfg.dt_us <= 0.0 {
        return Err(Error::BadSubstep {
            dt: cfg.dt_us,
            shortest: f64::INFINITY,
        });
    }
    Ok(())
}

/// U(t_final, 0) |psi>, with norm drift below the configured tolerance.
pub fn evolve_unitary(
    state: &StateVector,
    geom: &AtomGeometry,
    sched: &PulseSchedule,
    profile: &HardwareProfile,
    cfg: &PropagatorConfig,
    t_final: f64,
) -> Result<StateVector> {
    let snaps = evolve_unitary_snapshots(state, geom, sched, profile, cfg, &[t_final])?;
    Ok(snaps.into_iter().next().unwrap())
}

/// Unitary propagation with intermediate states captured at the requested
/// (sorted or unsorted) times in [0, total_time].
pub fn evolve_unitary_snapshots(
    state: &StateVector,
    geom: &AtomGeometry,
    sched: &PulseSchedule,
    profile: &HardwareProfile,
    cfg: &PropagatorConfig,
    times: &[f64],
) -> Result<Vec<StateVector>> {
    let t_final = times.iter().cloned().fold(0.0, f64::max);
    check_inputs(geom, sched, profile, cfg, t_final)?;
    let local_mask = sched.delta_local.as_ref().map(|l| l.site_mask.as_slice());
    let sys = SystemOp::new(geom, local_mask, profile)?;
    if sys.dim != state.dim() {
        return Err(Error::DimensionMismatch {
            left: state.dim(),
            right: sys.dim,
        });
    }
    let mut states = vec![state.amplitudes().clone()];
    let mut out: Vec<Option<StateVector>> = vec![None; times.len()];
    let n = state.n_atoms();
    walk(
        &mut states,
        &sys,
        sched,
        cfg,
        0.0,
        t_final,
        times,
        &mut WalkMode::Unitary,
        &mut |idx, st| {
            out[idx] = Some(StateVector::from_amplitudes(n, st[0].clone()).unwrap());
        },
    )?;
    let final_norm: f64 = states[0].iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    let drift = (final_norm - 1.0).abs();
    if drift > cfg.norm_tolerance {
        return Err(Error::NormDrift {
            drift,
            tolerance: cfg.norm_tolerance,
        });
    }
    Ok(out.into_iter().map(Option::unwrap).collect())
}

/// Quenched-noise draws for one trajectory, in a fixed order.
pub(crate) struct StaticDraws {
    pub delta_offset: f64,
    pub omega_scale: f64,
    pub geometry: AtomGeometry,
}

pub(crate) fn draw_static_noise(
    geom: &AtomGeometry,
    noise: &NoiseModel,
    rng: &mut ChaCha8Rng,
) -> StaticDraws {
    let n_delta = Normal::new(0.0, noise.delta_detuning_sigma).unwrap();
    let n_omega = Normal::new(1.0, noise.relative_rabi_sigma).unwrap();
    let n_pos = Normal::new(0.0, noise.position_sigma_um).unwrap();
    let delta_offset = n_delta.sample(rng);
    let omega_scale = n_omega.sample(rng);
    let mut geometry = geom.clone();
    for pos in geometry.positions_um.iter_mut() {
        pos[0] += n_pos.sample(rng);
        pos[1] += n_pos.sample(rng);
    }
    StaticDraws {
        delta_offset,
        omega_scale,
        geometry,
    }
}

/// One Monte-Carlo wavefunction sample of the Lindblad dynamics, returned
/// normalized. With all rates and spreads zero this reproduces
/// `evolve_unitary` bit for bit on the same substep grid.
pub fn evolve_trajectory(
    state: &StateVector,
    geom: &AtomGeometry,
    sched: &PulseSchedule,
    profile: &HardwareProfile,
    cfg: &PropagatorConfig,
    noise: &NoiseModel,
    rng_seed: u64,
) -> Result<StateVector> {
    let snaps = evolve_trajectory_snapshots(
        state,
        geom,
        sched,
        profile,
        cfg,
        noise,
        rng_seed,
        &[sched.total_time_us],
    )?;
    Ok(snaps.into_iter().next().unwrap())
}

/// Trajectory propagation with normalized snapshots at the requested times.
#[allow(clippy::too_many_arguments)]
pub fn evolve_trajectory_snapshots(
    state: &StateVector,
    geom: &AtomGeometry,
    sched: &PulseSchedule,
    profile: &HardwareProfile,
    cfg: &PropagatorConfig,
    noise: &NoiseModel,
    rng_seed: u64,
    times: &[f64],
) -> Result<Vec<StateVector>> {
    let t_final = times.iter().cloned().fold(0.0, f64::max);
    check_inputs(geom, sched, profile, cfg, t_final)?;
    noise.validate()?;
    let mut rng = rng_from_seed(rng_seed);
    let draws = draw_static_noise(geom, noise, &mut rng);
    let local_mask = sched.delta_local.as_ref().map(|l| l.site_mask.as_slice());
    let mut sys = SystemOp::new(&draws.geometry, local_mask, profile)?;
    sys.delta_offset = draws.delta_offset;
    sys.omega_scale = draws.omega_scale;
    if sys.dim != state.dim() {
        return Err(Error::DimensionMismatch {
            left: state.dim(),
            right: sys.dim,
        });
    }
    let jumps = JumpOperatorSet::build(noise, sys.n_atoms)?;
    let n = state.n_atoms();
    let mut states = vec![state.amplitudes().clone()];
    let mut out: Vec<Option<StateVector>> = vec![None; times.len()];
    if noise.is_quiet() {
        // No jump channels: the dynamics is unitary under the (possibly
        // jittered) Hamiltonian, so reuse the unitary path unchanged. This
        // keeps the zero-noise trajectory bit-for-bit equal to
        // `evolve_unitary` on the same substep grid.
        walk(
            &mut states,
            &sys,
            sched,
            cfg,
            0.0,
            t_final,
            times,
            &mut WalkMode::Unitary,
            &mut |idx, st| {
                out[idx] = Some(StateVector::from_amplitudes(n, st[0].clone()).unwrap());
            },
        )?;
    } else {
        let decay = jumps.decay_diagonal(sys.n_atoms);
        let mut jump_state = JumpState::fresh(&mut rng);
        let mut jump_rng = rng;
        walk(
            &mut states,
            &sys,
            sched,
            cfg,
            0.0,
            t_final,
            times,
            &mut WalkMode::Jump {
                decay: &decay,
                jumps: &jumps,
                rng: &mut jump_rng,
                state: &mut jump_state,
            },
            &mut |idx, st| {
                let mut sv = StateVector::from_amplitudes(n, st[0].clone()).unwrap();
                sv.normalize();
                out[idx] = Some(sv);
            },
        )?;
    }
    Ok(out.into_iter().map(Option::unwrap).collect())
}

fn channels_constant_on(sched: &PulseSchedule, a: f64, b: f64) -> bool {
    sched.omega_global.constant_on(a, b)
        && sched.delta_global.constant_on(a, b)
        && sched
            .delta_local
            .as_ref()
            .is_none_or(|l| l.waveform.constant_on(a, b))
}

/// Propagate the full unitary U(t, t0) and hand out snapshots.
///
/// Segments on which every channel is constant are exponentiated in a single
/// step through the Hermitian eigendecomposition (the substep product
/// collapses exactly there); time-varying segments are stepped with the same
/// midpoint exponential as the state path, applied to the whole matrix.
pub(crate) fn propagate_unitary_matrix(
    sys: &SystemOp,
    sched: &PulseSchedule,
    cfg: &PropagatorConfig,
    t0: f64,
    t1: f64,
    snapshots: &[f64],
    on_snapshot: &mut dyn FnMut(usize, &ndarray::Array2<C64>),
) -> Result<()> {
    use ndarray_linalg::{Eigh, UPLO};
    let boundaries = build_partition(sched, t0, t1, snapshots)?;
    let dim = sys.dim;
    let mut u = ndarray::Array2::<C64>::eye(dim);
    for &snap in &boundaries[0].snaps {
        on_snapshot(snap, &u);
    }
    let mut term = ndarray::Array2::<C64>::zeros((dim, dim));
    let mut hterm = ndarray::Array2::<C64>::zeros((dim, dim));
    for pair in boundaries.windows(2) {
        let (a, b) = (pair[0].t, pair[1].t);
        let span = b - a;
        if channels_constant_on(sched, a, b) {
            let ch = sys.channels_at(sched, a + span / 2.0);
            let h = sys.assemble_dense(&ch);
            let (energies, vectors) = h
                .eigh(UPLO::Lower)
                .map_err(|e| Error::Linalg(e.to_string()))?;
            // U_seg = V exp(-i E span) V^dag
            let mut scaled = vectors.clone();
            for (col, e) in energies.iter().enumerate() {
                let phase = C64::new(0.0, -e * span).exp();
                scaled.column_mut(col).mapv_inplace(|z| z * phase);
            }
            let vdag = vectors.t().mapv(|z| z.conj());
            let u_seg = scaled.dot(&vdag);
            u = u_seg.dot(&u);
        } else {
            let n_sub = ((span / cfg.dt_us) - 1e-9).ceil().max(1.0) as usize;
            let tau = span / n_sub as f64;
            for k in 0..n_sub {
                let t_mid = a + (k as f64 + 0.5) * tau;
                let ch = sys.channels_at(sched, t_mid);
                let bound = sys.norm_bound(&ch) * tau;
                let blocks = bound.ceil().max(1.0) as usize;
                let tau_block = tau / blocks as f64;
                for _ in 0..blocks {
                    term.assign(&u);
                    let mut acc = u.clone();
                    for j in 1..=64 {
                        sys.apply_matrix(&ch, &term, &mut hterm);
                        let factor = C64::new(0.0, -tau_block / j as f64);
                        ndarray::Zip::from(&mut term)
                            .and(&hterm)
                            .for_each(|t, h| *t = h * factor);
                        acc += &term;
                        let tnorm = term
                            .iter()
                            .map(|z| z.re.abs() + z.im.abs())
                            .fold(0.0, f64::max);
                        let anorm = acc
                            .iter()
                            .map(|z| z.re.abs() + z.im.abs())
                            .fold(0.0, f64::max);
                        if tnorm <= 1e-16 * anorm {
                            break;
                        }
                    }
                    u = acc;
                }
            }
        }
        for &snap in &pair[1].snaps {
            on_snapshot(snap, &u);
        }
    }
    Ok(())
}

/// Sample mean and standard error of the mean over trajectory results.
pub fn trajectory_average(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::TooFewValues {
            needed: 2,
            got: values.len(),
        });
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pulse::{LocalDetuning, Waveform};
    use approx::assert_abs_diff_eq;
    use std::f64::consts::TAU;

    fn rabi_schedule(omega: f64, t: f64) -> PulseSchedule {
        PulseSchedule::constant_drive(omega, 0.0, t)
    }

    #[test]
    fn single_atom_rabi_matches_closed_form() {
        // H = Omega X: P1(t) = sin^2(Omega t).
        let geom = AtomGeometry::chain(1, 9.5);
        let profile = HardwareProfile::default();
        let omega = TAU * 2.5;
        let sched = rabi_schedule(omega, 0.06);
        let cfg = PropagatorConfig::default();
        let out =
            evolve_unitary(&StateVector::ground(1), &geom, &sched, &profile, &cfg, 0.05).unwrap();
        let p1 = out.amplitudes()[1].norm_sqr();
        assert_abs_diff_eq!(p1, (omega * 0.05).sin().powi(2), epsilon = 1e-9);
        assert_abs_diff_eq!(p1, 0.5, epsilon = 1e-6);
    }

    #[test]
    fn zero_time_evolution_is_identity() {
        let geom = AtomGeometry::chain(2, 9.5);
        let profile = HardwareProfile::default();
        let sched = rabi_schedule(TAU * 2.5, 1.0);
        let st = StateVector::ground(2);
        let out = evolve_unitary(
            &st,
            &geom,
            &sched,
            &profile,
            &PropagatorConfig::default(),
            0.0,
        )
        .unwrap();
        assert_eq!(out.amplitudes(), st.amplitudes());
    }

    #[test]
    fn norm_is_preserved_over_full_duration() {
        let geom = AtomGeometry::chain(3, 9.5);
        let profile = HardwareProfile::default();
        let sched = PulseSchedule {
            omega_global: Waveform::new(vec![(0.0, 0.0), (0.05, TAU * 2.5), (4.0, TAU * 2.5)])
                .unwrap(),
            delta_global: Waveform::new(vec![(0.0, 0.0), (2.0, TAU * 1.5), (4.0, -TAU * 1.0)])
                .unwrap(),
            delta_local: None,
            total_time_us: 4.0,
        };
        let out = evolve_unitary(
            &StateVector::ground(3),
            &geom,
            &sched,
            &profile,
            &PropagatorConfig::default(),
            4.0,
        )
        .unwrap();
        assert!((out.norm() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn midpoint_rule_gains_at_least_fourfold_per_dt_halving() {
        // Fidelity deficit against a much finer reference must shrink by >= 4x
        // when dt is halved (second-order accurate stepping on ramps).
        let geom = AtomGeometry::chain(2, 9.5);
        let profile = HardwareProfile::default();
        let sched = PulseSchedule {
            omega_global: Waveform::new(vec![(0.0, 0.0), (0.25, TAU * 2.5), (0.5, TAU * 0.5)])
                .unwrap(),
            delta_global: Waveform::new(vec![(0.0, -TAU * 4.0), (0.5, TAU * 6.0)]).unwrap(),
            delta_local: None,
            total_time_us: 0.5,
        };
        let run = |dt: f64| {
            let cfg = PropagatorConfig {
                dt_us: dt,
                ..Default::default()
            };
            evolve_unitary(&StateVector::ground(2), &geom, &sched, &profile, &cfg, 0.5).unwrap()
        };
        let reference = run(2.5e-4);
        let deficit = |st: &StateVector| {
            let overlap: C64 = st
                .amplitudes()
                .iter()
                .zip(reference.amplitudes().iter())
                .map(|(a, b)| a.conj() * b)
                .sum();
            1.0 - overlap.norm()
        };
        let coarse = deficit(&run(1.6e-2));
        let fine = deficit(&run(8e-3));
        assert!(
            coarse / fine >= 4.0,
            "coarse = {coarse:.3e}, fine = {fine:.3e}, ratio = {}",
            coarse / fine
        );
    }

    #[test]
    fn energy_is_conserved_on_constant_segments() {
        let geom = AtomGeometry::chain(2, 9.5);
        let profile = HardwareProfile::default();
        let sched = PulseSchedule::constant_drive(TAU * 2.5, TAU * 1.5, 1.0);
        let cfg = PropagatorConfig::default();
        let start = {
            // Kick under a different drive first so <H> is far from zero.
            let kick = PulseSchedule::constant_drive(TAU * 2.0, -TAU * 3.0, 0.2);
            evolve_unitary(&StateVector::ground(2), &geom, &kick, &profile, &cfg, 0.17).unwrap()
        };
        let h = crate::pulse::build_hamiltonian(&geom, &sched, &profile, 0.5).unwrap();
        let e0 = crate::quantum::expectation(&start, &h).unwrap();
        let later = evolve_unitary(&start, &geom, &sched, &profile, &cfg, 0.8).unwrap();
        let e1 = crate::quantum::expectation(&later, &h).unwrap();
        assert!((e1 - e0).abs() / e0.abs() < 1e-6, "e0={e0}, e1={e1}");
    }

    #[test]
    fn rk4_matches_exponential_on_short_run() {
        let geom = AtomGeometry::chain(2, 9.5);
        let profile = HardwareProfile::default();
        let sched = PulseSchedule::constant_drive(TAU * 2.5, TAU * 1.0, 0.1);
        let exp_cfg = PropagatorConfig::default();
        let rk_cfg = PropagatorConfig {
            method: PropagationMethod::RungeKutta4,
            dt_us: 1e-4,
            ..Default::default()
        };
        let a = evolve_unitary(
            &StateVector::ground(2),
            &geom,
            &sched,
            &profile,
            &exp_cfg,
            0.1,
        )
        .unwrap();
        let b = evolve_unitary(
            &StateVector::ground(2),
            &geom,
            &sched,
            &profile,
            &rk_cfg,
            0.1,
        )
        .unwrap();
        for (x, y) in a.amplitudes().iter().zip(b.amplitudes().iter()) {
            assert!((x - y).norm() < 1e-8);
        }
    }

    #[test]
    fn bad_substep_is_rejected() {
        let geom = AtomGeometry::chain(1, 9.5);
        let profile = HardwareProfile::default();
        let sched = PulseSchedule {
            omega_global: Waveform::new(vec![(0.0, 0.0), (0.05, TAU * 2.5), (1.0, TAU * 2.5)])
                .unwrap(),
            delta_global: Waveform::constant(0.0, 1.0),
            delta_local: None,
            total_time_us: 1.0,
        };
        let cfg = PropagatorConfig {
            dt_us: 0.1,
            ..Default::default()
        };
        assert!(matches!(
            evolve_unitary(&StateVector::ground(1), &geom, &sched, &profile, &cfg, 1.0),
            Err(Error::BadSubstep { .. })
        ));
    }

    #[test]
    fn noiseless_trajectory_is_bitwise_equal_to_unitary() {
        let geom = AtomGeometry::chain(2, 9.5);
        let profile = HardwareProfile::default();
        let sched = PulseSchedule {
            omega_global: Waveform::new(vec![(0.0, 0.0), (0.05, TAU * 2.5), (0.8, TAU * 2.5)])
                .unwrap(),
            delta_global: Waveform::new(vec![(0.0, 0.0), (0.4, TAU * 2.0), (0.8, 0.0)]).unwrap(),
            delta_local: None,
            total_time_us: 0.8,
        };
        let cfg = PropagatorConfig::default();
        let unitary =
            evolve_unitary(&StateVector::ground(2), &geom, &sched, &profile, &cfg, 0.8).unwrap();
        let traj = evolve_trajectory(
            &StateVector::ground(2),
            &geom,
            &sched,
            &profile,
            &cfg,
            &NoiseModel::none(),
            123,
        )
        .unwrap();
        assert_eq!(unitary.amplitudes(), traj.amplitudes());
    }

    #[test]
    fn app_a_noise_configuration_parses_and_runs() {
        let noise = NoiseModel {
            n_trajectories: 4,
            ..NoiseModel::app_a_low()
        };
        assert_abs_diff_eq!(noise.gamma_depol, 0.05);
        assert_abs_diff_eq!(noise.gamma_rg, 0.03);
        assert_abs_diff_eq!(noise.delta_detuning_sigma, TAU * 0.18);
        assert_abs_diff_eq!(noise.relative_rabi_sigma, 0.018);
        assert_abs_diff_eq!(noise.position_sigma_um, 0.05);
        let geom = AtomGeometry::chain(2, 9.5);
        let profile = HardwareProfile::default();
        let sched = PulseSchedule::constant_drive(TAU * 2.5, 0.0, 0.2);
        for seed in 0..4 {
            let st = evolve_trajectory(
                &StateVector::ground(2),
                &geom,
                &sched,
                &profile,
                &PropagatorConfig::default(),
                &noise,
                seed,
            )
            .unwrap();
            assert!((st.norm() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn pump_channel_relaxation_matches_two_level_lindblad() {
        // H = 0, c = sqrt(gamma)|1><0|: <n>(t) = 1 - exp(-gamma t).
        let geom = AtomGeometry::chain(1, 9.5);
        let profile = HardwareProfile::default();
        let gamma = 0.8;
        let t_final = 1.5;
        let sched = PulseSchedule::constant_drive(0.0, 0.0, t_final);
        let noise = NoiseModel {
            gamma_rg: gamma,
            n_trajectories: 400,
            ..NoiseModel::none()
        };
        let cfg = PropagatorConfig {
            dt_us: 5e-3,
            ..Default::default()
        };
        let values: Vec<f64> = (0..400)
            .map(|k| {
                let st = evolve_trajectory(
                    &StateVector::ground(1),
                    &geom,
                    &sched,
                    &profile,
                    &cfg,
                    &noise,
                    k,
                )
                .unwrap();
                st.occupation_expectations()[0]
            })
            .collect();
        let (mean, sem) = trajectory_average(&values).unwrap();
        let analytic = 1.0 - (-gamma * t_final).exp();
        assert!(
            (mean - analytic).abs() < 3.0 * sem.max(1e-3),
            "mean = {mean}, analytic = {analytic}, sem = {sem}"
        );
    }

    #[test]
    fn trajectory_average_examples() {
        let (m, s) = trajectory_average(&[0.7, 0.7, 0.7]).unwrap();
        assert_abs_diff_eq!(m, 0.7);
        assert_abs_diff_eq!(s, 0.0);
        let (m, s) = trajectory_average(&[0.0, 1.0]).unwrap();
        assert_abs_diff_eq!(m, 0.5);
        assert_abs_diff_eq!(s, 0.5);
        assert!(trajectory_average(&[1.0]).is_err());
    }

    #[test]
    fn boosted_site_doubles_local_rates() {
        let noise = NoiseModel {
            gamma_depol: 0.1,
            gamma_rg: 0.05,
            boosted_sites: vec![1],
            ..NoiseModel::none()
        };
        let set = JumpOperatorSet::build(&noise, 3).unwrap();
        assert_eq!(set.channels.len(), 6);
        let depol_site1 = set
            .channels
            .iter()
            .find(|c| c.site == 1 && c.kind == JumpKind::DepolCombined)
            .unwrap();
        assert_abs_diff_eq!(depol_site1.rate, 0.2);
        let depol_site0 = set
            .channels
            .iter()
            .find(|c| c.site == 0 && c.kind == JumpKind::DepolCombined)
            .unwrap();
        assert_abs_diff_eq!(depol_site0.rate, 0.1);
    }

    #[test]
    fn local_channel_enters_the_propagation() {
        let geom = AtomGeometry::chain(2, 9.5);
        let profile = HardwareProfile::default();
        let base = PulseSchedule::constant_drive(TAU * 1.0, 0.0, 0.3);
        let mut with_local = base.clone();
        with_local.delta_local = Some(LocalDetuning {
            site_mask: vec![false, true],
            waveform: Waveform::constant(TAU * 5.0, 0.3),
        });
        let cfg = PropagatorConfig::default();
        let a = evolve_unitary(&StateVector::ground(2), &geom, &base, &profile, &cfg, 0.3).unwrap();
        let b = evolve_unitary(
            &StateVector::ground(2),
            &geom,
            &with_local,
            &profile,
            &cfg,
            0.3,
        )
        .unwrap();
        let occ_a = a.occupation_expectations();
        let occ_b = b.occupation_expectations();
        assert!((occ_a[1] - occ_b[1]).abs() > 1e-3);
    }
}
