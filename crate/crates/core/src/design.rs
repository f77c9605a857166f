//! Randomized global-quench generation and second-moment diagnostics of how
//! well the resulting unitary ensemble approximates a 2-design.
//!
//! A quench fragment is ramp-up, alternating flat quench plateaus and linear
//! spacing transitions between consecutive plateau amplitudes, and ramp-down
//! to the requested end values. Plateau amplitudes are i.i.d. Gaussian draws
//! clipped to the hardware channel range.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::evolve::{evolve_unitary, PropagatorConfig};
use crate::pulse::{validate_schedule, AtomGeometry, HardwareProfile, PulseSchedule, Waveform};
use crate::quantum::{ProbabilityDistribution, StateVector};
use crate::rng::{rng_from_seed, stream_seed};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandomizedChannel {
    Detuning,
    Rabi,
    Both,
}

/// Parameters of the randomized quench stage. Angular frequencies in rad/us,
/// times in us.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuenchConfig {
    pub n_quench: usize,
    pub t_quench_us: f64,
    pub spacing_us: f64,
    pub ramp_time_us: f64,
    pub stage_budget_us: f64,
    /// Mean of the Gaussian amplitude distribution.
    pub gaussian_mean: f64,
    /// Standard deviation of the Gaussian amplitude distribution.
    pub gaussian_sigma: f64,
    pub channel: RandomizedChannel,
    /// Rabi amplitude held during the quench stage when the detuning channel
    /// is the randomized one; defaults to the experiment drive value.
    pub omega_quench: Option<f64>,
}

impl QuenchConfig {
    /// Defaults: 4 quenches of 0.1 us with 0.1 us spacing and 0.05 us ramps
    /// inside a 1.0 us budget; the randomized detuning is centered on half
    /// the channel maximum with sigma = mean / 2.
    pub fn default_for(profile: &HardwareProfile) -> Self {
        let mean = profile.delta_max / 2.0;
        QuenchConfig {
            n_quench: 4,
            t_quench_us: 0.1,
            spacing_us: 0.1,
            ramp_time_us: 0.05,
            stage_budget_us: 1.0,
            gaussian_mean: mean,
            gaussian_sigma: mean / 2.0,
            channel: RandomizedChannel::Detuning,
            omega_quench: None,
        }
    }

    /// Total fragment duration: ramp-up + plateaus + spacings + ramp-down.
    pub fn fragment_duration(&self) -> f64 {
        2.0 * self.ramp_time_us
            + self.n_quench as f64 * self.t_quench_us
            + self.n_quench.saturating_sub(1) as f64 * self.spacing_us
    }

    pub fn validate(&self) -> Result<()> {
        if self.gaussian_sigma < 0.0 {
            return Err(Error::NegativeSigma(self.gaussian_sigma));
        }
        if self.n_quench == 0
            || self.t_quench_us <= 0.0
            || self.ramp_time_us <= 0.0
            || (self.n_quench > 1 && self.spacing_us <= 0.0)
        {
            return Err(Error::Config(
                "quench stage needs n_quench >= 1, positive plateau and ramp times, \
                 and positive spacing when n_quench > 1"
                    .into(),
            ));
        }
        let needed = self.fragment_duration();
        if needed > self.stage_budget_us + 1e-12 {
            return Err(Error::QuenchBudget {
                needed,
                budget: self.stage_budget_us,
            });
        }
        Ok(())
    }

    fn resolve_omega_quench(&self, drive_omega: f64) -> f64 {
        self.omega_quench.unwrap_or(drive_omega)
    }
}

/// Channel values the fragment must reach at its end (the drive values when
/// the fragment is embedded in an experiment, zero when standalone).
#[derive(Copy, Clone, Debug, Default, PartialEq)]
pub struct FragmentTargets {
    pub omega_end: f64,
    pub delta_end: f64,
}

/// One realized random quench: the drawn plateau amplitudes and the schedule
/// fragment they induce.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuenchInstance {
    pub instance_id: usize,
    pub seed: u64,
    /// Plateau amplitudes of the randomized channel, rad/us.
    pub amplitudes: Vec<f64>,
    /// Secondary Rabi amplitudes when both channels are randomized.
    pub rabi_amplitudes: Option<Vec<f64>>,
}

impl QuenchInstance {
    /// Stable digest of the drawn amplitudes; equal hashes mean the two
    /// protocol branches share exactly the same quenches.
    pub fn fragment_hash(&self) -> u64 {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for a in &self.amplitudes {
            hasher.update(a.to_le_bytes());
        }
        if let Some(extra) = &self.rabi_amplitudes {
            for a in extra {
                hasher.update(a.to_le_bytes());
            }
        }
        let bytes: [u8; 32] = hasher.finalize().into();
        u64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// The set of N_U random quench instances drawn from one config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuenchEnsemble {
    pub config: QuenchConfig,
    pub instances: Vec<QuenchInstance>,
    /// Fraction of Gaussian draws clipped to the hardware channel range.
    pub clip_fraction: f64,
}

fn draw_clipped(
    rng: &mut impl Rng,
    dist: &Normal<f64>,
    lo: f64,
    hi: f64,
    n: usize,
    clipped: &mut usize,
) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let x = dist.sample(rng);
            if x < lo {
                *clipped += 1;
                lo
            } else if x > hi {
                *clipped += 1;
                hi
            } else {
                x
            }
        })
        .collect()
}

/// Draw N_U quench instances. Amplitudes are Normal(mean, sigma^2) clipped to
/// the channel range; instance seeds are derived from the master seed and are
/// pairwise distinct, so the ensemble is bitwise reproducible.
pub fn sample_ensemble(
    config: &QuenchConfig,
    n_instances: usize,
    master_seed: u64,
    profile: &HardwareProfile,
) -> Result<QuenchEnsemble> {
    config.validate()?;
    if n_instances == 0 {
        return Err(Error::EmptyEnsemble);
    }
    let dist = Normal::new(config.gaussian_mean, config.gaussian_sigma)
        .map_err(|e| Error::Config(format!("bad gaussian parameters: {e}")))?;
    let mut clipped = 0usize;
    let mut total_draws = 0usize;
    let mut instances = Vec::with_capacity(n_instances);
    for u in 0..n_instances {
        let seed = stream_seed(master_seed, "quench", &[u as u64]);
        let mut rng = rng_from_seed(seed);
        let (amplitudes, rabi_amplitudes) = match config.channel {
            RandomizedChannel::Detuning => {
                total_draws += config.n_quench;
                (
                    draw_clipped(
                        &mut rng,
                        &dist,
                        profile.delta_min,
                        profile.delta_max,
                        config.n_quench,
                        &mut clipped,
                    ),
                    None,
                )
            }
            RandomizedChannel::Rabi => {
                total_draws += config.n_quench;
                (
                    draw_clipped(
                        &mut rng,
                        &dist,
                        0.0,
                        profile.omega_max,
                        config.n_quench,
                        &mut clipped,
                    ),
                    None,
                )
            }
            RandomizedChannel::Both => {
                total_draws += 2 * config.n_quench;
                let delta = draw_clipped(
                    &mut rng,
                    &dist,
                    profile.delta_min,
                    profile.delta_max,
                    config.n_quench,
                    &mut clipped,
                );
                let rabi = draw_clipped(
                    &mut rng,
                    &dist,
                    0.0,
                    profile.omega_max,
                    config.n_quench,
                    &mut clipped,
                );
                (delta, Some(rabi))
            }
        };
        instances.push(QuenchInstance {
            instance_id: u,
            seed,
            amplitudes,
            rabi_amplitudes,
        });
    }
    Ok(QuenchEnsemble {
        config: config.clone(),
        instances,
        clip_fraction: clipped as f64 / total_draws as f64,
    })
}

/// Breakpoints of the randomized channel: ramp to the first plateau, flat
/// plateaus with linear transitions over the spacing intervals, final ramp to
/// `end`.
fn randomized_points(config: &QuenchConfig, amps: &[f64], end: f64) -> Vec<(f64, f64)> {
    let mut pts = vec![(0.0, 0.0)];
    let mut t = config.ramp_time_us;
    for (k, a) in amps.iter().enumerate() {
        if k > 0 {
            t += config.spacing_us;
        }
        pts.push((t, *a));
        t += config.t_quench_us;
        pts.push((t, *a));
    }
    pts.push((t + config.ramp_time_us, end));
    pts
}

fn held_points(total: f64, ramp: f64, hold: f64, start: f64, end: f64) -> Vec<(f64, f64)> {
    vec![
        (0.0, start),
        (ramp, hold),
        (total - ramp, hold),
        (total, end),
    ]
}

/// Build the schedule fragment realized by one instance.
pub fn instance_schedule(
    config: &QuenchConfig,
    instance: &QuenchInstance,
    drive_omega: f64,
    targets: FragmentTargets,
) -> Result<PulseSchedule> {
    let total = config.fragment_duration();
    let omega_q = config.resolve_omega_quench(drive_omega);
    let (omega_pts, delta_pts) = match config.channel {
        RandomizedChannel::Detuning => (
            held_points(total, config.ramp_time_us, omega_q, 0.0, targets.omega_end),
            randomized_points(config, &instance.amplitudes, targets.delta_end),
        ),
        RandomizedChannel::Rabi => (
            randomized_points(config, &instance.amplitudes, targets.omega_end),
            held_points(total, config.ramp_time_us, 0.0, 0.0, targets.delta_end),
        ),
        RandomizedChannel::Both => {
            let rabi = instance
                .rabi_amplitudes
                .as_ref()
                .ok_or_else(|| Error::Config("missing rabi amplitudes".into()))?;
            (
                randomized_points(config, rabi, targets.omega_end),
                randomized_points(config, &instance.amplitudes, targets.delta_end),
            )
        }
    };
    Ok(PulseSchedule {
        omega_global: Waveform::new(omega_pts)?,
        delta_global: Waveform::new(delta_pts)?,
        delta_local: None,
        total_time_us: total,
    })
}

/// Collision probability M2 = sum_s P(s)^2 of an exact distribution.
pub fn second_moment(probs: &ProbabilityDistribution) -> f64 {
    probs.probs().iter().map(|p| p * p).sum()
}

/// Unbiased collision estimator of M2 from measured bitstrings:
/// sum_s c_s (c_s - 1) / (N_S (N_S - 1)).
pub fn second_moment_from_shots(shots: &[String]) -> Result<f64> {
    if shots.len() < 2 {
        return Err(Error::TooFewValues {
            needed: 2,
            got: shots.len(),
        });
    }
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for s in shots {
        *counts.entry(s.as_str()).or_insert(0) += 1;
    }
    let n = shots.len() as f64;
    let collisions: f64 = counts.values().map(|c| (*c * (c - 1)) as f64).sum();
    Ok(collisions / (n * (n - 1.0)))
}

/// Haar expectation of the summed second moment sum_s P(s)^2 for a state of
/// purity Tr rho^2: (1 + Tr rho^2) / (D + 1).
pub fn haar_second_moment(dim: usize, purity: f64) -> Result<f64> {
    if dim < 2 || !(1.0 / dim as f64 - 1e-12..=1.0 + 1e-12).contains(&purity) {
        return Err(Error::BadPurity { dim, purity });
    }
    Ok((1.0 + purity) / (dim as f64 + 1.0))
}

/// Per-outcome normalization of the same Haar average,
/// (1 + Tr rho^2) / (D (D + 1)).
pub fn haar_second_moment_per_outcome(dim: usize, purity: f64) -> Result<f64> {
    Ok(haar_second_moment(dim, purity)? / dim as f64)
}

/// One row of the 2-design convergence scan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub n_quench: usize,
    pub m2_mean: f64,
    pub m2_haar: f64,
    pub abs_diff: f64,
    pub stderr: f64,
    pub n_instances: usize,
    pub seed: u64,
}

/// For each quench count: run the ensemble through unitary evolution from
/// |0...0>, compute M2 per instance, and compare the mean against the Haar
/// value. Error bars are the standard error of the mean over instances.
#[allow(clippy::too_many_arguments)]
pub fn convergence_scan(
    base: &QuenchConfig,
    n_quench_values: &[usize],
    n_instances: usize,
    geom: &AtomGeometry,
    profile: &HardwareProfile,
    cfg: &PropagatorConfig,
    drive_omega: f64,
    master_seed: u64,
) -> Result<Vec<ScanRow>> {
    if n_instances < 10 {
        return Err(Error::TooFewValues {
            needed: 10,
            got: n_instances,
        });
    }
    let dim = 1usize << geom.n_atoms();
    let m2_haar = haar_second_moment(dim, 1.0)?;
    let mut rows = Vec::with_capacity(n_quench_values.len());
    for &n_quench in n_quench_values {
        let config = QuenchConfig {
            n_quench,
            ..base.clone()
        };
        let scan_seed = stream_seed(master_seed, "scan", &[n_quench as u64]);
        let ensemble = sample_ensemble(&config, n_instances, scan_seed, profile)?;
        let m2s = instance_second_moments(&ensemble, geom, profile, cfg, drive_omega)?;
        let n = m2s.len() as f64;
        let mean = m2s.iter().sum::<f64>() / n;
        let var = m2s.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1.0);
        rows.push(ScanRow {
            n_quench,
            m2_mean: mean,
            m2_haar,
            abs_diff: (mean - m2_haar).abs(),
            stderr: (var / n).sqrt(),
            n_instances,
            seed: scan_seed,
        });
    }
    Ok(rows)
}

/// M2 of each instance's post-quench state, evolving |0...0> over the
/// standalone fragment.
pub fn instance_second_moments(
    ensemble: &QuenchEnsemble,
    geom: &AtomGeometry,
    profile: &HardwareProfile,
    cfg: &PropagatorConfig,
    drive_omega: f64,
) -> Result<Vec<f64>> {
    use rayon::prelude::*;
    let config = &ensemble.config;
    ensemble
        .instances
        .par_iter()
        .map(|instance| {
            let sched =
                instance_schedule(config, instance, drive_omega, FragmentTargets::default())
                    .map_err(|e| e.for_instance(instance.instance_id))?;
            validate_schedule(&sched, profile)
                .into_result()
                .map_err(|e| e.for_instance(instance.instance_id))?;
            let out = evolve_unitary(
                &StateVector::ground(geom.n_atoms()),
                geom,
                &sched,
                profile,
                cfg,
                sched.total_time_us,
            )
            .map_err(|e| e.for_instance(instance.instance_id))?;
            Ok(second_moment(&out.probabilities()))
        })
        .collect()
}
