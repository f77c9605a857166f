//! Protocol-level integration checks: estimator error scaling, shot-mode
//! convergence, and causal ordering of the oracle front.

use std::f64::consts::TAU;

use rydotoc::analysis::{arrival_times, Heatmap};
use rydotoc::design::QuenchConfig;
use rydotoc::evolve::PropagatorConfig;
use rydotoc::otoc::{
    exact_otoc_series, run_experiment, ButterflyOperator, DriveParams, HeisenbergConvention,
    OracleArgs, OtocExperiment,
};
use rydotoc::pulse::{AtomGeometry, HardwareProfile, PulseSchedule};

fn experiment(n_atoms: usize, n_instances: usize, seed: u64, grid: Vec<f64>) -> OtocExperiment {
    let profile = HardwareProfile::default();
    let quench = QuenchConfig {
        gaussian_mean: 0.0,
        gaussian_sigma: TAU * 10.0,
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
        time_grid_us: grid,
        n_instances,
        n_shots: 0,
        noise: None,
        master_seed: seed,
        propagator: PropagatorConfig::default(),
        persist_shots: false,
    }
}

#[test]
fn jackknife_errors_shrink_like_inverse_sqrt_ensemble_size() {
    // log stderr vs log N_U slope of -0.5 +- 0.1, averaged over sites and a
    // few master seeds to tame the noise of the error estimate itself.
    let sizes = [25usize, 50, 100, 200];
    let n_atoms = 3;
    let mut mean_log_err = Vec::new();
    for &n_u in &sizes {
        let mut acc = 0.0;
        let mut count = 0;
        for seed in [3u64, 5, 9] {
            let exp = experiment(n_atoms, n_u, seed, vec![0.6]);
            let (_, series) = run_experiment(&exp).unwrap();
            for i in 0..n_atoms {
                let se = series.stderr[[i, 0]];
                assert!(se > 0.0);
                acc += se.ln();
                count += 1;
            }
        }
        mean_log_err.push(acc / count as f64);
    }
    let xs: Vec<f64> = sizes.iter().map(|n| (*n as f64).ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = mean_log_err.iter().sum::<f64>() / n;
    let slope = xs
        .iter()
        .zip(&mean_log_err)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    assert!(
        (slope + 0.5).abs() <= 0.1,
        "log-log stderr slope = {slope:.3}, expected -0.5 +- 0.1"
    );
    println!("jackknife stderr log-log slope vs N_U: {slope:.3}");
}

#[test]
fn shot_mode_error_shrinks_with_shot_count() {
    // Finite-shot estimates approach the exact-expectation estimator as N_S
    // grows through {1e2, 1e3, 1e4} at a fixed seed family.
    let exact = experiment(2, 12, 21, vec![0.4]);
    let (_, exact_series) = run_experiment(&exact).unwrap();
    let mut errs = Vec::new();
    for n_shots in [100usize, 1_000, 10_000] {
        let shotty = OtocExperiment {
            n_shots,
            ..exact.clone()
        };
        let (_, series) = run_experiment(&shotty).unwrap();
        let err = (0..2)
            .map(|i| (series.otoc[[i, 0]] - exact_series.otoc[[i, 0]]).abs())
            .fold(0.0f64, f64::max);
        errs.push(err);
    }
    println!("shot-mode errors over N_S in {{100, 1000, 10000}}: {errs:?}");
    assert!(errs[2] < errs[0], "no shrink from 1e2 to 1e4: {errs:?}");
    assert!(errs[1] < errs[0] * 1.5, "no trend at 1e3: {errs:?}");
}

#[test]
fn oracle_front_arrivals_are_ordered_by_distance() {
    // Causality of the exact front: arrival times grow with distance from
    // the butterfly site.
    let n = 6;
    let geom = AtomGeometry::chain(n, 9.5);
    let profile = HardwareProfile::default();
    let sched = PulseSchedule::constant_drive(TAU * 2.5, TAU * 1.5, 3.0);
    let butterfly = ButterflyOperator::phase_pulse(n - 1, std::f64::consts::PI);
    let times: Vec<f64> = (0..=30).map(|k| k as f64 * 0.1).collect();
    let series = exact_otoc_series(
        &OracleArgs {
            geometry: &geom,
            schedule: &sched,
            profile: &profile,
            butterfly: &butterfly,
            propagator: &PropagatorConfig::default(),
            convention: HeisenbergConvention::Forward,
        },
        &times,
    )
    .unwrap();
    let hm = Heatmap::from_series(&series, None);
    let arrivals = arrival_times(&hm, 0.5).unwrap();
    let mut by_distance: Vec<(f64, f64)> = arrivals
        .iter()
        .filter(|a| !a.masked)
        .filter_map(|a| a.arrival_us.map(|t| (a.distance, t)))
        .collect();
    assert!(by_distance.len() >= 4, "too few crossings: {arrivals:?}");
    by_distance.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    // Monotone up to half a grid step; the chain-edge site can invert by a
    // few hundredths of a us through boundary reflections.
    for pair in by_distance.windows(2) {
        assert!(
            pair[1].1 >= pair[0].1 - 0.05,
            "arrival not monotone in distance: {by_distance:?}"
        );
    }
    println!("oracle arrivals by distance: {by_distance:?}");
}

#[test]
fn paired_branches_share_fragment_hashes() {
    let exp = experiment(2, 6, 33, vec![0.0, 0.3]);
    let (results, _) = run_experiment(&exp).unwrap();
    let ensemble = rydotoc::design::sample_ensemble(
        &exp.quench,
        exp.n_instances,
        exp.master_seed,
        &exp.profile,
    )
    .unwrap();
    for pair in results.chunks(2) {
        let inst = &ensemble.instances[pair[0].instance_id];
        assert_eq!(pair[0].amplitudes, inst.amplitudes);
        assert_eq!(pair[1].amplitudes, inst.amplitudes);
        assert_eq!(inst.fragment_hash(), inst.fragment_hash());
    }
}
