//! Python bindings: the state type plus the protocol entry points, taking
//! the same JSON config documents as the CLI and returning plain dicts.

use num_complex::Complex64 as C64;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rydotoc::analysis::{arrival_times, fit_lightcone, FitOrientation, Heatmap};
use rydotoc::config::{ExperimentConfigFile, ScanConfigFile};
use rydotoc::design::convergence_scan;
use rydotoc::evolve::{evolve_unitary, PropagatorConfig};
use rydotoc::otoc::{
    exact_otoc_series, run_experiment, HeisenbergConvention, OracleArgs, OtocSeries,
};
use rydotoc::pulse::{AtomGeometry, HardwareProfile, PulseSchedule};
use rydotoc::quantum;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Normalized pure state over the 2^N occupation basis (atom 0 is the most
/// significant bit).
#[pyclass(name = "StateVector", from_py_object)]
#[derive(Clone)]
struct PyStateVector {
    inner: quantum::StateVector,
}

#[pymethods]
impl PyStateVector {
    /// The all-ground state |0...0>.
    #[staticmethod]
    fn ground(n_atoms: usize) -> Self {
        PyStateVector {
            inner: quantum::StateVector::ground(n_atoms),
        }
    }

    #[staticmethod]
    fn from_amplitudes(n_atoms: usize, amplitudes: Vec<C64>) -> PyResult<Self> {
        let inner =
            quantum::StateVector::from_amplitudes(n_atoms, ndarray::Array1::from(amplitudes))
                .map_err(err)?;
        Ok(PyStateVector { inner })
    }

    #[getter]
    fn n_atoms(&self) -> usize {
        self.inner.n_atoms()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn amplitudes(&self) -> Vec<C64> {
        self.inner.amplitudes().to_vec()
    }

    fn probabilities(&self) -> Vec<f64> {
        self.inner.probabilities().probs().to_vec()
    }

    /// Per-site <n_i>.
    fn occupations(&self) -> Vec<f64> {
        self.inner.occupation_expectations()
    }

    fn normalize(&mut self) {
        self.inner.normalize();
    }

    fn norm(&self) -> f64 {
        self.inner.norm()
    }

    /// Deterministic bitstring samples from |amplitudes|^2.
    fn sample_shots(&self, n_shots: usize, seed: u64) -> PyResult<Vec<String>> {
        quantum::sample_shots(&self.inner, n_shots, seed).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "StateVector(n_atoms={}, dim={})",
            self.inner.n_atoms(),
            self.inner.dim()
        )
    }
}

/// Evolve a chain under a constant global drive for `t_us`; frequencies are
/// quoted as value/2pi in MHz.
#[pyfunction]
#[pyo3(signature = (state, spacing_um, omega_over_2pi_mhz, delta_over_2pi_mhz, t_us, dt_us=1e-3))]
fn evolve_constant_drive(
    state: &PyStateVector,
    spacing_um: f64,
    omega_over_2pi_mhz: f64,
    delta_over_2pi_mhz: f64,
    t_us: f64,
    dt_us: f64,
) -> PyResult<PyStateVector> {
    let geom = AtomGeometry::chain(state.inner.n_atoms(), spacing_um);
    let profile = HardwareProfile::default();
    let sched =
        PulseSchedule::constant_drive(TAU * omega_over_2pi_mhz, TAU * delta_over_2pi_mhz, t_us);
    let cfg = PropagatorConfig {
        dt_us,
        ..PropagatorConfig::default()
    };
    let out = evolve_unitary(&state.inner, &geom, &sched, &profile, &cfg, t_us).map_err(err)?;
    Ok(PyStateVector { inner: out })
}

/// Blockade radius (C6/Omega)^(1/6) in um, with both inputs quoted /2pi.
#[pyfunction]
#[pyo3(signature = (omega_over_2pi_mhz, c6_over_2pi_mhz_um6=862690.0))]
fn blockade_radius(omega_over_2pi_mhz: f64, c6_over_2pi_mhz_um6: f64) -> PyResult<f64> {
    rydotoc::pulse::blockade_radius(TAU * omega_over_2pi_mhz, TAU * c6_over_2pi_mhz_um6)
        .map_err(err)
}

#[pyfunction]
fn second_moment(probs: Vec<f64>) -> PyResult<f64> {
    let dist = quantum::ProbabilityDistribution::new(probs).map_err(err)?;
    Ok(rydotoc::design::second_moment(&dist))
}

#[pyfunction]
fn second_moment_from_shots(shots: Vec<String>) -> PyResult<f64> {
    rydotoc::design::second_moment_from_shots(&shots).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (dim, purity=1.0))]
fn haar_second_moment(dim: usize, purity: f64) -> PyResult<f64> {
    rydotoc::design::haar_second_moment(dim, purity).map_err(err)
}

#[pyfunction]
fn occupancy_estimates(shots: Vec<String>) -> PyResult<Vec<f64>> {
    quantum::occupancy_estimates(&shots).map_err(err)
}

#[pyfunction]
fn shot_budget(n_instances: usize, n_shots: usize) -> PyResult<u64> {
    rydotoc::otoc::shot_budget(n_instances, n_shots).map_err(err)
}

fn matrix_rows(m: &ndarray::Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn series_to_dict<'py>(py: Python<'py>, series: &OtocSeries) -> PyResult<Bound<'py, PyDict>> {
    let dict = PyDict::new(py);
    dict.set_item("sites", series.site_labels.clone())?;
    dict.set_item("times_us", series.times_us.clone())?;
    dict.set_item("raw", matrix_rows(&series.raw))?;
    dict.set_item("norm", matrix_rows(&series.norm))?;
    dict.set_item("otoc", matrix_rows(&series.otoc))?;
    dict.set_item("stderr", matrix_rows(&series.stderr))?;
    let meta = PyDict::new(py);
    meta.set_item("kind", series.meta.kind.clone())?;
    meta.set_item("config_hash", series.meta.config_hash.clone())?;
    meta.set_item("master_seed", series.meta.master_seed)?;
    meta.set_item("n_instances", series.meta.n_instances)?;
    meta.set_item("n_shots", series.meta.n_shots)?;
    meta.set_item("butterfly_site", series.meta.butterfly_site)?;
    dict.set_item("meta", meta)?;
    Ok(dict)
}

/// Run the randomized-measurement protocol from an experiment config JSON
/// string; returns the OTOC series as a dict of lists.
#[pyfunction]
fn run_otoc<'py>(py: Python<'py>, config_json: &str) -> PyResult<Bound<'py, PyDict>> {
    let file: ExperimentConfigFile = serde_json::from_str(config_json).map_err(err)?;
    let resolved = file.resolve().map_err(err)?;
    let (_, series) = py
        .detach(|| run_experiment(&resolved.experiment))
        .map_err(err)?;
    series_to_dict(py, &series)
}

/// Exact infinite-temperature OTOC of the configured drive over the grid.
#[pyfunction]
fn oracle_otoc<'py>(py: Python<'py>, config_json: &str) -> PyResult<Bound<'py, PyDict>> {
    let file: ExperimentConfigFile = serde_json::from_str(config_json).map_err(err)?;
    let resolved = file.resolve().map_err(err)?;
    let exp = &resolved.experiment;
    let t_max = exp.time_grid_us.iter().cloned().fold(0.0, f64::max);
    let sched = PulseSchedule::constant_drive(exp.drive.omega, exp.drive.delta, t_max);
    let series = py
        .detach(|| {
            exact_otoc_series(
                &OracleArgs {
                    geometry: &exp.geometry,
                    schedule: &sched,
                    profile: &exp.profile,
                    butterfly: &exp.butterfly,
                    propagator: &exp.propagator,
                    convention: HeisenbergConvention::Forward,
                },
                &exp.time_grid_us,
            )
        })
        .map_err(err)?;
    series_to_dict(py, &series)
}

/// 2-design convergence scan from a scan config JSON string; one dict per
/// quench count.
#[pyfunction]
fn m2_scan<'py>(py: Python<'py>, config_json: &str) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let file: ScanConfigFile = serde_json::from_str(config_json).map_err(err)?;
    let scan = file.resolve().map_err(err)?;
    let rows = py
        .detach(|| {
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
        })
        .map_err(err)?;
    rows.iter()
        .map(|row| {
            let dict = PyDict::new(py);
            dict.set_item("n_quench", row.n_quench)?;
            dict.set_item("m2_mean", row.m2_mean)?;
            dict.set_item("m2_haar", row.m2_haar)?;
            dict.set_item("abs_diff", row.abs_diff)?;
            dict.set_item("stderr", row.stderr)?;
            dict.set_item("n_instances", row.n_instances)?;
            dict.set_item("seed", row.seed)?;
            Ok(dict)
        })
        .collect()
}

/// Lightcone fit of a written series CSV; returns slope and arrivals.
#[pyfunction]
#[pyo3(signature = (series_csv, threshold=0.5, cutoff_time_us=4.0, mask_sites=None))]
fn fit_lightcone_csv<'py>(
    py: Python<'py>,
    series_csv: PathBuf,
    threshold: f64,
    cutoff_time_us: f64,
    mask_sites: Option<Vec<usize>>,
) -> PyResult<Bound<'py, PyDict>> {
    let series = OtocSeries::read_csv(Path::new(&series_csv)).map_err(err)?;
    let hm = Heatmap::from_series(&series, mask_sites);
    let arrivals = arrival_times(&hm, threshold).map_err(err)?;
    let fit = fit_lightcone(
        &arrivals,
        FitOrientation::TimeVsSite,
        cutoff_time_us,
        threshold,
    )
    .map_err(err)?;
    let dict = PyDict::new(py);
    dict.set_item("slope_us_per_site", fit.slope_us_per_site)?;
    dict.set_item("slope_us_per_site_err", fit.slope_us_per_site_err)?;
    dict.set_item("slope_sites_per_us", fit.slope_sites_per_us)?;
    dict.set_item("slope_sites_per_us_err", fit.slope_sites_per_us_err)?;
    dict.set_item("intercept_us", fit.intercept)?;
    dict.set_item("n_points", fit.n_points)?;
    let arrivals: Vec<(usize, Option<f64>)> = fit
        .arrivals
        .iter()
        .map(|a| (a.site, a.arrival_us))
        .collect();
    dict.set_item("arrivals", arrivals)?;
    Ok(dict)
}

#[pymodule]
fn rydotoc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyStateVector>()?;
    m.add_function(wrap_pyfunction!(evolve_constant_drive, m)?)?;
    m.add_function(wrap_pyfunction!(blockade_radius, m)?)?;
    m.add_function(wrap_pyfunction!(second_moment, m)?)?;
    m.add_function(wrap_pyfunction!(second_moment_from_shots, m)?)?;
    m.add_function(wrap_pyfunction!(haar_second_moment, m)?)?;
    m.add_function(wrap_pyfunction!(occupancy_estimates, m)?)?;
    m.add_function(wrap_pyfunction!(shot_budget, m)?)?;
    m.add_function(wrap_pyfunction!(run_otoc, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_otoc, m)?)?;
    m.add_function(wrap_pyfunction!(m2_scan, m)?)?;
    m.add_function(wrap_pyfunction!(fit_lightcone_csv, m)?)?;
    Ok(())
}
