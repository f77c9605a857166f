//! Dense state and operator arithmetic over the 2^N occupation basis.
//!
//! Basis convention: index `s` encodes the bitstring "b0 b1 ... b_{N-1}" with
//! atom 0 as the most significant bit, so |b0 b1 ... b_{N-1}> has index
//! `sum_i b_i 2^{N-1-i}`. Bitstrings printed by this module follow the same
//! order (first character = atom 0).

use ndarray::{Array1, Array2};
use num_complex::Complex64 as C64;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

pub const NORM_TOL: f64 = 1e-10;
pub const HERMITIAN_TOL: f64 = 1e-12;

/// Bit of `site` in basis index `s` (atom 0 is the most significant bit).
#[inline]
pub fn bit_of(s: usize, site: usize, n_atoms: usize) -> usize {
    (s >> (n_atoms - 1 - site)) & 1
}

/// Mask that flips `site` in a basis index.
#[inline]
pub fn flip_mask(site: usize, n_atoms: usize) -> usize {
    1 << (n_atoms - 1 - site)
}

/// Render a basis index as a bitstring, atom 0 first.
pub fn index_to_bitstring(s: usize, n_atoms: usize) -> String {
    (0..n_atoms)
        .map(|site| {
            if bit_of(s, site, n_atoms) == 1 {
                '1'
            } else {
                '0'
            }
        })
        .collect()
}

/// Normalized pure state over the 2^N occupation basis.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    n_atoms: usize,
    amplitudes: Array1<C64>,
}

impl StateVector {
    /// The all-ground state |0...0>.
    pub fn ground(n_atoms: usize) -> Self {
        let dim = 1usize << n_atoms;
        let mut amplitudes = Array1::zeros(dim);
        amplitudes[0] = C64::new(1.0, 0.0);
        StateVector {
            n_atoms,
            amplitudes,
        }
    }

    /// Basis state |s>.
    pub fn basis_state(n_atoms: usize, s: usize) -> Self {
        let dim = 1usize << n_atoms;
        assert!(s < dim, "basis index out of range");
        let mut amplitudes = Array1::zeros(dim);
        amplitudes[s] = C64::new(1.0, 0.0);
        StateVector {
            n_atoms,
            amplitudes,
        }
    }

    /// Wrap an amplitude vector; the length must be exactly 2^n_atoms.
    pub fn from_amplitudes(n_atoms: usize, amplitudes: Array1<C64>) -> Result<Self> {
        let dim = 1usize << n_atoms;
        if amplitudes.len() != dim {
            return Err(Error::DimensionMismatch {
                left: amplitudes.len(),
                right: dim,
            });
        }
        Ok(StateVector {
            n_atoms,
            amplitudes,
        })
    }

    pub fn n_atoms(&self) -> usize {
        self.n_atoms
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn amplitudes(&self) -> &Array1<C64> {
        &self.amplitudes
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes
            .iter()
            .map(|a| a.norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale to unit norm; afterwards `|norm - 1| < 1e-10`.
    pub fn normalize(&mut self) {
        let norm = self.norm();
        if norm > 0.0 {
            let inv = C64::new(1.0 / norm, 0.0);
            self.amplitudes.mapv_inplace(|a| a * inv);
        }
    }

    /// Outcome probabilities |amplitude|^2.
    pub fn probabilities(&self) -> ProbabilityDistribution {
        ProbabilityDistribution {
            probs: self.amplitudes.iter().map(|a| a.norm_sqr()).collect(),
        }
    }

    /// Per-site Rydberg occupation expectations <n_i>, computed directly from
    /// the probabilities. Faster than going through `expectation` with an
    /// embedded operator.
    pub fn occupation_expectations(&self) -> Vec<f64> {
        let n = self.n_atoms;
        let mut occ = vec![0.0; n];
        for (s, a) in self.amplitudes.iter().enumerate() {
            let p = a.norm_sqr();
            if p == 0.0 {
                continue;
            }
            for (site, o) in occ.iter_mut().enumerate() {
                if bit_of(s, site, n) == 1 {
                    *o += p;
                }
            }
        }
        occ
    }
}

/// Dense complex operator on the occupation basis.
#[derive(Clone, Debug)]
pub struct Operator {
    matrix: Array2<C64>,
    hermitian: bool,
}

impl Operator {
    /// Wrap a square matrix without asserting Hermiticity.
    pub fn new(matrix: Array2<C64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::DimensionMismatch {
                left: matrix.nrows(),
                right: matrix.ncols(),
            });
        }
        Ok(Operator {
            matrix,
            hermitian: false,
        })
    }

    /// Wrap a square matrix, checking max |A - A^H| < 1e-12.
    pub fn hermitian(matrix: Array2<C64>) -> Result<Self> {
        let mut op = Operator::new(matrix)?;
        let dev = op.hermiticity_deviation();
        if dev >= HERMITIAN_TOL {
            return Err(Error::NonHermitian { deviation: dev });
        }
        op.hermitian = true;
        Ok(op)
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &Array2<C64> {
        &self.matrix
    }

    pub fn is_hermitian(&self) -> bool {
        self.hermitian
    }

    pub fn hermiticity_deviation(&self) -> f64 {
        let m = &self.matrix;
        let mut dev: f64 = 0.0;
        for i in 0..m.nrows() {
            for j in i..m.ncols() {
                dev = dev.max((m[[i, j]] - m[[j, i]].conj()).norm());
            }
        }
        dev
    }

    /// Matrix product self * other.
    pub fn matmul(&self, other: &Operator) -> Result<Operator> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                left: self.dim(),
                right: other.dim(),
            });
        }
        Operator::new(self.matrix.dot(&other.matrix))
    }

    pub fn identity(dim: usize) -> Operator {
        Operator {
            matrix: Array2::eye(dim),
            hermitian: true,
        }
    }
}

/// Single-site Pauli X = |0><1| + |1><0|.
pub fn pauli_x() -> Array2<C64> {
    ndarray::array![
        [C64::new(0.0, 0.0), C64::new(1.0, 0.0)],
        [C64::new(1.0, 0.0), C64::new(0.0, 0.0)]
    ]
}

/// Single-site Pauli Y.
pub fn pauli_y() -> Array2<C64> {
    ndarray::array![
        [C64::new(0.0, 0.0), C64::new(0.0, -1.0)],
        [C64::new(0.0, 1.0), C64::new(0.0, 0.0)]
    ]
}

/// Single-site Pauli Z (|0><0| - |1><1| in the occupation ordering).
pub fn pauli_z() -> Array2<C64> {
    ndarray::array![
        [C64::new(1.0, 0.0), C64::new(0.0, 0.0)],
        [C64::new(0.0, 0.0), C64::new(-1.0, 0.0)]
    ]
}

/// Single-site occupation projector n = |1><1|.
pub fn number_op() -> Array2<C64> {
    ndarray::array![
        [C64::new(0.0, 0.0), C64::new(0.0, 0.0)],
        [C64::new(0.0, 0.0), C64::new(1.0, 0.0)]
    ]
}

/// Embed a 2x2 single-site operator at `site` within an N-atom register:
/// I (x) ... (x) op (x) ... (x) I, with atom 0 as the most significant factor.
pub fn embed_local(op: &Array2<C64>, site: usize, n_atoms: usize) -> Result<Operator> {
    if op.nrows() != 2 || op.ncols() != 2 {
        return Err(Error::DimensionMismatch {
            left: op.nrows(),
            right: 2,
        });
    }
    if site >= n_atoms {
        return Err(Error::SiteOutOfRange { site, n_atoms });
    }
    let dim = 1usize << n_atoms;
    let mask = flip_mask(site, n_atoms);
    let mut matrix = Array2::zeros((dim, dim));
    for col in 0..dim {
        let b = bit_of(col, site, n_atoms);
        for (bp, row) in [(0usize, col & !mask), (1usize, col | mask)] {
            let entry = op[[bp, b]];
            if entry != C64::new(0.0, 0.0) {
                matrix[[row, col]] += entry;
            }
        }
    }
    Operator::new(matrix)
}

/// <psi| obs |psi> for a Hermitian observable; the imaginary residue must be
/// below 1e-10 and is discarded.
pub fn expectation(state: &StateVector, obs: &Operator) -> Result<f64> {
    if state.dim() != obs.dim() {
        return Err(Error::DimensionMismatch {
            left: state.dim(),
            right: obs.dim(),
        });
    }
    if !obs.is_hermitian() {
        return Err(Error::NonHermitian {
            deviation: obs.hermiticity_deviation(),
        });
    }
    let applied = obs.matrix().dot(state.amplitudes());
    let value: C64 = state
        .amplitudes()
        .iter()
        .zip(applied.iter())
        .map(|(a, b)| a.conj() * b)
        .sum();
    if value.im.abs() >= NORM_TOL {
        return Err(Error::ImaginaryResidue {
            residue: value.im.abs(),
            bound: NORM_TOL,
        });
    }
    Ok(value.re)
}

/// Draw `n_shots` i.i.d. bitstring samples from |amplitudes|^2.
///
/// Deterministic for a fixed seed. The state must be normalized to 1e-8.
pub fn sample_shots(state: &StateVector, n_shots: usize, rng_seed: u64) -> Result<Vec<String>> {
    if n_shots == 0 {
        return Err(Error::TooFewValues { needed: 1, got: 0 });
    }
    let norm_dev = (state.norm() - 1.0).abs();
    if norm_dev > 1e-8 {
        return Err(Error::UnnormalizedState {
            deviation: norm_dev,
        });
    }
    let mut cumulative = Vec::with_capacity(state.dim());
    let mut acc = 0.0;
    for a in state.amplitudes().iter() {
        acc += a.norm_sqr();
        cumulative.push(acc);
    }
    let total = *cumulative.last().unwrap();
    let mut rng = rng_from_seed(rng_seed);
    let n = state.n_atoms();
    let mut shots = Vec::with_capacity(n_shots);
    for _ in 0..n_shots {
        let u: f64 = rng.random::<f64>() * total;
        let idx = match cumulative.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
            Ok(i) => (i + 1).min(state.dim() - 1),
            Err(i) => i.min(state.dim() - 1),
        };
        shots.push(index_to_bitstring(idx, n));
    }
    Ok(shots)
}

/// Per-site mean of bit values over a set of equal-length bitstrings; the
/// finite-shot estimator of <n_i>.
pub fn occupancy_estimates(shots: &[String]) -> Result<Vec<f64>> {
    if shots.is_empty() {
        return Err(Error::TooFewValues { needed: 1, got: 0 });
    }
    let len = shots[0].len();
    let mut counts = vec![0usize; len];
    for shot in shots {
        if shot.len() != len {
            return Err(Error::RaggedBitstrings {
                first: len,
                other: shot.len(),
            });
        }
        for (i, ch) in shot.chars().enumerate() {
            if ch == '1' {
                counts[i] += 1;
            }
        }
    }
    let n = shots.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

/// Outcome probability vector, summing to 1 within 1e-10.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityDistribution {
    probs: Vec<f64>,
}

impl ProbabilityDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        let dev = (sum - 1.0).abs();
        if dev >= NORM_TOL || probs.iter().any(|p| !(0.0..=1.0 + NORM_TOL).contains(p)) {
            return Err(Error::InvalidDistribution { deviation: dev });
        }
        Ok(ProbabilityDistribution { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn dim(&self) -> usize {
        self.probs.len()
    }
}
