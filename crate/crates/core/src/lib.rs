//! Simulator and analysis toolkit for randomized-quench OTOC measurements on
//! Rydberg chains: hardware-constrained pulse schedules, random global
//! quenches that approximate unitary 2-designs, paired-branch protocol runs
//! with finite-shot statistics and optional Lindblad noise, an exact
//! infinite-temperature oracle, and lightcone extraction.

extern crate blas_src;

pub mod analysis;
pub mod config;
pub mod design;
pub mod error;
pub mod evolve;
pub mod manifest;
pub mod otoc;
pub mod pulse;
pub mod quantum;
pub mod rng;
pub mod runner;

pub use error::{Error, Result};
