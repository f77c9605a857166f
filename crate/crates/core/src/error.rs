//! Crate-wide error type.

use thiserror::Error;

use crate::pulse::ValidationReport;

#[derive(Debug, Error)]
pub enum Error {
    #[error("site index {site} out of range for {n_atoms} atoms")]
    SiteOutOfRange { site: usize, n_atoms: usize },

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("operator is not Hermitian (max |A - A^H| = {deviation:.3e})")]
    NonHermitian { deviation: f64 },

    #[error("state is not normalized (|norm - 1| = {deviation:.3e})")]
    UnnormalizedState { deviation: f64 },

    #[error("bitstrings have inconsistent lengths ({first} vs {other})")]
    RaggedBitstrings { first: usize, other: usize },

    #[error("probabilities do not sum to 1 (|sum - 1| = {deviation:.3e})")]
    InvalidDistribution { deviation: f64 },

    #[error("waveform breakpoints must start at 0 and be strictly increasing")]
    BadWaveform,

    #[error("schedule fails hardware validation:\n{0}")]
    InvalidSchedule(ValidationReport),

    #[error("time {t} outside [0, {max}]")]
    TimeOutOfRange { t: f64, max: f64 },

    #[error("blockade radius requires omega > 0 (got {0})")]
    NonPositiveOmega(f64),

    #[error(
        "propagator substep dt = {dt} invalid (must be > 0 and <= shortest segment {shortest})"
    )]
    BadSubstep { dt: f64, shortest: f64 },

    #[error("norm drift {drift:.3e} exceeds tolerance {tolerance:.3e}; reduce dt")]
    NormDrift { drift: f64, tolerance: f64 },

    #[error("quench stage exceeds budget: needs {needed} us, budget {budget} us")]
    QuenchBudget { needed: f64, budget: f64 },

    #[error("negative quench sigma {0}")]
    NegativeSigma(f64),

    #[error("invalid noise model: {0}")]
    BadNoiseModel(String),

    #[error("need at least {needed} values, got {got}")]
    TooFewValues { needed: usize, got: usize },

    #[error(
        "haar moment needs dimension >= 2 and purity in [1/D, 1]; got D={dim}, purity={purity}"
    )]
    BadPurity { dim: usize, purity: f64 },

    #[error("ensemble must contain at least one instance")]
    EmptyEnsemble,

    #[error("dimension 2^{n_atoms} exceeds the dense-propagation guard ({max})")]
    DimensionGuard { n_atoms: usize, max: usize },

    #[error("imaginary residue {residue:.3e} exceeds bound {bound:.3e}")]
    ImaginaryResidue { residue: f64, bound: f64 },

    #[error("butterfly kind `projector` is oracle-only and cannot be run on the protocol")]
    ProjectorNotRunnable,

    #[error("branch results incomplete: instance {instance} missing {missing} branch")]
    BranchMismatch {
        instance: usize,
        missing: &'static str,
    },

    #[error("instance {instance}: {source}")]
    Instance {
        instance: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("heatmap is empty")]
    EmptyHeatmap,

    #[error("threshold must lie in (0, 1); got {0}")]
    BadThreshold(f64),

    #[error("lightcone fit needs >= 3 unmasked crossing sites, got {0}")]
    InsufficientArrivals(usize),

    #[error("degenerate fit input: {0}")]
    DegenerateFit(String),

    #[error("series are incompatible: {0}")]
    IncompatibleSeries(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("unsupported schema version in {path}: found `{found}`, expected `{expected}`")]
    SchemaMismatch {
        path: String,
        found: String,
        expected: String,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("linear algebra backend error: {0}")]
    Linalg(String),
}

impl Error {
    /// Process exit code for the CLI: 2 for configuration/input problems,
    /// 3 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Json(_)
            | Error::SchemaMismatch { .. }
            | Error::InvalidSchedule(_)
            | Error::BadWaveform
            | Error::QuenchBudget { .. }
            | Error::NegativeSigma(_)
            | Error::BadNoiseModel(_)
            | Error::BadThreshold(_)
            | Error::DimensionGuard { .. }
            | Error::SiteOutOfRange { .. } => 2,
            Error::Instance { source, .. } => source.exit_code(),
            _ => 3,
        }
    }

    pub(crate) fn for_instance(self, instance: usize) -> Error {
        Error::Instance {
            instance,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Error {
    Error::Io {
        path: path.as_ref().display().to_string(),
        source,
    }
}
