use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("Fock truncation must be at least 2, got {0}")]
    InvalidDimension(usize),

    #[error("truncation tail {tail:.3e} exceeds tolerance {eps:.1e} at N = {dim}")]
    TruncationTail { tail: f64, eps: f64, dim: usize },

    #[error("operator is not Hermitian (deviation {0:.3e})")]
    NotHermitian(f64),

    #[error(
        "parametric drive is off resonance (omega_p = {omega_p}, 2 omega_r = {twice_omega_r})"
    )]
    OffResonance { omega_p: f64, twice_omega_r: f64 },

    #[error(
        "time step too coarse: refinement changed the result by {change:.3e} (tolerance {tol:.1e})"
    )]
    StepTooCoarse { change: f64, tol: f64 },

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("sampling violates Nyquist: max step {max_step:.3e} s, need < {limit:.3e} s")]
    Nyquist { max_step: f64, limit: f64 },

    #[error("design matrix is degenerate (condition estimate {0:.3e})")]
    DegenerateDesign(f64),

    #[error("fit did not converge after {starts} starts")]
    NoConvergence { starts: usize },

    #[error("fit parameter {name} ended at its bound {value}")]
    ParameterAtBound { name: String, value: f64 },

    #[error("zero reference contrast")]
    ZeroReference,

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("config error at line {line}, key `{key}`: {message}")]
    Config {
        line: usize,
        key: String,
        message: String,
    },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable snake_case tag for machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::InvalidDimension(_) => "invalid_dimension",
            Error::TruncationTail { .. } => "truncation_tail",
            Error::NotHermitian(_) => "not_hermitian",
            Error::OffResonance { .. } => "off_resonance",
            Error::StepTooCoarse { .. } => "step_too_coarse",
            Error::InvalidParameter { .. } => "invalid_parameter",
            Error::Nyquist { .. } => "nyquist",
            Error::DegenerateDesign(_) => "degenerate_design",
            Error::NoConvergence { .. } => "no_convergence",
            Error::ParameterAtBound { .. } => "parameter_at_bound",
            Error::ZeroReference => "zero_reference",
            Error::Parse { .. } => "parse",
            Error::Config { .. } => "config",
            Error::Io(_) => "io",
        }
    }
}
