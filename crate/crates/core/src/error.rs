use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("chain {chain} cannot reach its coupling point (distance {distance:.6} m)")]
    Unreachable { chain: usize, distance: f64 },
    #[error("forward kinematics did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("Newton step matrix is singular")]
    SingularJacobian,
    #[error("singular configuration: {0}")]
    Singular(String),
    #[error("retraction direction is degenerate (translational force {0:.3} N)")]
    DegenerateDirection(f64),
    #[error("classifier has not been trained")]
    NotTrained,
    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),
    #[error("truth class {0} has no samples")]
    EmptyClass(&'static str),
    #[error("misclassified episode has no baseline simulation")]
    MissingBaseline,
    #[error("contact was never detected in this episode")]
    NotDetected,
    #[error("configuration {0} is part of the model's training split")]
    SplitViolation(usize),
    #[error("simulation aborted near a singularity at t = {t:.3} s (condition {condition:e})")]
    SingularityAbort { t: f64, condition: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Unreachable { .. } => "Unreachable",
            Error::NoConvergence { .. } => "NoConvergence",
            Error::SingularJacobian => "SingularJacobian",
            Error::Singular(_) => "Singular",
            Error::DegenerateDirection(_) => "DegenerateDirection",
            Error::NotTrained => "NotTrained",
            Error::DegenerateDataset(_) => "DegenerateDataset",
            Error::EmptyClass(_) => "EmptyClass",
            Error::MissingBaseline => "MissingBaseline",
            Error::NotDetected => "NotDetected",
            Error::SplitViolation(_) => "SplitViolation",
            Error::SingularityAbort { .. } => "SingularityAbort",
            Error::Config(_) => "ConfigInvalid",
            Error::Parse(_) => "Parse",
            Error::Io(_) => "Io",
            Error::Csv(_) => "Csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
