use thiserror::Error;

/// Errors raised by estimation, simulation and file handling.
#[derive(Error, Debug)]
pub enum FsvdError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("point {value} lies outside [{lower}, {upper}]")]
    OutOfRange { value: f64, lower: f64, upper: f64 },

    #[error("invalid spline basis: {0}")]
    InvalidBasis(String),

    #[error("matrix is not positive semidefinite: smallest eigenvalue {min_eigenvalue:e} (scale {scale:e})")]
    NotPositiveSemidefinite { min_eigenvalue: f64, scale: f64 },

    #[error("requested {requested} components but only {available} are available")]
    RankExceeded { requested: usize, available: usize },

    #[error("empty data: {0}")]
    EmptyData(String),

    #[error("index {index} out of range for {len} {what}")]
    IndexOutOfRange {
        index: usize,
        len: usize,
        what: &'static str,
    },

    #[error("knot search failed after {knots} accepted knots: {reason}")]
    SearchFailed { knots: usize, reason: String },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },

    #[error("inconsistent data: {0}")]
    Inconsistent(String),

    #[error("simulation failed: {0}")]
    Simulation(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl FsvdError {
    /// Process exit code for the command-line front end: 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            FsvdError::InvalidConfig(_) => 1,
            FsvdError::Parse { .. }
            | FsvdError::Inconsistent(_)
            | FsvdError::EmptyData(_)
            | FsvdError::InvalidGrid(_)
            | FsvdError::OutOfRange { .. }
            | FsvdError::IndexOutOfRange { .. }
            | FsvdError::Io { .. } => 2,
            FsvdError::DimensionMismatch { .. }
            | FsvdError::InvalidBasis(_)
            | FsvdError::NotPositiveSemidefinite { .. }
            | FsvdError::RankExceeded { .. }
            | FsvdError::SearchFailed { .. }
            | FsvdError::Singular(_)
            | FsvdError::Simulation(_) => 3,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        FsvdError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, FsvdError>;
