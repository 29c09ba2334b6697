use thiserror::Error;

/// Error type shared across the workspace.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("infeasible moments: sd^2 = {sd_sq} must be < mean*(1-mean) = {bound}")]
    InfeasibleMoments { sd_sq: f64, bound: f64 },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("degenerate prior: {0}")]
    DegeneratePrior(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("constraint retry budget ({retries}) exhausted: {what}")]
    ConstraintExhausted { what: String, retries: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// Process exit code category for the CLI: 2 config, 3 data, 4 numerical, 5 io.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Toml(_) => 2,
            Error::Data(_)
            | Error::DegenerateData(_)
            | Error::DegeneratePrior(_)
            | Error::DimensionMismatch { .. }
            | Error::Domain(_)
            | Error::InfeasibleMoments { .. } => 3,
            Error::Numerical(_) | Error::ConstraintExhausted { .. } => 4,
            Error::Io(_) | Error::Csv(_) | Error::Json(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
