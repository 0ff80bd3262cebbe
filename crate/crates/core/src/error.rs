//! Crate-wide error type with a stable mapping to process exit codes.

/// Everything that can go wrong across the toolkit, bucketed by who is at
/// fault: the configuration, the input data, or the numerics.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid or inconsistent configuration (bad keys, bad values, missing
    /// referenced files).
    #[error("config error: {0}")]
    Config(String),

    /// Malformed, inconsistent, or insufficient input data.
    #[error("data error: {0}")]
    Data(String),

    /// Numerical failure: singular systems, non-finite intermediate values,
    /// degenerate statistics that make a computation impossible.
    #[error("numerical error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code contract: 1 config, 2 data, 3 numerical.
    /// IO and CSV failures count as data problems.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) => 1,
            Error::Data(_) | Error::Io(_) | Error::Csv(_) => 2,
            Error::Numeric(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
