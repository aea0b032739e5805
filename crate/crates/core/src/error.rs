use thiserror::Error;

/// Error type shared by all pipeline stages.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("expansion point hits spectrum")]
    ExpansionOnSpectrum,

    #[error("system is unstable: H-infinity norm infinite")]
    NormInfinite,

    #[error("stability assumption violated: {0}")]
    AssumptionViolated(String),

    #[error("unstable uncertainty realization: {0}")]
    UnstableDelta(String),

    #[error("feedback requested with empty layout")]
    EmptyLayout,

    #[error("undetectable configuration: {0}")]
    Undetectable(String),

    #[error("certification failed: {0}")]
    CertificationFailed(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Parse { path: String, reason: String },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
