use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {what}: {message}")]
    Parse { what: String, message: String },

    #[error("unsupported catalog version {found} in {what} (expected {expected})")]
    Version {
        what: String,
        found: u32,
        expected: u32,
    },

    #[error("invalid {what}: {message}")]
    Invalid { what: String, message: String },

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("unknown gpu `{0}`")]
    UnknownGpu(String),

    #[error("no machine tier for {0} GPUs")]
    UnknownTier(u32),

    #[error("no machine with {n_gpus} x `{gpu}`")]
    UnknownMachine { gpu: String, n_gpus: u32 },

    #[error("model `{0}` is not a token model")]
    NotATokenModel(String),

    #[error("no FLOPs estimator available for `{0}` (vision model without a reported total)")]
    NoEstimatorAvailable(String),

    #[error("configuration does not fit ({limiting} memory is exceeded)")]
    InfeasibleConfig { limiting: crate::memory::Limiting },

    #[error("empty selection: {0}")]
    EmptySelection(String),

    #[error("calibration needs at least one observation")]
    NoObservations,

    #[error("degenerate fit: {free} identifiable parameters but only {observations} observations")]
    DegenerateFit {
        free: usize,
        observations: usize,
        fallback: Box<crate::calibrate::Calibration>,
    },
}

impl Error {
    pub(crate) fn parse(what: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            what: what.into(),
            message: message.to_string(),
        }
    }

    pub(crate) fn invalid(what: impl Into<String>, message: impl ToString) -> Self {
        Error::Invalid {
            what: what.into(),
            message: message.to_string(),
        }
    }
}
