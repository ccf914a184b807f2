use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index out of range: {what} = {index} (limit {limit})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    /// Every feature candidate assigns zero likelihood to some observed transition.
    #[error("model class incompatible with data at step {step}")]
    IncompatibleClass { step: usize },

    /// Some state has zero behavior occupancy, so the downstream transfer bound is undefined.
    #[error("reachability violated: kappa = 0")]
    ReachabilityViolated,

    #[error("unsupported document version {0}")]
    UnsupportedVersion(u32),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_index(what: &'static str, index: usize, limit: usize) -> Result<()> {
    if index < limit {
        Ok(())
    } else {
        Err(Error::IndexOutOfRange { what, index, limit })
    }
}
