use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, label ranges, ...).
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("unsupported geometry: {0}")]
    UnsupportedGeometry(String),
    #[error("degenerate statistics: {0}")]
    DegenerateStatistics(String),
    #[error("invalid patch: {0}")]
    InvalidPatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("validation failed: {0}")]
    Validation(String),
    /// A batch producer died or did not deliver in time.
    #[error("worker failure: {0}")]
    WorkerFailure(String),
    #[error("non-finite loss at iteration {iteration} (lr {lr}, cases {cases:?})")]
    NonFiniteLoss { iteration: u64, lr: f64, cases: Vec<u32> },
}

impl Error {
    /// Short kebab-case category, stable for machine parsing.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Contract(_) => "contract-violation",
            Error::InvalidGeometry(_) => "invalid-geometry",
            Error::UnsupportedGeometry(_) => "unsupported-geometry",
            Error::DegenerateStatistics(_) => "degenerate-statistics",
            Error::InvalidPatch(_) => "invalid-patch",
            Error::InvalidConfig(_) => "invalid-config",
            Error::Validation(_) => "validation",
            Error::WorkerFailure(_) => "worker",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
        }
    }

    /// The display text without its category prefix.
    pub fn message(&self) -> String {
        match self {
            Error::Contract(m)
            | Error::InvalidGeometry(m)
            | Error::UnsupportedGeometry(m)
            | Error::DegenerateStatistics(m)
            | Error::InvalidPatch(m)
            | Error::InvalidConfig(m)
            | Error::Validation(m)
            | Error::WorkerFailure(m) => m.clone(),
            Error::NonFiniteLoss { .. } => alloc::string::ToString::to_string(self),
        }
    }
}

macro_rules! contract {
    ($($arg:tt)*) => {
        $crate::error::Error::Contract(alloc::format!($($arg)*))
    };
}
pub(crate) use contract;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err($crate::error::contract!($($arg)*));
        }
    };
}
pub(crate) use ensure;
