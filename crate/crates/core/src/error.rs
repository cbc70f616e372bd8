use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A caller violated a shape or range precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A descriptor or configuration value cannot be honoured.
    #[error("configuration error: {0}")]
    Config(String),
    /// A loss term became NaN or infinite during training.
    #[error("non-finite {term} loss at step {step}")]
    NonFinite { step: usize, term: &'static str },
    /// No filter had enough firing images to compute an instability.
    #[error("empty report: {0}")]
    EmptyReport(String),
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
