use alloc::string::String;

/// Errors raised by the algorithmic core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Two inputs that must agree in shape do not.
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// A configuration value is outside its valid range.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// A call argument is outside its valid range.
    #[error("invalid input: {0}")]
    Input(String),
    /// A feature provider could not be loaded or run.
    #[error("provider load error: {0}")]
    Load(String),
    /// A loss or parameter became NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

impl Error {
    /// Same error with `context: ` prepended to its message.
    pub fn context(self, context: &str) -> Error {
        let wrap = |m: String| alloc::format!("{context}: {m}");
        match self {
            Error::Dimension(m) => Error::Dimension(wrap(m)),
            Error::Config(m) => Error::Config(wrap(m)),
            Error::Input(m) => Error::Input(wrap(m)),
            Error::Load(m) => Error::Load(wrap(m)),
            Error::NonFinite(m) => Error::NonFinite(wrap(m)),
        }
    }
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::Error::Dimension(alloc::format!($($arg)*)) };
}
macro_rules! cfg_err {
    ($($arg:tt)*) => { $crate::Error::Config(alloc::format!($($arg)*)) };
}
macro_rules! input_err {
    ($($arg:tt)*) => { $crate::Error::Input(alloc::format!($($arg)*)) };
}
pub(crate) use {cfg_err, dim_err, input_err};
