//! Error type shared by all core modules.

use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Malformed container or text format.
    #[error("format error: {0}")]
    Format(String),
    /// Structurally valid input that this toolkit does not handle.
    #[error("unsupported: {0}")]
    Unsupported(String),
    /// Argument outside an operation's stated domain.
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// Tensor or matrix dimensions do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    /// Numerically degenerate state (zero norms, zero spreads, NaN loss).
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    /// Exit-code class used by the CLI: 2 for data problems, 3 for
    /// numeric failures.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_))
    }
}

#[macro_export]
macro_rules! bail_fmt {
    ($variant:ident, $($arg:tt)*) => {
        return Err($crate::Error::$variant(alloc::format!($($arg)*)))
    };
}
