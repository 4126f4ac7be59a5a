use thiserror::Error;

/// Errors raised by the optimization library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Two containers disagree on layer count or layer lengths, or a layer
    /// index is out of range.
    #[error("structure mismatch: {0}")]
    Structure(String),

    /// A loss, gradient or probe evaluated to NaN or infinity.
    #[error("non-finite value{}: {what}", task.map(|t| format!(" in task {t}")).unwrap_or_default())]
    Numeric { task: Option<usize>, what: String },

    /// A configuration value lies outside its domain.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An operation was called with arguments it cannot accept (empty input
    /// lists and the like).
    #[error("invalid usage: {0}")]
    Usage(String),
}

impl Error {
    pub(crate) fn numeric(task: Option<usize>, what: impl Into<String>) -> Self {
        Error::Numeric {
            task,
            what: what.into(),
        }
    }

    /// Task index carried by a numeric error, if any.
    pub fn task(&self) -> Option<usize> {
        match self {
            Error::Numeric { task, .. } => *task,
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
