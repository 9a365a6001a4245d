use thiserror::Error;

/// Errors produced anywhere in the fitting and fusion pipeline.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A parameter vector does not describe a valid model (non-PD
    /// covariance, nonpositive mixture weight, nonpositive noise variance).
    #[error("degenerate parameters: {0}")]
    DegenerateParameter(String),

    /// EM could not produce a valid model from the data.
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    /// The estimator has no meaning for these inputs (e.g. linear
    /// operations on models with different parameter layouts).
    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("invalid config: {}", format_issues(.0))]
    Config(Vec<ConfigIssue>),

    #[error("i/o error: {0}")]
    Io(String),
}

/// One failed validation check, addressed by its JSON field path.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigIssue {
    pub field: String,
    pub message: String,
}

fn format_issues(issues: &[ConfigIssue]) -> String {
    issues
        .iter()
        .map(|i| format!("{}: {}", i.field, i.message))
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub fn is_not_applicable(&self) -> bool {
        matches!(self, Error::NotApplicable(_))
    }

    /// Prefixes the message with context, keeping the variant.
    pub fn context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            Error::InvalidInput(m) => Error::InvalidInput(format!("{ctx}: {m}")),
            Error::DegenerateParameter(m) => Error::DegenerateParameter(format!("{ctx}: {m}")),
            Error::DegenerateFit(m) => Error::DegenerateFit(format!("{ctx}: {m}")),
            Error::NumericalFailure(m) => Error::NumericalFailure(format!("{ctx}: {m}")),
            Error::NotApplicable(m) => Error::NotApplicable(format!("{ctx}: {m}")),
            other => other,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
