use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An input lies outside the mathematical domain of a primitive.
    #[error("domain error: {0}")]
    Domain(String),

    /// A primitive produced a non-finite value.
    #[error("overflow error: {0}")]
    Overflow(String),

    /// A caller violated a documented precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// Training or rollout produced non-finite state or diverged.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Synthetic data generation could not satisfy its constraints.
    #[error("generation error: {0}")]
    Generation(String),

    /// A metric is undefined for the given labels (e.g. AUROC without negatives).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Malformed file content.
    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Short machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Domain(_) => "domain",
            Error::Overflow(_) => "overflow",
            Error::Contract(_) => "contract",
            Error::Numeric(_) => "numeric",
            Error::Generation(_) => "generation",
            Error::UndefinedMetric(_) => "undefined_metric",
            Error::Parse(_) => "parse",
            Error::Io { .. } => "io",
        }
    }

    /// Numeric failures (exit code 3 in the CLI) as opposed to data or contract failures.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Numeric(_) | Error::Overflow(_) | Error::Domain(_)
        )
    }
}

macro_rules! contract {
    ($($arg:tt)*) => {
        $crate::error::Error::Contract(format!($($arg)*))
    };
}
pub(crate) use contract;
