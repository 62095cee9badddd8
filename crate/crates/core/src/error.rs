use thiserror::Error;

/// Errors raised by the estimation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A caller supplied an argument outside the operation's domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A weighted statistic was requested for weights summing to zero.
    #[error("weight vector has zero total weight")]
    DegenerateWeights,

    /// Downweighting found no supported batch outside the trimmed interval.
    #[error("filter made no progress: every supported score lies inside [{a}, {b}]")]
    NoProgress { a: f64, b: f64 },

    /// No split point satisfying both split conditions was found.
    #[error("split search exhausted after {candidates} candidates (normalized variance {variance:.6e})")]
    SearchExhausted { candidates: usize, variance: f64 },

    /// An operation's precondition was violated by its caller.
    #[error("contract violated: {0}")]
    Contract(String),

    /// Malformed data or config file.
    #[error("data format error: {0}")]
    DataFormat(String),

    /// An internal invariant failed; indicates a bug or broken assumption.
    #[error("internal error: {0}")]
    Internal(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
