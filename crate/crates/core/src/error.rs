use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("particle index {index} out of range for ensemble of size {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("log density ratio is not finite at particle {particle}")]
    NonFiniteLogRatio { particle: usize },

    #[error(
        "numerical instability: {size}x{size} system is not positive definite with \
         regularization {lambda:e}; try a larger lambda"
    )]
    NotPositiveDefinite { size: usize, lambda: f64 },

    #[error("numerical instability: singular {size}x{size} Newton system")]
    SingularSystem { size: usize },

    #[error("{0} requires target scores, but the target does not provide them")]
    MissingScores(&'static str),

    #[error("non-finite {what} produced")]
    NonFinite { what: &'static str },

    #[error("step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("configuration error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn at_step(self, step: usize) -> Self {
        match self {
            e @ Error::Step { .. } => e,
            e => Error::Step {
                step,
                source: Box::new(e),
            },
        }
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
