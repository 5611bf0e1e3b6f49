use thiserror::Error;

/// Errors raised by feature extraction, training and evaluation.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("numeric failure at iteration {iteration}: {message}")]
    NumericFailure { iteration: usize, message: String },

    #[error("capacity exhausted: every output is at maximal inhibition (row {row})")]
    CapacityExhausted { row: usize },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("size guard: {0}")]
    SizeGuard(String),

    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        Error::DegenerateSample(msg.into())
    }

    /// Attach a layer index (0-based) to an error raised while training a network.
    pub fn in_layer(self, layer: usize) -> Self {
        Error::Layer {
            layer,
            source: Box::new(self),
        }
    }

    /// True when the error (or the error it wraps) is a numeric failure.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NumericFailure { .. } => true,
            Error::Layer { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
