use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("out of bounds: {0}")]
    Bounds(String),

    #[error("grid dimensions {height}x{width} are not divisible by stride {stride_y}x{stride_x}")]
    Dimension {
        height: usize,
        width: usize,
        stride_y: usize,
        stride_x: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// A plan was applied to a token set of the wrong size. This is also how
    /// stale cached plans surface.
    #[error("merge plan expects {expected} tokens, got {actual}")]
    PlanMismatch { expected: usize, actual: usize },

    #[error("non-finite value in {context}{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    Numeric { context: String, step: Option<usize> },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("incomplete trace: {0}")]
    IncompleteTrace(String),

    #[error("degenerate reference: dynamic range is zero")]
    DegenerateReference,
}

impl Error {
    /// Attaches a pipeline step to numeric errors; other variants pass through.
    pub fn at_step(self, step: usize) -> Self {
        match self {
            Error::Numeric { context, .. } => Error::Numeric {
                context,
                step: Some(step),
            },
            other => other,
        }
    }

    pub(crate) fn numeric(context: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
            step: None,
        }
    }
}
