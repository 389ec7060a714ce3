use crate::graph::Violation;

/// Errors raised by the conversion toolkit.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    /// Operand shapes are incompatible.
    #[error("shape error: {0}")]
    Shape(String),

    /// The graph is malformed (dangling reference, ordering, arity, weight shape).
    #[error("structural error in layer '{layer}': {reason}")]
    Structural { layer: String, reason: String },

    /// The graph is well formed but violates a convertibility constraint.
    #[error("constraint violation: {}", format_violations(.0))]
    Constraint(Vec<Violation>),

    /// The portable model file could not be decoded.
    #[error(transparent)]
    Format(#[from] crate::format::FormatError),

    /// A caller-supplied argument is out of range.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A spiking layer has no threshold assigned.
    #[error("conversion incomplete: no threshold for spiking layer '{0}'")]
    ConversionIncomplete(String),

    /// A spiking layer never became active during normalization.
    #[error("degenerate layer '{0}': maximum activation is zero")]
    DegenerateLayer(String),

    /// A threshold of zero cannot be folded into the weights.
    #[error("cannot divide weights of '{0}' by a zero threshold")]
    ZeroThreshold(String),

    /// Training diverged.
    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },

    /// The dataset could not be read.
    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

pub type Result<T> = std::result::Result<T, Error>;
