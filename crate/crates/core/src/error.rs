use crate::ledger::LedgerError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Ledger(#[from] LedgerError),

    #[error("shape mismatch in {op}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("length mismatch in {op}: expected {expected}, got {actual}")]
    LengthMismatch {
        op: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("value {value} outside the domain of {op}")]
    Domain { op: &'static str, value: f64 },

    #[error("layer {layer}: activation derivative {derivative:e} is numerically singular")]
    Singular { layer: usize, derivative: f64 },

    #[error("missing {what} residual for layer {layer}")]
    MissingResidual { layer: usize, what: &'static str },

    #[error("estimated work {estimate:e} exceeds budget {budget:e}")]
    BudgetExceeded { estimate: f64, budget: f64 },

    #[error("cannot fit: {0}")]
    Fit(String),

    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("label {label} outside [0, {classes})")]
    Label { label: usize, classes: usize },

    #[error("dataset row {row}: {reason}")]
    Dataset { row: usize, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Attaches a layer index to errors raised by a layer that does not know its own position.
    pub(crate) fn at_layer(self, layer: usize) -> Self {
        match self {
            Error::Singular { derivative, .. } => Error::Singular { layer, derivative },
            Error::MissingResidual { what, .. } => Error::MissingResidual { layer, what },
            other => other,
        }
    }
}
