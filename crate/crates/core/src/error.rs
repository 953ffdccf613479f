use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {operand}: expected {expected:?}, got {actual:?}")]
    Shape {
        operand: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("wrong model variant: expected {expected}, got {actual}")]
    WrongVariant {
        expected: &'static str,
        actual: String,
    },
    #[error("insufficient look-ahead: window holds {got} vectors, need {need}")]
    ShortWindow { got: usize, need: usize },
    #[error("lattice has a cycle through node {0}")]
    LatticeCycle(usize),
    #[error("lattice node {0} is dead (unreachable from start or cannot reach end)")]
    DeadNode(usize),
    #[error("malformed lattice: {0}")]
    MalformedLattice(String),
    #[error("path enumeration exceeded the cap of {0} paths")]
    PathCapExceeded(usize),
    #[error("beam pruning emptied the search at frame {frame}")]
    PruningEmptied { frame: usize },
    #[error("non-scalar loss of shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage {stage} requires a {required} checkpoint")]
    MissingDependency { stage: String, required: String },
    #[error("frozen parameters changed: checksum {before} -> {after}")]
    FreezeViolation { before: String, after: String },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable kind tag, used by the CLI error record.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidValue(_) => "invalid_value",
            Error::Empty(_) => "empty",
            Error::WrongVariant { .. } => "wrong_variant",
            Error::ShortWindow { .. } => "short_window",
            Error::LatticeCycle(_) => "lattice_cycle",
            Error::DeadNode(_) => "dead_node",
            Error::MalformedLattice(_) => "malformed_lattice",
            Error::PathCapExceeded(_) => "path_cap_exceeded",
            Error::PruningEmptied { .. } => "pruning_emptied",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::Config(_) => "config",
            Error::MissingDependency { .. } => "missing_dependency",
            Error::FreezeViolation { .. } => "freeze_violation",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
