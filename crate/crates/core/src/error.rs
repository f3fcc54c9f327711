use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },
    #[error("non-finite value at index {index} in {context}")]
    NonFinite { context: &'static str, index: usize },
    #[error("softmax row {row} has no unmasked entry")]
    DegenerateRow { row: usize },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("gradient audit invalid: {0}")]
    AuditInvalid(String),
    #[error("line {line}: {kind}")]
    Parse { line: usize, kind: ParseErrorKind },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u64, expected: u64 },
    #[error("checkpoint integrity error: {0}")]
    Integrity(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Why a single cohort line was rejected.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseErrorKind {
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("timestamps not strictly increasing at event {event}")]
    Order { event: usize },
    #[error("event {event} has {found} values, expected {expected}")]
    Schema {
        event: usize,
        found: usize,
        expected: usize,
    },
    #[error("record has no events")]
    Empty,
    #[error("label must be 0 or 1, got {0}")]
    Label(u64),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Error {
    Error::Shape {
        op,
        left: format!("{}x{}", left.0, left.1),
        right: format!("{}x{}", right.0, right.1),
    }
}
