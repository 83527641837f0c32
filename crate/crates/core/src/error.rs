use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised anywhere in the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("wrong number of options: expected {expected}, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("ids missing from task-a data: {0:?}")]
    Join(Vec<String>),
    #[error("translation coverage: {0}")]
    Coverage(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("parameter shapes differ in groups {0:?}")]
    GroupShapes(Vec<String>),
    #[error("checkpoint format: {0}")]
    Format(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
