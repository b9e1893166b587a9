use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("qubit index {index} out of range for a {n_qubits}-qubit register")]
    QubitOutOfRange { index: usize, n_qubits: usize },

    #[error("register of {0} qubits is not supported (1..=4)")]
    RegisterSize(usize),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("non-physical channel: {0}")]
    NonPhysicalChannel(String),

    #[error("channel is trace-decreasing; apply it through a herald")]
    TraceDecreasing,

    #[error("herald outcome has zero probability")]
    ZeroProbability,

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("invalid pulse sequence: {0}")]
    InvalidSequence(String),

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn param(name: &str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.to_string(),
            reason: reason.into(),
        }
    }
}
