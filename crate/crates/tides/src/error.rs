//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are not conformable for a primitive.
    #[error("shape mismatch in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A tape/graph contract was violated (loss not scalar, node not on tape, ...).
    #[error("graph error: {detail}")]
    Graph { detail: String },

    /// A computation produced NaN or infinity where finite values are required.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// An argument is outside its mathematical domain (nonpositive delta,
    /// discretization pole, empty spectrum, ...).
    #[error("domain error: {detail}")]
    Domain { detail: String },

    /// Configuration file or key validation failure.
    #[error("config error: {detail}")]
    Config { detail: String },

    /// Dataset ingestion or format failure.
    #[error("data error: {detail}")]
    Data { detail: String },

    /// A verified property did not hold.
    #[error("property `{name}` failed: {detail}")]
    Property { name: String, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn graph(detail: impl Into<String>) -> Self {
        Error::Graph { detail: detail.into() }
    }

    pub fn domain(detail: impl Into<String>) -> Self {
        Error::Domain { detail: detail.into() }
    }

    pub fn config(detail: impl Into<String>) -> Self {
        Error::Config { detail: detail.into() }
    }

    pub fn data(detail: impl Into<String>) -> Self {
        Error::Data { detail: detail.into() }
    }

    /// Process exit code for the CLI: 1 validation, 2 property, 3 runtime.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config { .. } | Error::Data { .. } | Error::Domain { .. } => 1,
            Error::Property { .. } => 2,
            _ => 3,
        }
    }
}
