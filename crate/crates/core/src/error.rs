use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed input: {0}")]
    Malformed(String),

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    Dimension {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("matrix is not positive definite (pivot {pivot} = {value:e}); {context}")]
    NotPositiveDefinite {
        pivot: usize,
        value: f64,
        context: String,
    },

    #[error("singular block: {0}")]
    Singular(String),

    #[error("partition scheme does not match graph: {0}")]
    SchemeMismatch(String),

    #[error(
        "vertex {vertex} is not diagonally dominant (surplus {surplus:e}); supply a manual partition scheme"
    )]
    NotDiagonallyDominant { vertex: usize, surplus: f64 },

    #[error("invalid impedance: {0}")]
    InvalidImpedance(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("toml decode: {0}")]
    TomlDecode(#[from] toml::de::Error),

    #[error("toml encode: {0}")]
    TomlEncode(#[from] toml::ser::Error),
}

impl Error {
    pub(crate) fn malformed(msg: impl Into<String>) -> Self {
        Error::Malformed(msg.into())
    }

    pub(crate) fn mismatch(msg: impl Into<String>) -> Self {
        Error::SchemeMismatch(msg.into())
    }
}
