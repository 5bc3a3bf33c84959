use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("token {token}: expected {expected} factors, found {found}")]
    FactorCount {
        token: usize,
        expected: usize,
        found: usize,
    },

    #[error("token {token}: invalid factor value {value:?}")]
    FactorValue { token: usize, value: String },

    #[error("invalid feature scheme: {0}")]
    Scheme(String),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{what}: id {id} out of range (size {size})")]
    Lookup { what: String, id: usize, size: usize },

    #[error("alignment error on line {line}: {detail}")]
    Alignment { line: usize, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}
