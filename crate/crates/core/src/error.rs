use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty tensor")]
    EmptyTensor,

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("tensor {0} is not on the tape")]
    NotOnTape(usize),

    #[error("loss must be a scalar, got dims {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("missing weight `{0}`")]
    MissingWeight(String),

    #[error("malformed {field}: {msg}")]
    Format { field: String, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors caused by bad input files rather than failed checks.
    pub fn is_input_error(&self) -> bool {
        matches!(self, Error::Format { .. } | Error::Io(_) | Error::MissingWeight(_))
    }
}
