use thiserror::Error;

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
}
