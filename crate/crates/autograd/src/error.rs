use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("gradient error: {0}")]
    Grad(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;
