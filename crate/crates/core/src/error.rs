use alloc::string::String;

use crate::tensor::TensorError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite activation in {0}")]
    NonFinite(String),
    #[error("assignment: {0}")]
    Assignment(String),
    #[error("synthetic data: {0}")]
    Data(String),
    #[error("evaluation: {0}")]
    Eval(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
