use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("input size error: {0}")]
    Size(String),

    #[error("training data error: {0}")]
    Data(String),

    #[error(transparent)]
    Core(#[from] rawmix_core::Error),

    #[error(transparent)]
    Autodiff(#[from] rawmix_autodiff::Error),
}
