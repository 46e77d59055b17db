use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("pixel ({x}, {y}) is outside a {width}x{height} image")]
    Coordinate {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },

    #[error("invalid MSFA pattern: {0}")]
    Pattern(String),

    #[error("structure error: {0}")]
    Structure(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
