use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("window error: {0}")]
    Window(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("distribution error: {0}")]
    Distribution(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("corruption error: {0}")]
    Corruption(String),

    #[error("degenerate-weight error: {0}")]
    DegenerateWeight(String),

    #[error("pairing error: {0}")]
    Pairing(String),

    #[error("runtime error: {0}")]
    Runtime(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
