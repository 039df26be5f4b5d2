use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("model configuration error: {0}")]
    ModelConfig(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("data error at line {line}: {msg}")]
    Data { line: usize, msg: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("sampler startup failed: {0}")]
    Startup(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
