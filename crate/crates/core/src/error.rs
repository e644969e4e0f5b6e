use crate::tensorcore::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("no adapter route for language {lang:?}; known: {known:?}")]
    Routing { lang: String, known: Vec<String> },
    #[error("data error: {0}")]
    Data(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
