use a2_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("non-finite loss at step {step} on batch [{batch}]; diagnostics in {dump}")]
    NonFinite { step: u64, batch: String, dump: String },
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 2 for configuration problems, 3 for data problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Core(CoreError::Config(_)) | Self::Core(CoreError::Routing { .. }) => 2,
            Self::Data(_) | Self::Core(CoreError::Data(_)) | Self::Core(CoreError::Format(_)) => 3,
            _ => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl From<a2_core::tensorcore::TensorError> for CliError {
    fn from(e: a2_core::tensorcore::TensorError) -> Self {
        Self::Core(e.into())
    }
}
