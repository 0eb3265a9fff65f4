use certprobe_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    /// Bad input detected by the CLI itself rather than the core library.
    #[error("{message}")]
    Data { kind: &'static str, message: String },

    #[error("{0}")]
    Internal(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn data(kind: &'static str, message: impl Into<String>) -> Self {
        CliError::Data {
            kind,
            message: message.into(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "UsageError",
            CliError::Core(e) => e.kind(),
            CliError::Data { kind, .. } => kind,
            CliError::Internal(_) => "InternalError",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(CoreError::InvalidConfig(_)) => 1,
            CliError::Core(_) | CliError::Data { .. } => 2,
            CliError::Internal(_) => 3,
        }
    }

    /// Single-line machine-readable record for stderr.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.to_string() }).to_string()
    }
}
