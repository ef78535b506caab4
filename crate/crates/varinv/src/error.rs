use std::path::PathBuf;

use thiserror::Error;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

#[derive(Debug, Error)]
pub enum AppError {
    #[error(transparent)]
    Core(#[from] varinv_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: bad magic `{found}`, expected `{expected}`")]
    BadMagic { path: PathBuf, found: String, expected: &'static str },
    #[error("{path}: malformed header: {msg}")]
    Header { path: PathBuf, msg: String },
    #[error("{path}: truncated payload, expected {expected} bytes, found {found}")]
    Truncated { path: PathBuf, expected: usize, found: usize },
    #[error("{path}: dimension mismatch: {msg}")]
    Dims { path: PathBuf, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error("missing artifact {0}; run the upstream command first")]
    Missing(PathBuf),
    #[error("{path}: content hash differs from the one recorded in {manifest}")]
    HashMismatch { path: PathBuf, manifest: PathBuf },
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl AppError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> AppError {
        let path = path.into();
        move |source| AppError::Io { path, source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) => EXIT_CONFIG,
            AppError::Core(e) if e.is_config() => EXIT_CONFIG,
            AppError::Core(e) if e.is_divergence() => EXIT_DIVERGENCE,
            AppError::GradCheck(_) => EXIT_DIVERGENCE,
            _ => EXIT_DATA,
        }
    }

    /// One-line JSON message for stderr.
    pub fn structured(&self) -> String {
        let kind = match self {
            AppError::Core(_) => "core",
            AppError::Io { .. } => "io",
            AppError::BadMagic { .. } => "bad_magic",
            AppError::Header { .. } => "header",
            AppError::Truncated { .. } => "truncated",
            AppError::Dims { .. } => "dimension_mismatch",
            AppError::Config(_) => "config",
            AppError::Missing(_) => "missing_artifact",
            AppError::HashMismatch { .. } => "hash_mismatch",
            AppError::GradCheck(_) => "gradcheck",
        };
        serde_json::json!({ "error": kind, "exit_code": self.exit_code(), "message": self.to_string() }).to_string()
    }
}

pub type Result<T> = std::result::Result<T, AppError>;
