use std::path::PathBuf;

use cxs_core::error::CxsError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("missing input {}", .0.display())]
    MissingInput(PathBuf),
    #[error("{0}")]
    Usage(String),
    #[error("gradient check failed: {component} has relative error {error:e}")]
    GradientCheck { component: String, error: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] CxsError),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    /// Stable machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::MissingInput(_) => "missing_file",
            CliError::Usage(_) => "usage",
            CliError::GradientCheck { .. } => "check_failed",
            CliError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => "missing_file",
            CliError::Io { .. } => "io",
            CliError::Core(e) => match e {
                CxsError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => "missing_file",
                CxsError::Config(_)
                | CxsError::InvalidSpec(_)
                | CxsError::InvalidThreshold(_)
                | CxsError::InvalidTarget(_)
                | CxsError::InvalidBudget { .. }
                | CxsError::UnknownVariant(_) => "config",
                CxsError::Checkpoint(_)
                | CxsError::Geometry(_)
                | CxsError::BadMagic { .. }
                | CxsError::VersionMismatch { .. }
                | CxsError::Truncated(_)
                | CxsError::LengthMismatch(_)
                | CxsError::Json(_) => "mismatch",
                _ => "runtime",
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "usage" => 2,
            "missing_file" => 3,
            "config" => 4,
            "mismatch" => 5,
            "check_failed" => 6,
            _ => 1,
        }
    }

    /// One JSON object on one line.
    pub fn to_line(&self) -> String {
        serde_json::json!({
            "error": self.kind(),
            "code": self.exit_code(),
            "message": self.to_string(),
        })
        .to_string()
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn categories_have_distinct_codes() {
        let missing = CliError::MissingInput("x".into());
        let config = CliError::Core(CxsError::Config("bad".into()));
        let mismatch = CliError::Core(CxsError::Geometry("grid".into()));
        let codes = [missing.exit_code(), config.exit_code(), mismatch.exit_code()];
        assert_eq!(codes, [3, 4, 5]);
        let line = mismatch.to_line();
        assert!(!line.contains('\n'));
        let parsed: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(parsed["error"], "mismatch");
    }

    #[test]
    fn not_found_io_counts_as_missing() {
        let e = CliError::Core(CxsError::Io(std::io::Error::from(std::io::ErrorKind::NotFound)));
        assert_eq!(e.kind(), "missing_file");
    }
}
