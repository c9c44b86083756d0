use std::fmt;
use std::path::PathBuf;

use sonovis_core::CoreError;
use sonovis_diff::DiffError;

/// Failure classes with stable exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Other,
    Config,
    MissingInput,
    Incompatible,
    Diverged,
}

impl Kind {
    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Other => 1,
            Kind::Config => 2,
            Kind::MissingInput => 3,
            Kind::Incompatible => 4,
            Kind::Diverged => 5,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Other => "error",
            Kind::Config => "config",
            Kind::MissingInput => "missing-input",
            Kind::Incompatible => "incompatible",
            Kind::Diverged => "diverged",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: Kind, message: impl Into<String>) -> Self {
        CliError {
            kind,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(Kind::Config, message)
    }

    pub fn missing(path: impl Into<PathBuf>) -> Self {
        Self::new(Kind::MissingInput, format!("missing file {}", path.into().display()))
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::NotFound {
            return Self::missing(path);
        }
        Self::new(Kind::Other, format!("io error on {}: {e}", path.display()))
    }

    /// One JSON object on one line, for stderr.
    pub fn line(&self) -> String {
        serde_json::json!({
            "error": self.kind.as_str(),
            "exit_code": self.kind.exit_code(),
            "message": self.message,
        })
        .to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind.as_str(), self.message)
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let kind = match &e {
            CoreError::Config(_) => Kind::Config,
            CoreError::MissingFile(_) | CoreError::DanglingPath { .. } => Kind::MissingInput,
            CoreError::Incompatible(_) => Kind::Incompatible,
            CoreError::Diverged { .. } => Kind::Diverged,
            CoreError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => Kind::MissingInput,
            CoreError::Diff(DiffError::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => {
                Kind::MissingInput
            }
            _ => Kind::Other,
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<DiffError> for CliError {
    fn from(e: DiffError) -> Self {
        CoreError::from(e).into()
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::new(Kind::Other, format!("json: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
