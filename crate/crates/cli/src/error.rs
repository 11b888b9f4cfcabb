use std::fmt;
use std::path::Path;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Config,
    MissingArtifact,
    Runtime,
}

impl Kind {
    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Config => 2,
            Kind::MissingArtifact => 3,
            Kind::Runtime => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Config,
            message: message.into(),
        }
    }

    pub fn missing(path: &Path, hint: &str) -> Self {
        Self {
            kind: Kind::MissingArtifact,
            message: format!("missing artifact {} ({hint})", path.display()),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Runtime,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let label = match self.kind {
            Kind::Config => "config error",
            Kind::MissingArtifact => "missing artifact",
            Kind::Runtime => "error",
        };
        if self.kind == Kind::MissingArtifact {
            f.write_str(&self.message)
        } else {
            write!(f, "{label}: {}", self.message)
        }
    }
}

impl std::error::Error for CliError {}

impl From<efsa::Error> for CliError {
    fn from(e: efsa::Error) -> Self {
        match e {
            efsa::Error::Config(m) => CliError::config(m),
            e => CliError::runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
