use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    /// Config document violates the schema; `key` is the offending key path.
    #[error("{key}: {message}")]
    Schema {
        key: String,
        message: String,
        offset: Option<usize>,
    },

    #[error("{path}: {message}")]
    Io { path: String, message: String },

    /// A pass/fail check ran to completion and failed.
    #[error("{0}")]
    Check(String),

    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: omkit::Error,
    },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Body of the JSON document written to standard error on failure.
#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub category: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offset: Option<usize>,
}

impl CliError {
    pub fn schema(key: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Schema {
            key: key.into(),
            message: message.into(),
            offset: None,
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, err: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.as_ref().display().to_string(),
            message: err.to_string(),
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Schema { .. } => "schema",
            CliError::Io { .. } => "io",
            CliError::Check(_) => "check",
            CliError::Core { source, .. } => source.category(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    pub fn report(&self) -> ErrorReport {
        let (key, offset) = match self {
            CliError::Schema { key, offset, .. } => (Some(key.clone()), *offset),
            CliError::Core {
                source: omkit::Error::Parse(p),
                ..
            } => (None, Some(p.offset)),
            _ => (None, None),
        };
        ErrorReport {
            category: self.category().to_string(),
            message: self.to_string(),
            key,
            offset,
        }
    }
}

/// Attaches a context string to core errors.
pub trait Context<T> {
    fn context(self, what: impl Into<String>) -> CliResult<T>;
}

impl<T> Context<T> for omkit::Result<T> {
    fn context(self, what: impl Into<String>) -> CliResult<T> {
        self.map_err(|source| CliError::Core {
            context: what.into(),
            source,
        })
    }
}
