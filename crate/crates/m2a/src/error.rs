use std::path::Path;

use serde::Serialize;

/// Every failure a command can report. Rendered as one JSON line on stderr.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Config(String),
    /// Malformed dataset record; `line` is 1-based.
    #[error("{path}:{line}: field `{field}`: {message}")]
    Record {
        path: String,
        line: usize,
        field: String,
        message: String,
    },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error(transparent)]
    Core(#[from] m2a_core::Error),
    #[error("{0}")]
    Usage(String),
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    error: &'a str,
    kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    line: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    field: Option<&'a str>,
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn checkpoint(path: &Path, msg: impl Into<String>) -> Self {
        CliError::Checkpoint {
            path: path.display().to_string(),
            message: msg.into(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Io { .. } => "io",
            CliError::Config(_) => "config",
            CliError::Record { .. } => "record",
            CliError::Checkpoint { .. } => "checkpoint",
            CliError::Core(_) => "core",
            CliError::Usage(_) => "usage",
        }
    }

    /// Single-line machine-readable form.
    pub fn to_json_line(&self) -> String {
        let msg = self.to_string();
        let (line, field) = match self {
            CliError::Record { line, field, .. } => (Some(*line), Some(field.as_str())),
            _ => (None, None),
        };
        serde_json::to_string(&ErrorRecord {
            error: &msg,
            kind: self.kind(),
            line,
            field,
        })
        .expect("error record serializes")
    }
}
