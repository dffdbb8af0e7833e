//! Error type shared across the crate.

use thiserror::Error;

/// Errors surfaced by dataset construction, training stages and the CLI.
///
/// Shape and template-role violations inside the tensor engine and the model
/// are programming errors and panic instead; everything that depends on user
/// input or on-disk artifacts goes through this enum.
#[derive(Debug, Error)]
pub enum GrcError {
    /// Invalid configuration (bad field values, exhausted suffix alphabet, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Malformed input data, with enough context to find the offending row.
    #[error("data error: {0}")]
    Data(String),

    /// A pipeline stage was invoked before its prerequisite artifact exists.
    #[error("missing artifact {path}: run `grc {needed}` first")]
    MissingArtifact { path: String, needed: String },

    /// An existing artifact was produced from different inputs or config.
    #[error("stale artifact {path}: {detail} (rerun with --force to overwrite)")]
    StaleArtifact { path: String, detail: String },

    /// Non-finite gradients or losses where the contract requires aborting.
    #[error("numerical fault in {context}")]
    Numerical { context: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl GrcError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        GrcError::Io { path: path.into(), source }
    }

    /// Process exit code: 1 for usage/config problems, 2 for runtime faults.
    pub fn exit_code(&self) -> i32 {
        match self {
            GrcError::Config(_)
            | GrcError::MissingArtifact { .. }
            | GrcError::StaleArtifact { .. } => 1,
            _ => 2,
        }
    }
}
