use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] outage_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("replication {index} (seed {seed}) failed: {source}")]
    Replication {
        index: usize,
        seed: u64,
        #[source]
        source: outage_core::Error,
    },

    #[error("{0}")]
    Invalid(String),
}

impl CliError {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Core(_) => "model",
            CliError::Io { .. } => "io",
            CliError::Replication { .. } => "replication",
            CliError::Invalid(_) => "invalid",
        }
    }

    /// One JSON object describing the error.
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::json!({
            "error": self.kind(),
            "message": self.to_string(),
        });
        if let CliError::Replication { index, seed, .. } = self {
            v["replication"] = serde_json::json!(index);
            v["seed"] = serde_json::json!(seed);
        }
        v
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
