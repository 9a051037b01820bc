//! Experiment harness: configuration, fixture suites and the sweeps built on
//! top of single rounds.

mod config;
mod experiments;
mod fixtures;

pub use config::*;
pub use experiments::*;
pub use fixtures::*;

use crate::protocol::ProtocolError;
use crate::scene_sim::SceneError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    /// A configuration value is missing, malformed or out of range. `key` is
    /// the dotted path of the offending entry.
    #[error("invalid config key `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("precondition: {0}")]
    Precondition(String),
    #[error("scene: {0}")]
    Scene(#[from] SceneError),
    #[error("protocol: {0}")]
    Protocol(#[from] ProtocolError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    /// Short stable identifier for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config { .. } => "config",
            Self::Syntax(_) => "syntax",
            Self::Precondition(_) => "precondition",
            Self::Scene(_) => "scene",
            Self::Protocol(_) => "protocol",
            Self::Io(_) => "io",
            Self::Csv(_) => "csv",
        }
    }

    /// The offending config key, if the error names one.
    pub fn key(&self) -> Option<&str> {
        match self {
            Self::Config { key, .. } => Some(key),
            _ => None,
        }
    }
}
