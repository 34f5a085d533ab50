use std::fmt;

use thiserror::Error;

/// One problem found while validating a dataset or robot description.
#[derive(Debug, Clone, PartialEq)]
pub struct Issue {
    /// Zero-based record index, `None` for header-level problems.
    pub record: Option<usize>,
    pub field: String,
    pub message: String,
}

impl Issue {
    pub fn record(index: usize, field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            record: Some(index),
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn header(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            record: None,
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.record {
            Some(i) => write!(f, "record {i}, field `{}`: {}", self.field, self.message),
            None => write!(f, "field `{}`: {}", self.field, self.message),
        }
    }
}

fn join_issues(issues: &[Issue]) -> String {
    issues
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown frame `{0}`")]
    UnknownFrame(String),

    #[error("unknown {kind} `{id}`")]
    UnknownId { kind: &'static str, id: String },

    #[error("joint vector has {got} entries, model has {expected} revolute joints")]
    JointCountMismatch { expected: usize, got: usize },

    #[error("length mismatch for {what}: expected {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("validation failed: {}", join_issues(.0))]
    Validation(Vec<Issue>),

    #[error("residual system is empty: no valid measurement")]
    EmptySystem,

    #[error("solver aborted: {0}")]
    Solver(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("toml error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
