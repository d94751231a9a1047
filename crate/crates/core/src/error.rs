use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the imputation library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("no usable rows after dropping {dropped} fully-missing row(s)")]
    EmptyData { dropped: usize },

    #[error("column {col} ({label}) has no observed entries")]
    DegenerateColumn { col: usize, label: String },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("data set is not estimatable: rating-provider graph has {} components", components.len())]
    NotEstimatable { components: Vec<Vec<usize>> },

    #[error("data set is not level-1 estimatable: {} missing entr{} without a fully observed corner (first: {:?})",
        entries.len(), if entries.len() == 1 { "y" } else { "ies" }, entries.first())]
    NotLevel1 { entries: Vec<(usize, usize)> },

    #[error("missing-entry count {count} exceeds the dense solver cap {cap}; use dqp-svas")]
    ResourceCap { count: usize, cap: usize },

    #[error("linear solve failed: {0}; re-check estimatability / level-1 estimatability of the input")]
    Solver(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("synthetic generation failed: {0}")]
    Generation(String),

    #[error("fold construction failed: {0}")]
    Fold(String),

    #[error("multiple imputation failed: {0}")]
    MultipleImputation(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code for command-line front ends: 1 usage or config,
    /// 2 estimatability, 3 resource cap, 4 input/output or parsing.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Parse { .. } | Error::EmptyData { .. } | Error::Json(_) => 4,
            Error::NotEstimatable { .. } | Error::NotLevel1 { .. } | Error::DegenerateColumn { .. } => 2,
            Error::ResourceCap { .. } => 3,
            _ => 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(Error::ResourceCap { count: 2, cap: 1 }.exit_code(), 3);
        assert_eq!(Error::NotLevel1 { entries: vec![] }.exit_code(), 2);
        assert_eq!(Error::Parse { row: 1, message: "x".into() }.exit_code(), 4);
        assert_eq!(Error::Config("x".into()).exit_code(), 1);
    }
}
