use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid date: {0}")]
    InvalidDate(String),

    #[error("schema violation in {file}: {msg}")]
    Schema { file: String, msg: String },

    #[error("{file} row {row}: {msg}")]
    BadRow { file: String, row: usize, msg: String },

    #[error("duplicate row for asset {asset_id} on {date} hour {hour}")]
    DuplicateRow {
        asset_id: String,
        date: String,
        hour: u32,
    },

    #[error("unknown asset_id {0}")]
    UnknownAsset(String),

    #[error("calibration infeasible: {0}")]
    Infeasible(String),

    #[error("fit failed for {what}: {msg}")]
    Fit { what: String, msg: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("missing upstream artifact {0}")]
    MissingArtifact(PathBuf),

    #[error("checksum mismatch in {0}")]
    Checksum(PathBuf),

    #[error("stale input {input} for {artifact} (rerun upstream or pass --force)")]
    Stale { artifact: PathBuf, input: PathBuf },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn fit(what: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Fit {
            what: what.into(),
            msg: msg.into(),
        }
    }
}
