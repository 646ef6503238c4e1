use std::path::PathBuf;

use thiserror::Error;

use crate::knowledge::CacheKind;
use crate::training::LossReport;

pub type Result<T, E = CoolError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CoolError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{path}: no records")]
    NoRecords { path: PathBuf },

    #[error("{path}: {} malformed line(s): {}", errors.len(), errors.iter().map(|(l, m)| format!("line {l}: {m}")).collect::<Vec<_>>().join("; "))]
    MalformedRecords {
        path: PathBuf,
        errors: Vec<(usize, String)>,
    },

    #[error("duplicate record id {0:?}")]
    DuplicateId(String),

    #[error("invalid K-shot request: {0}")]
    Sampling(String),

    #[error("offline cache miss for {kind} key {key:?}")]
    CacheMiss { kind: CacheKind, key: String },

    #[error("network failure for {kind} key {key:?}: {message}")]
    Network {
        kind: CacheKind,
        key: String,
        message: String,
    },

    #[error("malformed entity id {0:?}")]
    EntityId(String),

    #[error("snapshot error: {0}")]
    Snapshot(String),

    #[error("snapshot import conflicts on {} key(s): {}", .0.len(), .0.join(", "))]
    SnapshotConflict(Vec<String>),

    #[error("{0:?} tokenizes to zero tokens")]
    EmptyTokens(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("verbalizer error: {0}")]
    Verbalizer(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("zero-norm embedding for sample {0}; cosine similarity undefined")]
    ZeroNorm(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("non-finite loss at step {}", .0.step)]
    NonFiniteLoss(Box<LossReport>),

    #[error("format error: {0}")]
    Format(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown ablation variant {0:?}")]
    UnknownVariant(String),

    #[error("empty input: {0}")]
    Empty(String),
}
