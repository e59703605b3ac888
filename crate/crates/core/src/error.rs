use alloc::string::String;
use alloc::vec::Vec;

use crate::backends::PortError;
use crate::substrate::{Payload, ScopeId, SessionId};

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("fact text is empty after normalization")]
    EmptyFact,
    #[error("turn list is empty")]
    EmptyTurns,
    #[error("turn timestamps are not nondecreasing")]
    UnorderedTurns,
    #[error("session {0} has no turns")]
    EmptySession(SessionId),
    #[error("session {session} is invalid: {reason}")]
    InvalidSession { session: SessionId, reason: String },
    #[error("scope key is empty")]
    EmptyScopeKey,
    #[error("payload {payload:?} cannot live in scope {scope}")]
    PayloadFamilyMismatch { scope: ScopeId, payload: Payload },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("vector dimension mismatch: index holds {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("session {0} already ingested")]
    AlreadyIngested(SessionId),
    #[error("flush pending: {0} dirty nodes")]
    FlushPending(usize),
    #[error("unknown retrieval mode {0:?}")]
    UnknownMode(String),
    #[error("unsupported migration: {requested}; supported: {supported}")]
    UnsupportedMigration { requested: String, supported: String },
    #[error("{} chunk(s) failed extraction", .0.len())]
    ChunkFailures(Vec<ChunkError>),
    #[error("backend error: {0}")]
    Backend(#[from] PortError),
    #[error("snapshot error: {0}")]
    Snapshot(String),
}

/// A chunk that exhausted its extraction retries.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ChunkError {
    pub session_id: SessionId,
    pub chunk_index: u32,
    pub attempts: u32,
    pub message: String,
}
