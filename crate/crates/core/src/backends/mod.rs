//! Ports for every model-dependent step, plus deterministic mocks.
//!
//! The engine never talks to a model directly. Extraction, summarization,
//! embedding, planning and branch choice all go through the traits below, and
//! every call is metered through [`Ports`] into a [`PortCallLedger`].

mod exec;
mod ledger;
pub mod mock;

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::ingest::{ExtractionChunk, FactCandidate};
use crate::substrate::{Family, TemporalAnchor, TreeId};

pub use exec::{par_map, Clock, Executor, NullClock, Sequential};
pub use ledger::{LedgerSnapshot, PortCallLedger, PortCounters, PortKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PortErrorKind {
    /// Network, timeout, rate limit. Worth retrying.
    Transient,
    /// Schema violation or refusal that survived the repair attempt.
    Permanent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{kind:?} failure: {message}")]
pub struct PortError {
    pub kind: PortErrorKind,
    pub message: String,
}

impl PortError {
    pub fn transient(message: impl Into<String>) -> Self {
        Self { kind: PortErrorKind::Transient, message: message.into() }
    }

    pub fn permanent(message: impl Into<String>) -> Self {
        Self { kind: PortErrorKind::Permanent, message: message.into() }
    }
}

pub type PortResult<T> = core::result::Result<T, PortError>;

pub trait Extractor: Sync {
    fn extract(&self, chunk: &ExtractionChunk) -> PortResult<Vec<FactCandidate>>;
}

pub trait Summarizer: Sync {
    /// Summarizes `texts` (ordered oldest first) covering `interval`.
    fn summarize(&self, interval: &TemporalAnchor, texts: &[&str]) -> PortResult<String>;
}

pub trait Embedder: Sync {
    fn embed(&self, text: &str) -> PortResult<Vec<f32>>;
}

/// What the planner sees of one recalled tree.
#[derive(Debug, Clone, Copy)]
pub struct RootView<'a> {
    pub tree: TreeId,
    pub family: Family,
    pub topic: &'a str,
    pub summary: &'a str,
}

pub trait Planner: Sync {
    /// One call covering all recalled roots. Trees missing from the result
    /// fall back to the original query.
    fn plan(&self, query: &str, roots: &[RootView<'_>]) -> PortResult<Vec<(TreeId, String)>>;
}

/// What the chooser sees of one child during LLM-guided browse.
#[derive(Debug, Clone, Copy)]
pub struct ChildView<'a> {
    pub summary: &'a str,
    pub interval: TemporalAnchor,
    pub is_leaf: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Choice {
    /// Positions into the child list, in preference order.
    Children(Vec<usize>),
    Stop,
}

pub trait Chooser: Sync {
    fn choose(&self, subquery: &str, children: &[ChildView<'_>]) -> PortResult<Choice>;
}

/// Port bundle handed to engine operations. All calls are metered.
#[derive(Clone, Copy)]
pub struct Ports<'a> {
    pub extractor: &'a dyn Extractor,
    pub summarizer: &'a dyn Summarizer,
    pub embedder: &'a dyn Embedder,
    pub planner: Option<&'a dyn Planner>,
    pub chooser: Option<&'a dyn Chooser>,
    pub ledger: &'a PortCallLedger,
    pub exec: &'a dyn Executor,
    pub clock: &'a dyn Clock,
}

impl<'a> Ports<'a> {
    pub fn extract(&self, chunk: &ExtractionChunk) -> PortResult<Vec<FactCandidate>> {
        let input: usize = chunk.turns.iter().map(|t| t.text.len()).sum();
        let out = self.extractor.extract(chunk);
        let output = match &out {
            Ok(c) => c.iter().map(|c| c.text.len()).sum(),
            Err(_) => 0,
        };
        self.ledger.record(PortKind::Extractor, input, output, out.is_err());
        out
    }

    pub fn summarize(&self, interval: &TemporalAnchor, texts: &[&str]) -> PortResult<String> {
        let input: usize = texts.iter().map(|t| t.len()).sum();
        let out = self.summarizer.summarize(interval, texts);
        let output = out.as_ref().map(|s| s.len()).unwrap_or(0);
        self.ledger.record(PortKind::Summarizer, input, output, out.is_err());
        out
    }

    /// Embeds and L2-normalizes. A zero vector is a permanent failure.
    pub fn embed(&self, text: &str) -> PortResult<Vec<f32>> {
        let out = self.embedder.embed(text).and_then(|mut v| {
            if crate::index::normalize(&mut v) {
                Ok(v)
            } else {
                Err(PortError::permanent("embedder returned a zero or non-finite vector"))
            }
        });
        let output = out.as_ref().map(|v| v.len()).unwrap_or(0);
        self.ledger.record(PortKind::Embedder, text.len(), output, out.is_err());
        out
    }

    pub fn plan(&self, query: &str, roots: &[RootView<'_>]) -> Option<PortResult<Vec<(TreeId, String)>>> {
        let planner = self.planner?;
        let input = query.len() + roots.iter().map(|r| r.summary.len()).sum::<usize>();
        let out = planner.plan(query, roots);
        let output = out.as_ref().map(|v| v.iter().map(|(_, s)| s.len()).sum()).unwrap_or(0);
        self.ledger.record(PortKind::Planner, input, output, out.is_err());
        Some(out)
    }

    pub fn choose(&self, subquery: &str, children: &[ChildView<'_>]) -> Option<PortResult<Choice>> {
        let chooser = self.chooser?;
        let input = subquery.len() + children.iter().map(|c| c.summary.len()).sum::<usize>();
        let out = chooser.choose(subquery, children);
        self.ledger.record(PortKind::Chooser, input, 0, out.is_err());
        Some(out)
    }
}
