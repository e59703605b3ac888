//! Persistent data model: sessions, canonical facts, dialogue cells, scopes,
//! and the reverse maps (placement, session registry) that make localized
//! delete and merge possible.
//!
//! Everything here is persistent state. Summaries, embeddings and index rows
//! live elsewhere and can always be regenerated from these values.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

macro_rules! numeric_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

numeric_id!(
    /// Store-local identifier of a canonical fact.
    FactId
);
numeric_id!(
    /// Store-local identifier of a dialogue cell.
    CellId
);
numeric_id!(
    /// Store-local identifier of a MemTree.
    TreeId
);
numeric_id!(
    /// Identifier of a tree node. Unique across all trees of one store.
    NodeId
);
numeric_id!(
    /// Identifier of a scene cluster.
    ClusterId
);

/// Opaque session identifier supplied by the caller.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionId(pub String);

impl SessionId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Absolute UTC instant, seconds since the Unix epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub i64);

/// How much of a timestamp is meaningful. Ordered finest to coarsest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Second,
    Day,
    Month,
    Year,
}

/// A point or closed interval in time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TemporalAnchor {
    pub start: Timestamp,
    pub end: Timestamp,
    pub precision: Precision,
}

impl TemporalAnchor {
    pub fn point(at: Timestamp) -> Self {
        Self { start: at, end: at, precision: Precision::Second }
    }

    /// Builds an interval, swapping the bounds if they arrive reversed.
    pub fn span(a: Timestamp, b: Timestamp, precision: Precision) -> Self {
        let (start, end) = if a <= b { (a, b) } else { (b, a) };
        Self { start, end, precision }
    }

    /// Smallest interval covering both; keeps the coarser precision.
    pub fn union(&self, other: &Self) -> Self {
        Self {
            start: self.start.min(other.start),
            end: self.end.max(other.end),
            precision: self.precision.max(other.precision),
        }
    }

    pub fn contains(&self, other: &Self) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    pub fn is_point(&self) -> bool {
        self.start == self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Assistant,
}

impl Speaker {
    pub fn as_str(self) -> &'static str {
        match self {
            Speaker::User => "user",
            Speaker::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub session_id: SessionId,
    /// 1-based position within the session.
    pub index: u32,
    pub speaker: Speaker,
    pub text: String,
    pub timestamp: Timestamp,
    #[serde(default, skip_serializing_if = "is_second")]
    pub precision: Precision,
}

fn is_second(p: &Precision) -> bool {
    *p == Precision::Second
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: SessionId,
    pub turns: Vec<Turn>,
    /// Position of this session in the arrival stream.
    pub arrival_seq: u64,
}

impl Session {
    /// Builds a session, renumbering turns 1..=n and stamping their session id.
    pub fn new(session_id: SessionId, arrival_seq: u64, turns: Vec<Turn>) -> Result<Self> {
        if turns.is_empty() {
            return Err(Error::EmptySession(session_id));
        }
        let mut turns = turns;
        for (i, turn) in turns.iter_mut().enumerate() {
            turn.index = i as u32 + 1;
            turn.session_id = session_id.clone();
        }
        let session = Self { session_id, turns, arrival_seq };
        session.validate()?;
        Ok(session)
    }

    pub fn validate(&self) -> Result<()> {
        if self.turns.is_empty() {
            return Err(Error::EmptySession(self.session_id.clone()));
        }
        for (i, pair) in self.turns.windows(2).enumerate() {
            if pair[1].index <= pair[0].index {
                return Err(Error::InvalidSession {
                    session: self.session_id.clone(),
                    reason: alloc::format!("turn index not increasing at position {}", i + 2),
                });
            }
            if pair[1].timestamp < pair[0].timestamp {
                return Err(Error::InvalidSession {
                    session: self.session_id.clone(),
                    reason: alloc::format!("timestamps decrease at turn {}", pair[1].index),
                });
            }
        }
        if self.turns[0].index < 1 {
            return Err(Error::InvalidSession {
                session: self.session_id.clone(),
                reason: "turn indexes are 1-based".into(),
            });
        }
        Ok(())
    }

    /// Turns whose index falls in `range` (inclusive).
    pub fn turns_in(&self, range: TurnRange) -> impl Iterator<Item = &Turn> {
        self.turns.iter().filter(move |t| range.first <= t.index && t.index <= range.last)
    }
}

/// Inclusive, 1-based range of turn indexes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TurnRange {
    pub first: u32,
    pub last: u32,
}

impl TurnRange {
    pub fn new(first: u32, last: u32) -> Self {
        Self { first: first.min(last), last: first.max(last) }
    }

    pub fn contains(&self, other: &TurnRange) -> bool {
        self.first <= other.first && other.last <= self.last
    }

    pub fn len(&self) -> u32 {
        self.last - self.first + 1
    }
}

/// Where a fact came from: a session and a span of its turns.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SourceRef {
    pub session_id: SessionId,
    pub turns: TurnRange,
}

/// The stable write unit: one temporally anchored, deduplicated statement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonicalFact {
    pub fact_id: FactId,
    pub text: String,
    pub anchor: TemporalAnchor,
    pub source_refs: BTreeSet<SourceRef>,
    pub entities: BTreeSet<String>,
    pub topics: BTreeSet<String>,
    pub canonical_key: String,
}

impl CanonicalFact {
    /// Whether any source reference points into `session`.
    pub fn sourced_from(&self, session: &SessionId) -> bool {
        self.source_refs.iter().any(|r| &r.session_id == session)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Session,
    Entity,
    Scene,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Session, Family::Entity, Family::Scene];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Session => "session",
            Family::Entity => "entity",
            Family::Scene => "scene",
        }
    }
}

/// A temporal scope: one evolving target that a MemTree materializes.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ScopeId {
    pub family: Family,
    pub key: String,
}

impl ScopeId {
    pub fn session(id: &SessionId) -> Self {
        Self { family: Family::Session, key: id.0.clone() }
    }

    pub fn entity(label: &str) -> Result<Self> {
        let key = normalize_label(label);
        if key.is_empty() {
            return Err(Error::EmptyScopeKey);
        }
        Ok(Self { family: Family::Entity, key })
    }

    pub fn scene(cluster: ClusterId) -> Self {
        Self { family: Family::Scene, key: alloc::format!("{}", cluster.0) }
    }
}

impl fmt::Display for ScopeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.family.as_str(), self.key)
    }
}

/// Raw dialogue slice used as a session-tree leaf. One cell per extraction chunk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueCell {
    pub cell_id: CellId,
    pub session_id: SessionId,
    pub turns: TurnRange,
    pub text: String,
    pub anchor: TemporalAnchor,
}

/// What a tree leaf is derived from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "type", content = "id")]
pub enum Payload {
    Fact(FactId),
    Cell(CellId),
}

/// A (scope, payload) pair emitted by routing and consumed by tree maintenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutedRecord {
    pub scope: ScopeId,
    pub payload: Payload,
    pub anchor: TemporalAnchor,
}

impl RoutedRecord {
    pub fn new(scope: ScopeId, payload: Payload, anchor: TemporalAnchor) -> Result<Self> {
        let ok = matches!(
            (scope.family, payload),
            (Family::Session, Payload::Cell(_))
                | (Family::Entity, Payload::Fact(_))
                | (Family::Scene, Payload::Fact(_))
        );
        if !ok {
            return Err(Error::PayloadFamilyMismatch { scope, payload });
        }
        Ok(Self { scope, payload, anchor })
    }
}

/// Reverse index from payloads to the tree leaves derived from them.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementMap {
    entries: BTreeMap<Payload, BTreeSet<(TreeId, NodeId)>>,
}

impl PlacementMap {
    pub fn insert(&mut self, payload: Payload, tree: TreeId, leaf: NodeId) {
        self.entries.entry(payload).or_default().insert((tree, leaf));
    }

    pub fn remove(&mut self, payload: Payload, tree: TreeId, leaf: NodeId) {
        if let Some(set) = self.entries.get_mut(&payload) {
            set.remove(&(tree, leaf));
            if set.is_empty() {
                self.entries.remove(&payload);
            }
        }
    }

    pub fn get(&self, payload: &Payload) -> impl Iterator<Item = &(TreeId, NodeId)> {
        self.entries.get(payload).into_iter().flatten()
    }

    pub fn trees_of(&self, payload: &Payload) -> BTreeSet<TreeId> {
        self.get(payload).map(|(t, _)| *t).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Payload, &BTreeSet<(TreeId, NodeId)>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub(crate) fn retain_tree(&mut self, tree: TreeId) {
        self.entries.retain(|_, set| {
            set.retain(|(t, _)| *t != tree);
            !set.is_empty()
        });
    }
}

/// Artifacts produced by ingesting one session.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionArtifacts {
    /// Facts that gained a source reference from this session (new or pre-existing).
    pub facts: BTreeSet<FactId>,
    pub cells: BTreeSet<CellId>,
    pub trees: BTreeSet<TreeId>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionRegistry {
    entries: BTreeMap<SessionId, SessionArtifacts>,
}

impl SessionRegistry {
    /// Records the artifacts of `session`, replacing any earlier entry.
    pub fn register(&mut self, session: SessionId, artifacts: SessionArtifacts) {
        self.entries.insert(session, artifacts);
    }

    /// Artifacts for `session`; empty when the session is unknown.
    pub fn lookup(&self, session: &SessionId) -> SessionArtifacts {
        self.entries.get(session).cloned().unwrap_or_default()
    }

    pub fn get(&self, session: &SessionId) -> Option<&SessionArtifacts> {
        self.entries.get(session)
    }

    pub(crate) fn values_mut(&mut self) -> impl Iterator<Item = &mut SessionArtifacts> {
        self.entries.values_mut()
    }

    pub fn contains(&self, session: &SessionId) -> bool {
        self.entries.contains_key(session)
    }

    pub fn remove(&mut self, session: &SessionId) -> Option<SessionArtifacts> {
        self.entries.remove(session)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SessionId, &SessionArtifacts)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Lexical dedup key: case-folded, whitespace-collapsed, punctuation-stripped.
pub fn canonical_key(text: &str) -> Result<String> {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for ch in text.chars() {
        if ch.is_whitespace() {
            pending_space = !out.is_empty();
            continue;
        }
        if !ch.is_alphanumeric() && !is_inner_joiner(ch) {
            // punctuation separates words the same way whitespace does
            pending_space = !out.is_empty();
            continue;
        }
        if pending_space {
            out.push(' ');
            pending_space = false;
        }
        out.extend(ch.to_lowercase());
    }
    if out.is_empty() {
        return Err(Error::EmptyFact);
    }
    Ok(out)
}

// Apostrophes and hyphens stay inside words ("Bob's", "re-run").
fn is_inner_joiner(ch: char) -> bool {
    matches!(ch, '\'' | '-' | '’')
}

/// Case-fold and trim an entity or topic label.
pub fn normalize_label(label: &str) -> String {
    let mut out = String::new();
    for word in label.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.extend(word.chars().flat_map(char::to_lowercase));
    }
    out
}

/// Anchor spanning the first to last timestamp of `turns`.
pub fn derive_anchor(turns: &[Turn]) -> Result<TemporalAnchor> {
    let first = turns.first().ok_or(Error::EmptyTurns)?;
    let last = turns.last().ok_or(Error::EmptyTurns)?;
    if turns.windows(2).any(|w| w[1].timestamp < w[0].timestamp) {
        return Err(Error::UnorderedTurns);
    }
    let precision = turns.iter().map(|t| t.precision).max().unwrap_or_default();
    Ok(TemporalAnchor { start: first.timestamp, end: last.timestamp, precision })
}
