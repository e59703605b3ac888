//! Session ingestion: fixed-size chunking, concurrent extraction, and lexical
//! canonicalization into facts.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backends::{par_map, LedgerSnapshot, PortResult, Ports};
use crate::error::{ChunkError, Error, Result};
use crate::memtree::FlushStats;
use crate::router;
use crate::store::Store;
use crate::substrate::{
    canonical_key, derive_anchor, normalize_label, CanonicalFact, CellId, DialogueCell, FactId,
    RoutedRecord, ScopeId, Session, SessionArtifacts, SessionId, SourceRef,
    TemporalAnchor, Turn, TurnRange,
};

/// A contiguous run of at most `b` turns, extracted independently.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionChunk {
    pub session_id: SessionId,
    /// 1-based chunk position `j`.
    pub chunk_index: u32,
    pub turns: Vec<Turn>,
    pub anchor: TemporalAnchor,
}

impl ExtractionChunk {
    pub fn range(&self) -> TurnRange {
        TurnRange::new(self.turns[0].index, self.turns[self.turns.len() - 1].index)
    }

    /// Raw text of the chunk, one `speaker: text` line per turn.
    pub fn render(&self) -> String {
        render_turns(&self.turns)
    }
}

pub(crate) fn render_turns(turns: &[Turn]) -> String {
    let mut out = String::new();
    for (i, t) in turns.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(t.speaker.as_str());
        out.push_str(": ");
        out.push_str(&t.text);
    }
    out
}

/// One memory candidate returned by an extraction call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactCandidate {
    pub session_id: SessionId,
    pub source: TurnRange,
    pub text: String,
    pub anchor: TemporalAnchor,
    pub entities: BTreeSet<String>,
    pub topics: BTreeSet<String>,
}

/// Splits a session into `ceil(n / b)` chunks of `b` consecutive turns.
pub fn partition(session: &Session, b: usize) -> Result<Vec<ExtractionChunk>> {
    if b == 0 {
        return Err(Error::Config("chunk size must be at least 1".into()));
    }
    if session.turns.is_empty() {
        return Err(Error::EmptySession(session.session_id.clone()));
    }
    session
        .turns
        .chunks(b)
        .enumerate()
        .map(|(j, turns)| {
            Ok(ExtractionChunk {
                session_id: session.session_id.clone(),
                chunk_index: j as u32 + 1,
                turns: turns.to_vec(),
                anchor: derive_anchor(turns)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExtractionOutcome {
    /// Ordered by (chunk index, order within the chunk).
    pub candidates: Vec<FactCandidate>,
    /// Chunk index of each candidate, parallel to `candidates`.
    pub chunk_of: Vec<u32>,
    pub errors: Vec<ChunkError>,
}

/// Runs the extractor over every chunk, at most `ports.exec.budget()` at a
/// time. Each chunk is retried up to `retries` extra times; a chunk that still
/// fails is reported in `errors` without affecting its siblings.
pub fn extract_chunks(chunks: &[ExtractionChunk], ports: &Ports<'_>, retries: u32) -> ExtractionOutcome {
    let results: Vec<(u32, PortResult<Vec<FactCandidate>>)> = par_map(ports.exec, chunks, |chunk| {
        let mut attempts = 0;
        loop {
            attempts += 1;
            match ports.extract(chunk) {
                Ok(c) => return (attempts, Ok(c)),
                Err(e) if attempts > retries => return (attempts, Err(e)),
                Err(_) => continue,
            }
        }
    });

    let mut out = ExtractionOutcome::default();
    for (chunk, (attempts, res)) in chunks.iter().zip(results) {
        match res {
            Ok(cands) => {
                for c in cands {
                    out.candidates.push(clamp_to_chunk(c, chunk));
                    out.chunk_of.push(chunk.chunk_index);
                }
            }
            Err(e) => out.errors.push(ChunkError {
                session_id: chunk.session_id.clone(),
                chunk_index: chunk.chunk_index,
                attempts,
                message: e.message,
            }),
        }
    }
    out
}

// Backends may return sloppy provenance; keep it inside the producing chunk.
fn clamp_to_chunk(mut c: FactCandidate, chunk: &ExtractionChunk) -> FactCandidate {
    let range = chunk.range();
    c.session_id = chunk.session_id.clone();
    if !range.contains(&c.source) {
        c.source = range;
    }
    let turns: Vec<Turn> = chunk
        .turns
        .iter()
        .filter(|t| c.source.first <= t.index && t.index <= c.source.last)
        .cloned()
        .collect();
    let source_anchor = derive_anchor(&turns).unwrap_or(chunk.anchor);
    if !source_anchor.contains(&c.anchor) {
        c.anchor = source_anchor;
    }
    c
}

/// A fact produced by canonicalization that does not exist in the store yet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactDraft {
    pub text: String,
    pub anchor: TemporalAnchor,
    pub source_refs: BTreeSet<SourceRef>,
    pub entities: BTreeSet<String>,
    pub topics: BTreeSet<String>,
    pub canonical_key: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "into", content = "target")]
pub enum MergeTarget {
    /// Collapsed into the n-th draft of this batch.
    Draft(usize),
    /// Collapsed into a fact already in the store.
    Existing(FactId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeEntry {
    pub candidate: usize,
    pub key: String,
    pub target: MergeTarget,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Canonicalized {
    pub drafts: Vec<FactDraft>,
    pub merges: Vec<MergeEntry>,
    /// Candidates skipped because their text normalized to nothing.
    pub skipped: Vec<usize>,
    /// Source references gained by existing facts.
    pub existing: BTreeMap<FactId, BTreeSet<SourceRef>>,
}

/// Groups candidates by [`canonical_key`]. Groups whose key already names a
/// stored fact only contribute source references to it.
pub fn canonicalize<F>(candidates: &[FactCandidate], existing: F) -> Canonicalized
where
    F: Fn(&str) -> Option<FactId>,
{
    let mut out = Canonicalized::default();
    let mut draft_of_key: BTreeMap<String, usize> = BTreeMap::new();
    let mut first_member: Vec<usize> = Vec::new();

    for (i, c) in candidates.iter().enumerate() {
        let key = match canonical_key(&c.text) {
            Ok(k) => k,
            Err(_) => {
                out.skipped.push(i);
                continue;
            }
        };
        let source = SourceRef { session_id: c.session_id.clone(), turns: c.source };

        if let Some(id) = existing(&key) {
            out.existing.entry(id).or_default().insert(source);
            out.merges.push(MergeEntry { candidate: i, key, target: MergeTarget::Existing(id) });
            continue;
        }

        match draft_of_key.get(&key) {
            Some(&d) => {
                let draft = &mut out.drafts[d];
                if c.anchor.start < draft.anchor.start {
                    draft.text = c.text.trim().to_string();
                }
                draft.anchor = draft.anchor.union(&c.anchor);
                draft.source_refs.insert(source);
                draft.entities.extend(normalized(&c.entities));
                draft.topics.extend(normalized(&c.topics));
                out.merges.push(MergeEntry { candidate: i, key, target: MergeTarget::Draft(d) });
            }
            None => {
                draft_of_key.insert(key.clone(), out.drafts.len());
                first_member.push(i);
                let mut source_refs = BTreeSet::new();
                source_refs.insert(source);
                out.drafts.push(FactDraft {
                    text: c.text.trim().to_string(),
                    anchor: c.anchor,
                    source_refs,
                    entities: normalized(&c.entities),
                    topics: normalized(&c.topics),
                    canonical_key: key,
                });
            }
        }
    }
    out
}

fn normalized(labels: &BTreeSet<String>) -> BTreeSet<String> {
    labels.iter().map(|l| normalize_label(l)).filter(|l| !l.is_empty()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ChunkErrorPolicy {
    Abort,
    #[default]
    SkipChunk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub session_id: SessionId,
    pub chunks: usize,
    pub candidates: usize,
    pub facts: usize,
    pub duplicates_merged: usize,
    pub skipped_empty: usize,
    pub cells: usize,
    pub trees_touched: Vec<ScopeId>,
    pub chunk_errors: Vec<ChunkError>,
    pub merge_log: Vec<MergeEntry>,
    pub flush: FlushStats,
    pub calls: LedgerSnapshot,
}

impl Store {
    /// Partition, extract, canonicalize, route and materialize one session.
    ///
    /// The session becomes queryable as soon as this returns. Chunk failures
    /// follow `policy`; with [`ChunkErrorPolicy::Abort`] nothing is written.
    pub fn ingest_session(
        &mut self,
        session: Session,
        ports: &Ports<'_>,
        policy: ChunkErrorPolicy,
    ) -> Result<IngestReport> {
        session.validate()?;
        if self.registry().contains(&session.session_id) || self.session(&session.session_id).is_some() {
            return Err(Error::AlreadyIngested(session.session_id));
        }
        let before = ports.ledger.snapshot();
        let chunks = partition(&session, self.config.chunk_size)?;
        let extracted = extract_chunks(&chunks, ports, self.config.extract_retries);
        if policy == ChunkErrorPolicy::Abort && !extracted.errors.is_empty() {
            return Err(Error::ChunkFailures(extracted.errors));
        }

        let canon = canonicalize(&extracted.candidates, |key| self.fact_by_key(key));
        let sid = session.session_id.clone();
        let mut artifacts = SessionArtifacts::default();

        // One dialogue cell per chunk that yielded at least one kept candidate.
        let skipped: BTreeSet<usize> = canon.skipped.iter().copied().collect();
        let productive: BTreeSet<u32> = extracted
            .chunk_of
            .iter()
            .enumerate()
            .filter(|(i, _)| !skipped.contains(i))
            .map(|(_, j)| *j)
            .collect();
        let mut cell_of_range: BTreeMap<TurnRange, CellId> = BTreeMap::new();
        for chunk in chunks.iter().filter(|c| productive.contains(&c.chunk_index)) {
            let cell = DialogueCell {
                cell_id: self.alloc_cell_id(),
                session_id: sid.clone(),
                turns: chunk.range(),
                text: chunk.render(),
                anchor: chunk.anchor,
            };
            cell_of_range.insert(cell.turns, cell.cell_id);
            artifacts.cells.insert(cell.cell_id);
            self.insert_cell(cell);
        }

        for (id, refs) in &canon.existing {
            self.add_source_refs(*id, refs.iter().cloned());
            artifacts.facts.insert(*id);
        }
        let mut new_facts = Vec::with_capacity(canon.drafts.len());
        for draft in &canon.drafts {
            let fact = CanonicalFact {
                fact_id: self.alloc_fact_id(),
                text: draft.text.clone(),
                anchor: draft.anchor,
                source_refs: draft.source_refs.clone(),
                entities: draft.entities.clone(),
                topics: draft.topics.clone(),
                canonical_key: draft.canonical_key.clone(),
            };
            artifacts.facts.insert(fact.fact_id);
            new_facts.push(fact.fact_id);
            self.insert_fact(fact);
        }
        self.insert_session(session);

        // Cells whose turns source any fact touched by this session.
        let mut records: Vec<RoutedRecord> = Vec::new();
        let mut emitted = BTreeSet::new();
        for id in &artifacts.facts {
            let cells = self.cells_for_fact(*id, &sid, &cell_of_range);
            records.extend(router::route_cells(&cells, &mut emitted)?);
        }
        self.retry_deferred_scenes(ports, &mut records)?;
        for id in &new_facts {
            records.extend(self.route_new_fact(*id, ports)?);
        }

        let flush = self.apply_updates(&records, ports)?;
        let mut touched: BTreeSet<ScopeId> = BTreeSet::new();
        for r in &records {
            touched.insert(r.scope.clone());
            if let Some(t) = self.tree_for_scope(&r.scope) {
                artifacts.trees.insert(t);
            }
        }
        let candidates = extracted.candidates.len() - canon.skipped.len();
        let report = IngestReport {
            session_id: sid.clone(),
            chunks: chunks.len(),
            candidates,
            facts: canon.drafts.len(),
            duplicates_merged: canon.merges.len(),
            skipped_empty: canon.skipped.len(),
            cells: artifacts.cells.len(),
            trees_touched: touched.into_iter().collect(),
            chunk_errors: extracted.errors,
            merge_log: canon.merges,
            flush,
            calls: ports.ledger.snapshot().since(&before),
        };
        self.registry_mut().register(sid, artifacts);
        Ok(report)
    }

    fn cells_for_fact(
        &self,
        id: FactId,
        session: &SessionId,
        cell_of_range: &BTreeMap<TurnRange, CellId>,
    ) -> Vec<DialogueCell> {
        let Some(fact) = self.fact(id) else { return Vec::new() };
        fact.source_refs
            .iter()
            .filter(|r| &r.session_id == session)
            .filter_map(|r| {
                cell_of_range
                    .iter()
                    .find(|(range, _)| range.contains(&r.turns))
                    .and_then(|(_, c)| self.cell(*c).cloned())
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::{Precision, Speaker, Timestamp};
    use alloc::format;
    use alloc::vec;

    fn session(n: u32) -> Session {
        let turns = (1..=n)
            .map(|i| Turn {
                session_id: SessionId::new("s"),
                index: i,
                speaker: if i % 2 == 1 { Speaker::User } else { Speaker::Assistant },
                text: format!("turn {i}"),
                timestamp: Timestamp(1000 + i as i64 * 60),
                precision: Precision::Second,
            })
            .collect();
        Session::new(SessionId::new("s"), 0, turns).unwrap()
    }

    fn sizes(chunks: &[ExtractionChunk]) -> Vec<usize> {
        chunks.iter().map(|c| c.turns.len()).collect()
    }

    #[test]
    fn partition_examples() {
        assert_eq!(sizes(&partition(&session(5), 2).unwrap()), vec![2, 2, 1]);
        assert_eq!(sizes(&partition(&session(4), 2).unwrap()), vec![2, 2]);
        assert_eq!(sizes(&partition(&session(3), 8).unwrap()), vec![3]);
        assert!(matches!(partition(&session(3), 0), Err(Error::Config(_))));
    }

    #[test]
    fn partition_chunk_bounds_follow_formula() {
        let s = session(7);
        let b = 3;
        for c in partition(&s, b).unwrap() {
            let j = c.chunk_index as usize;
            assert_eq!(c.range().first as usize, (j - 1) * b + 1);
            assert_eq!(c.range().last as usize, (j * b).min(7));
        }
    }

    fn cand(text: &str, ts: i64) -> FactCandidate {
        FactCandidate {
            session_id: SessionId::new("s"),
            source: TurnRange::new(1, 2),
            text: text.into(),
            anchor: TemporalAnchor::point(Timestamp(ts)),
            entities: ["Bob".to_string()].into_iter().collect(),
            topics: BTreeSet::new(),
        }
    }

    #[test]
    fn canonicalize_collapses_case_and_punctuation() {
        let c = canonicalize(&[cand("Bob moved to Miami.", 10), cand("bob moved to Miami", 5)], |_| None);
        assert_eq!(c.drafts.len(), 1);
        assert_eq!(c.merges.len(), 1);
        // earliest-anchored member's text wins
        assert_eq!(c.drafts[0].text, "bob moved to Miami");
        assert_eq!(c.drafts[0].anchor.start, Timestamp(5));
        assert_eq!(c.drafts[0].anchor.end, Timestamp(10));
        assert!(c.drafts[0].entities.contains("bob"));
    }

    #[test]
    fn canonicalize_keeps_distinct_keys() {
        let c = canonicalize(&[cand("Bob moved to Davis.", 1), cand("Bob moved to Miami.", 2)], |_| None);
        assert_eq!(c.drafts.len(), 2);
        assert!(c.merges.is_empty());
    }

    #[test]
    fn canonicalize_merges_into_store_and_skips_empty() {
        let c = canonicalize(&[cand("Bob moved to Davis.", 1), cand(" ... ", 2)], |k| {
            (k == "bob moved to davis").then_some(FactId(42))
        });
        assert!(c.drafts.is_empty());
        assert_eq!(c.skipped, vec![1]);
        assert_eq!(c.merges[0].target, MergeTarget::Existing(FactId(42)));
        assert_eq!(c.existing[&FactId(42)].len(), 1);
    }

    #[test]
    fn canonicalize_is_idempotent_against_its_output() {
        let cands = [cand("A b c.", 1), cand("a B c", 2), cand("D e f", 3)];
        let first = canonicalize(&cands, |_| None);
        let keys: BTreeSet<String> = first.drafts.iter().map(|d| d.canonical_key.clone()).collect();
        let second = canonicalize(&cands, |k| keys.contains(k).then_some(FactId(1)));
        assert!(second.drafts.is_empty());
        assert_eq!(first.drafts.len() + first.merges.len(), cands.len());
    }
}
