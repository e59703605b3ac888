//! Deterministic, network-free port implementations.
//!
//! These double as the test oracle: every method is a pure function of its
//! input (plus fixed configuration), so repeated runs and any degree of
//! parallelism produce identical stores.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU32, AtomicUsize, Ordering};

use chrono::DateTime;

use super::{
    ChildView, Choice, Chooser, Embedder, Executor, Extractor, NullClock, Planner, PortCallLedger, PortError,
    PortResult, Ports, RootView, Sequential, Summarizer,
};
use crate::ingest::{ExtractionChunk, FactCandidate};
use crate::substrate::{derive_anchor, normalize_label, Precision, SessionId, TemporalAnchor, Timestamp, TreeId, TurnRange};

pub const MOCK_DIM: usize = 16;

const STOPWORDS: &[&str] = &[
    "i", "i'm", "i've", "i'd", "i'll", "we", "you", "he", "she", "it", "they", "my", "our", "your", "his", "her",
    "their", "the", "a", "an", "this", "that", "these", "those", "and", "but", "or", "so", "yes", "no", "ok",
    "okay", "thanks", "thank", "hi", "hello", "hey", "sure", "well", "oh", "also", "then", "there", "here",
    "what", "when", "where", "why", "how", "who", "which", "last", "next", "in", "on", "at", "for", "from",
    "to", "of", "with", "after", "before", "since", "during", "great", "nice", "cool", "good", "wow",
    "january", "february", "march", "april", "may", "june", "july", "august", "september", "october",
    "november", "december", "monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday",
];

/// Default topic buckets for the rule extractor.
pub fn default_topic_buckets() -> Vec<(String, Vec<String>)> {
    let raw: &[(&str, &[&str])] = &[
        ("residence", &["live", "lived", "lives", "living", "moved", "move", "moving", "apartment", "house", "home", "rent"]),
        ("work", &["work", "works", "worked", "job", "office", "company", "hired", "promoted", "manager", "colleague"]),
        ("travel", &["trip", "flight", "flew", "visit", "visited", "vacation", "travel", "traveled", "hotel"]),
        ("health", &["doctor", "hospital", "sick", "injury", "gym", "ran", "marathon", "diet", "sleep"]),
        ("food", &["cook", "cooked", "recipe", "restaurant", "dinner", "lunch", "baked", "coffee", "ate"]),
        ("family", &["sister", "brother", "mother", "father", "mom", "dad", "wife", "husband", "son", "daughter", "married"]),
        ("hobby", &["guitar", "painting", "paint", "hike", "hiking", "read", "reading", "book", "chess", "garden"]),
        ("pets", &["dog", "cat", "puppy", "kitten", "pet", "vet"]),
    ];
    raw.iter()
        .map(|(t, words)| (t.to_string(), words.iter().map(|w| w.to_string()).collect()))
        .collect()
}

/// Rule-based extractor: one candidate per declarative sentence that names
/// at least one entity.
#[derive(Debug, Clone)]
pub struct RuleExtractor {
    pub topic_buckets: Vec<(String, Vec<String>)>,
}

impl Default for RuleExtractor {
    fn default() -> Self {
        Self { topic_buckets: default_topic_buckets() }
    }
}

impl RuleExtractor {
    fn topics_of(&self, sentence: &str) -> BTreeSet<String> {
        let words: BTreeSet<String> = words(sentence).map(|w| w.to_lowercase()).collect();
        self.topic_buckets
            .iter()
            .filter(|(_, keys)| keys.iter().any(|k| words.contains(k)))
            .map(|(t, _)| t.clone())
            .collect()
    }
}

fn words(s: &str) -> impl Iterator<Item = &str> {
    s.split(|c: char| !(c.is_alphanumeric() || c == '\'' || c == '-')).filter(|w| !w.is_empty())
}

fn entity_of(word: &str) -> Option<String> {
    let first = word.chars().next()?;
    if !first.is_uppercase() {
        return None;
    }
    let stem = word.strip_suffix("'s").unwrap_or(word);
    let label = normalize_label(stem);
    if label.is_empty() || STOPWORDS.contains(&label.as_str()) {
        return None;
    }
    Some(label)
}

/// Splits text into sentences, keeping the terminator with each one.
pub fn sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let bytes: Vec<(usize, char)> = text.char_indices().collect();
    for (i, &(pos, ch)) in bytes.iter().enumerate() {
        let terminal = matches!(ch, '.' | '!' | '?' | '\n');
        let boundary = bytes.get(i + 1).map_or(true, |(_, next)| next.is_whitespace());
        if terminal && boundary {
            let end = pos + ch.len_utf8();
            let s = text[start..end].trim();
            if !s.is_empty() {
                out.push(s);
            }
            start = end;
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

impl Extractor for RuleExtractor {
    fn extract(&self, chunk: &ExtractionChunk) -> PortResult<Vec<FactCandidate>> {
        let mut out = Vec::new();
        for turn in &chunk.turns {
            for sentence in sentences(&turn.text) {
                if sentence.ends_with('?') || words(sentence).count() < 3 {
                    continue;
                }
                let entities: BTreeSet<String> = words(sentence).filter_map(entity_of).collect();
                if entities.is_empty() {
                    continue;
                }
                let anchor = derive_anchor(core::slice::from_ref(turn)).unwrap_or(chunk.anchor);
                out.push(FactCandidate {
                    session_id: chunk.session_id.clone(),
                    source: TurnRange::new(turn.index, turn.index),
                    text: sentence.to_string(),
                    anchor,
                    entities,
                    topics: self.topics_of(sentence),
                });
            }
        }
        Ok(out)
    }
}

/// Replays recorded candidates keyed by `(session_id, chunk_index)`.
/// Chunks without an entry yield nothing.
#[derive(Debug, Clone, Default)]
pub struct FixtureExtractor {
    pub entries: BTreeMap<(SessionId, u32), Vec<FactCandidate>>,
}

impl Extractor for FixtureExtractor {
    fn extract(&self, chunk: &ExtractionChunk) -> PortResult<Vec<FactCandidate>> {
        Ok(self
            .entries
            .get(&(chunk.session_id.clone(), chunk.chunk_index))
            .cloned()
            .unwrap_or_default())
    }
}

/// Wraps another extractor and injects failures for chosen chunks.
///
/// A chunk listed with `n` fails its first `n` attempts with a transient
/// error; `u32::MAX` makes it fail for good.
#[derive(Debug, Default)]
pub struct FlakyExtractor<E> {
    pub inner: E,
    failures: BTreeMap<(SessionId, u32), (u32, AtomicU32)>,
}

impl<E> FlakyExtractor<E> {
    pub fn new(inner: E) -> Self {
        Self { inner, failures: BTreeMap::new() }
    }

    pub fn fail(mut self, session: &str, chunk_index: u32, times: u32) -> Self {
        self.failures.insert((SessionId::new(session), chunk_index), (times, AtomicU32::new(0)));
        self
    }
}

impl<E: Extractor> Extractor for FlakyExtractor<E> {
    fn extract(&self, chunk: &ExtractionChunk) -> PortResult<Vec<FactCandidate>> {
        if let Some((times, seen)) = self.failures.get(&(chunk.session_id.clone(), chunk.chunk_index)) {
            if seen.fetch_add(1, Ordering::SeqCst) < *times {
                return Err(PortError::transient(format!("injected failure for chunk {}", chunk.chunk_index)));
            }
        }
        self.inner.extract(chunk)
    }
}

/// Renders an interval at the anchor's precision, e.g. `2023-03..2024-07`.
pub fn render_interval(anchor: &TemporalAnchor) -> String {
    let fmt = match anchor.precision {
        Precision::Second => "%Y-%m-%d %H:%M",
        Precision::Day => "%Y-%m-%d",
        Precision::Month => "%Y-%m",
        Precision::Year => "%Y",
    };
    let one = |t: Timestamp| match DateTime::from_timestamp(t.0, 0) {
        Some(dt) => dt.format(fmt).to_string(),
        None => format!("@{}", t.0),
    };
    let (a, b) = (one(anchor.start), one(anchor.end));
    if a == b {
        a
    } else {
        format!("{a}..{b}")
    }
}

/// First clause of a text, ignoring a leading `[interval]` prefix.
pub fn first_clause(text: &str) -> &str {
    let mut t = text.trim_start();
    if t.starts_with('[') {
        if let Some(end) = t.find(']') {
            t = t[end + 1..].trim_start();
        }
    }
    let cut = t
        .char_indices()
        .find(|&(i, c)| {
            c == ';' || c == '\n' || (matches!(c, '.' | '!' | '?') && t[i + 1..].starts_with(char::is_whitespace))
        })
        .map_or(t.len(), |(i, _)| i);
    t[..cut].trim_end_matches(['.', '!', '?']).trim()
}

/// Concatenative summarizer: `[interval] clause; clause; ...`, capped at
/// `max_len` bytes on a clause boundary.
#[derive(Debug, Clone)]
pub struct ClauseSummarizer {
    pub max_len: usize,
}

impl Default for ClauseSummarizer {
    fn default() -> Self {
        Self { max_len: 480 }
    }
}

impl Summarizer for ClauseSummarizer {
    fn summarize(&self, interval: &TemporalAnchor, texts: &[&str]) -> PortResult<String> {
        if texts.is_empty() {
            return Err(PortError::permanent("nothing to summarize"));
        }
        let mut out = format!("[{}]", render_interval(interval));
        let mut first = true;
        for t in texts {
            let clause = first_clause(t);
            if clause.is_empty() {
                continue;
            }
            let sep = if first { " " } else { "; " };
            if !first && out.len() + sep.len() + clause.len() > self.max_len {
                break;
            }
            out.push_str(sep);
            out.push_str(clause);
            first = false;
        }
        if out.len() > self.max_len {
            let mut cut = self.max_len;
            while !out.is_char_boundary(cut) {
                cut -= 1;
            }
            out.truncate(cut);
        }
        Ok(out)
    }
}

/// Feature-hashing embedder over character trigrams, with exact-text overrides.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    pub dim: usize,
    pub overrides: BTreeMap<String, Vec<f32>>,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dim: MOCK_DIM, overrides: BTreeMap::new() }
    }
}

impl HashEmbedder {
    pub fn with_override(mut self, text: impl Into<String>, v: Vec<f32>) -> Self {
        self.overrides.insert(text.into(), v);
        self
    }

    fn hashed(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0.0f32; self.dim];
        let padded: Vec<char> = core::iter::once(' ')
            .chain(text.chars().flat_map(char::to_lowercase))
            .chain(core::iter::once(' '))
            .collect();
        for gram in padded.windows(3) {
            let mut h: u64 = 0xcbf2_9ce4_8422_2325;
            for c in gram {
                for b in (*c as u32).to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
            let bucket = (h % self.dim as u64) as usize;
            let sign = if (h >> 63) & 1 == 1 { -1.0 } else { 1.0 };
            v[bucket] += sign;
        }
        if v.iter().all(|x| *x == 0.0) {
            v[0] = 1.0;
        }
        v
    }
}

impl Embedder for HashEmbedder {
    fn embed(&self, text: &str) -> PortResult<Vec<f32>> {
        let mut v = match self.overrides.get(text) {
            Some(v) => v.clone(),
            None => self.hashed(text),
        };
        if !crate::index::normalize(&mut v) {
            return Err(PortError::permanent("override vector is zero"));
        }
        Ok(v)
    }
}

/// Specializes the query per tree as `within {topic}: {query}`.
#[derive(Debug, Clone, Copy, Default)]
pub struct TemplatePlanner;

impl Planner for TemplatePlanner {
    fn plan(&self, query: &str, roots: &[RootView<'_>]) -> PortResult<Vec<(TreeId, String)>> {
        Ok(roots.iter().map(|r| (r.tree, format!("within {}: {}", r.topic, query))).collect())
    }
}

/// Emits a fixed subquery for every tree whose root summary or topic contains
/// a trigger string. Other trees get no entry.
#[derive(Debug, Clone, Default)]
pub struct ScriptedPlanner {
    pub rules: Vec<(String, String)>,
}

impl Planner for ScriptedPlanner {
    fn plan(&self, _query: &str, roots: &[RootView<'_>]) -> PortResult<Vec<(TreeId, String)>> {
        let mut out = Vec::new();
        for r in roots {
            let hit = self.rules.iter().find(|(needle, _)| {
                let n = needle.to_lowercase();
                r.summary.to_lowercase().contains(&n) || r.topic.to_lowercase().contains(&n)
            });
            if let Some((_, sub)) = hit {
                out.push((r.tree, sub.clone()));
            }
        }
        Ok(out)
    }
}

/// Replays a fixed sequence of choices, one per call, then stops.
#[derive(Debug, Default)]
pub struct ScriptedChooser {
    pub script: Vec<Choice>,
    cursor: AtomicUsize,
}

impl ScriptedChooser {
    pub fn new(script: Vec<Choice>) -> Self {
        Self { script, cursor: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.cursor.load(Ordering::SeqCst)
    }
}

impl Chooser for ScriptedChooser {
    fn choose(&self, _subquery: &str, _children: &[ChildView<'_>]) -> PortResult<Choice> {
        let i = self.cursor.fetch_add(1, Ordering::SeqCst);
        Ok(self.script.get(i).cloned().unwrap_or(Choice::Stop))
    }
}

/// When the subquery contains a rule's trigger, picks the children whose
/// summary contains the rule's target. No matching rule or child means stop.
#[derive(Debug, Clone, Default)]
pub struct KeywordChooser {
    pub rules: Vec<(String, String)>,
}

impl Chooser for KeywordChooser {
    fn choose(&self, subquery: &str, children: &[ChildView<'_>]) -> PortResult<Choice> {
        let q = subquery.to_lowercase();
        for (trigger, target) in &self.rules {
            if !q.contains(&trigger.to_lowercase()) {
                continue;
            }
            let t = target.to_lowercase();
            let picks: Vec<usize> = children
                .iter()
                .enumerate()
                .filter(|(_, c)| c.summary.to_lowercase().contains(&t))
                .map(|(i, _)| i)
                .collect();
            if !picks.is_empty() {
                return Ok(Choice::Children(picks));
            }
        }
        Ok(Choice::Stop)
    }
}

/// Picks up to `beam` children by word overlap with the subquery.
#[derive(Debug, Clone, Copy)]
pub struct OverlapChooser {
    pub beam: usize,
}

impl Chooser for OverlapChooser {
    fn choose(&self, subquery: &str, children: &[ChildView<'_>]) -> PortResult<Choice> {
        let q: BTreeSet<String> = words(subquery).map(|w| w.to_lowercase()).filter(|w| w.len() > 2).collect();
        let mut scored: Vec<(usize, usize)> = children
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let w: BTreeSet<String> = words(c.summary).map(|w| w.to_lowercase()).collect();
                (i, q.intersection(&w).count())
            })
            .filter(|(_, s)| *s > 0)
            .collect();
        scored.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(self.beam.max(1));
        if scored.is_empty() {
            return Ok(Choice::Stop);
        }
        Ok(Choice::Children(scored.into_iter().map(|(i, _)| i).collect()))
    }
}

static SEQUENTIAL: Sequential = Sequential;
static NO_CLOCK: NullClock = NullClock;

/// Owns one of each mock port plus a ledger, and hands out [`Ports`].
pub struct MockBackends {
    pub extractor: Box<dyn Extractor>,
    pub summarizer: Box<dyn Summarizer>,
    pub embedder: HashEmbedder,
    pub planner: Option<Box<dyn Planner>>,
    pub chooser: Option<Box<dyn Chooser>>,
    pub ledger: PortCallLedger,
}

impl Default for MockBackends {
    fn default() -> Self {
        Self {
            extractor: Box::new(RuleExtractor::default()),
            summarizer: Box::new(ClauseSummarizer::default()),
            embedder: HashEmbedder::default(),
            planner: None,
            chooser: None,
            ledger: PortCallLedger::new(),
        }
    }
}

impl MockBackends {
    pub fn new() -> Self {
        Self::default()
    }

    /// Ports running sequentially with no clock.
    pub fn ports(&self) -> Ports<'_> {
        self.ports_with(&SEQUENTIAL)
    }

    pub fn ports_with<'a>(&'a self, exec: &'a dyn Executor) -> Ports<'a> {
        Ports {
            extractor: self.extractor.as_ref(),
            summarizer: self.summarizer.as_ref(),
            embedder: &self.embedder,
            planner: self.planner.as_deref(),
            chooser: self.chooser.as_deref(),
            ledger: &self.ledger,
            exec,
            clock: &NO_CLOCK,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::{cosine, dot};
    use crate::substrate::{Speaker, Turn};

    fn chunk(text: &str) -> ExtractionChunk {
        let turn = Turn {
            session_id: SessionId::new("s"),
            index: 1,
            speaker: Speaker::User,
            text: text.into(),
            timestamp: Timestamp(1_720_000_000),
            precision: Precision::Second,
        };
        ExtractionChunk {
            session_id: SessionId::new("s"),
            chunk_index: 1,
            anchor: derive_anchor(core::slice::from_ref(&turn)).unwrap(),
            turns: vec![turn],
        }
    }

    #[test]
    fn rule_extractor_pulls_named_entities() {
        let c = RuleExtractor::default().extract(&chunk("Bob moved from Davis to Miami in July 2024.")).unwrap();
        assert_eq!(c.len(), 1);
        for e in ["bob", "miami", "davis"] {
            assert!(c[0].entities.contains(e), "{e}");
        }
        assert!(!c[0].entities.contains("july"));
        assert!(c[0].topics.contains("residence"));
    }

    #[test]
    fn rule_extractor_ignores_interjections() {
        assert!(RuleExtractor::default().extract(&chunk("ok. thanks!")).unwrap().is_empty());
        assert!(RuleExtractor::default().extract(&chunk("Where does Bob live?")).unwrap().is_empty());
    }

    #[test]
    fn summarizer_is_order_sensitive_and_stable() {
        let s = ClauseSummarizer::default();
        let a = TemporalAnchor::span(Timestamp(1_677_628_800), Timestamp(1_719_792_000), Precision::Month);
        let one = s.summarize(&a, &["Bob moved to Davis. He liked it."]).unwrap();
        assert_eq!(one, "[2023-03..2024-07] Bob moved to Davis");
        let x = s.summarize(&a, &["alpha", "beta"]).unwrap();
        assert_eq!(x, s.summarize(&a, &["alpha", "beta"]).unwrap());
        assert_ne!(x, s.summarize(&a, &["beta", "alpha"]).unwrap());
        assert_eq!(first_clause("[2023] one; two"), "one");
    }

    #[test]
    fn summarizer_caps_length() {
        let s = ClauseSummarizer { max_len: 40 };
        let a = TemporalAnchor::point(Timestamp(0));
        let long = ["aaaaaaaaaaaaaaaaaaaa"; 10];
        assert!(s.summarize(&a, &long).unwrap().len() <= 40);
    }

    #[test]
    fn embedder_unit_norm_and_overrides() {
        let e = HashEmbedder::default()
            .with_override("a", vec![1.0, 0.0])
            .with_override("b", vec![0.0, 1.0]);
        assert_eq!(cosine(&e.embed("a").unwrap(), &e.embed("b").unwrap()), 0.0);
        let e = HashEmbedder::default();
        for s in ["", "x", "Bob moved to Miami", "ünïcödé text"] {
            let v = e.embed(s).unwrap();
            assert_eq!(v.len(), MOCK_DIM);
            assert!((dot(&v, &v) - 1.0).abs() < 1e-6);
            assert_eq!(v, e.embed(s).unwrap());
        }
    }

    #[test]
    fn flaky_extractor_recovers() {
        let f = FlakyExtractor::new(RuleExtractor::default()).fail("s", 1, 2);
        let c = chunk("Bob lives in Boston.");
        assert!(f.extract(&c).is_err());
        assert!(f.extract(&c).is_err());
        assert_eq!(f.extract(&c).unwrap().len(), 1);
    }
}
