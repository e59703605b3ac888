//! Write-path benchmark scenarios.
//!
//! Every scenario runs on the deterministic mocks and reports port-call
//! counts, never wall clock. Time is simulated with [`CostModel`]: each port
//! call costs a fixed number of units, and a flush run level-parallel takes
//! its dependency depth times the summarizer cost.

use std::collections::{BTreeMap, BTreeSet};

use memforest_core::backends::mock::MockBackends;
use memforest_core::backends::{LedgerSnapshot, PortKind};
use memforest_core::ingest::ChunkErrorPolicy;
use memforest_core::memtree::{ceil_log, flush, FlushContext, FlushStats, MemTree, NodeIdGen};
use memforest_core::retrieval::{forest_recall, RetrievalConfig};
use memforest_core::substrate::{FactId, Family, NodeId, Payload, ScopeId, TemporalAnchor, Timestamp, TreeId};
use memforest_core::{Store, StoreConfig};
use serde::{Deserialize, Serialize};

use crate::synth::{self, SynthParams};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Core(#[from] memforest_core::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

type Result<T> = std::result::Result<T, BenchError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    LazyVsEager,
    LevelParallel,
    KSweep,
    Migration,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::LazyVsEager => "lazy-vs-eager",
            Scenario::LevelParallel => "level-parallel",
            Scenario::KSweep => "k-sweep",
            Scenario::Migration => "migration",
        }
    }
}

/// Time units charged per port call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub extractor: f64,
    pub summarizer: f64,
    pub embedder: f64,
    pub planner: f64,
    pub chooser: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self { extractor: 1.0, summarizer: 1.0, embedder: 0.1, planner: 1.0, chooser: 1.0 }
    }
}

impl CostModel {
    pub fn cost(&self, calls: &LedgerSnapshot) -> f64 {
        let c = |k: PortKind| calls.get(k).calls as f64;
        self.extractor * c(PortKind::Extractor)
            + self.summarizer * c(PortKind::Summarizer)
            + self.embedder * c(PortKind::Embedder)
            + self.planner * c(PortKind::Planner)
            + self.chooser * c(PortKind::Chooser)
    }
}

/// One tree driven directly, with synthetic leaf texts.
pub struct SingleTree {
    pub tree: MemTree,
    pub ids: NodeIdGen,
    pub index: memforest_core::index::EmbeddingIndex<NodeId>,
    next_fact: u64,
}

fn leaf_text(p: Payload) -> Option<String> {
    match p {
        Payload::Fact(f) => Some(format!("Person {} moved to city {} in week {}.", f.0 % 97, f.0 % 13, f.0)),
        Payload::Cell(c) => Some(format!("cell {}", c.0)),
    }
}

fn no_vector(_: Payload) -> Option<Vec<f32>> {
    None
}

impl SingleTree {
    pub fn new(k: usize) -> Result<Self> {
        let scope = ScopeId::entity("bench")?;
        Ok(Self {
            tree: MemTree::new(TreeId(1), scope, k)?,
            ids: NodeIdGen::default(),
            index: Default::default(),
            next_fact: 1,
        })
    }

    pub fn insert_at(&mut self, t: i64) -> NodeId {
        let f = FactId(self.next_fact);
        self.next_fact += 1;
        self.tree.insert_leaf(Payload::Fact(f), TemporalAnchor::point(Timestamp(t)), &mut self.ids)
    }

    pub fn flush(&mut self, mocks: &MockBackends) -> FlushStats {
        let id = self.tree.tree_id;
        let k = self.tree.k;
        let scope = self.tree.scope.clone();
        let mut map = BTreeMap::new();
        map.insert(id, std::mem::replace(&mut self.tree, MemTree::new(id, scope, k).expect("k validated")));
        let only: BTreeSet<TreeId> = [id].into_iter().collect();
        let ctx = FlushContext { leaf_text: &leaf_text, known_vector: &no_vector };
        let stats = flush(&mut map, &only, &ctx, &mut self.index, &mocks.ports());
        self.tree = map.remove(&id).expect("tree");
        stats
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LazyEagerRow {
    pub facts: usize,
    pub k: usize,
    pub eager_calls: u64,
    pub lazy_calls: u64,
    pub ratio: f64,
}

/// Summarizer calls for flushing after every insert versus once per batch.
pub fn lazy_vs_eager(sizes: &[usize], k: usize) -> Result<Vec<LazyEagerRow>> {
    let mut out = Vec::new();
    for &n in sizes {
        let times = synth::hourly(n);
        let eager = MockBackends::new();
        let mut t = SingleTree::new(k)?;
        for ts in &times {
            t.insert_at(*ts);
            t.flush(&eager);
        }
        let lazy = MockBackends::new();
        let mut t = SingleTree::new(k)?;
        for ts in &times {
            t.insert_at(*ts);
        }
        t.flush(&lazy);
        let (e, l) = (eager.ledger.calls(PortKind::Summarizer), lazy.ledger.calls(PortKind::Summarizer));
        out.push(LazyEagerRow { facts: n, k, eager_calls: e, lazy_calls: l, ratio: e as f64 / l.max(1) as f64 });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelParallelRow {
    pub facts: usize,
    pub k: usize,
    pub height: u32,
    pub summarizer_calls: usize,
    pub dependency_depth: usize,
    pub sequential_time: f64,
    pub parallel_time: f64,
    pub speedup: f64,
}

/// Batch build of one tree: sequential time is calls times unit cost, the
/// level-parallel schedule takes depth times unit cost.
pub fn level_parallel(sizes: &[usize], k: usize, cost: &CostModel) -> Result<Vec<LevelParallelRow>> {
    let mut out = Vec::new();
    for &n in sizes {
        let mocks = MockBackends::new();
        let mut t = SingleTree::new(k)?;
        for ts in synth::hourly(n) {
            t.insert_at(ts);
        }
        let s = t.flush(&mocks);
        let seq = s.summarizer_calls as f64 * cost.summarizer;
        let par = s.dependency_depth as f64 * cost.summarizer;
        out.push(LevelParallelRow {
            facts: n,
            k,
            height: t.tree.height(),
            summarizer_calls: s.summarizer_calls,
            dependency_depth: s.dependency_depth,
            sequential_time: seq,
            parallel_time: par,
            speedup: if par > 0.0 { seq / par } else { 1.0 },
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSweepRow {
    pub k: usize,
    pub facts: usize,
    pub height: u32,
    pub expected_height: u32,
    pub summarizer_calls: u64,
    pub embedder_calls: u64,
    /// Share of sampled facts whose tree ranks in the top `k_trees` by root
    /// similarity alone, on a multi-instance synthetic store.
    pub root_recall: f64,
}

/// Tree shape and build cost against branching factor, plus a root-recall proxy.
pub fn k_sweep(ks: &[usize], n: usize, seed: u64) -> Result<Vec<KSweepRow>> {
    let sessions: Vec<_> = (1..=3).flat_map(|i| synth::instance(seed, i, SynthParams::default())).collect();
    let mut out = Vec::new();
    for &k in ks {
        let mocks = MockBackends::new();
        let mut t = SingleTree::new(k)?;
        for ts in synth::hourly(n) {
            t.insert_at(ts);
        }
        t.flush(&mocks);

        let store_mocks = MockBackends::new();
        let mut store = Store::new(StoreConfig::default().with_k(k))?;
        for s in &sessions {
            store.ingest_session(s.clone(), &store_mocks.ports(), ChunkErrorPolicy::SkipChunk)?;
        }
        let cfg = RetrievalConfig { k_fact: 0, ..RetrievalConfig::default() };
        let facts: Vec<_> = store.facts().take(60).cloned().collect();
        let mut hits = 0;
        for f in &facts {
            let qv = store.fact_index().get(&f.fact_id).expect("indexed fact").to_vec();
            let trees = store.placement().trees_of(&Payload::Fact(f.fact_id));
            let cands = forest_recall(&store, &qv, &cfg)?;
            if cands.iter().any(|c| trees.contains(&c.tree_id)) {
                hits += 1;
            }
        }
        out.push(KSweepRow {
            k,
            facts: n,
            height: t.tree.height(),
            expected_height: ceil_log(k, n) + 1,
            summarizer_calls: mocks.ledger.calls(PortKind::Summarizer),
            embedder_calls: mocks.ledger.calls(PortKind::Embedder),
            root_recall: hits as f64 / facts.len().max(1) as f64,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MigrationRow {
    pub instances: usize,
    pub sequential_cost: f64,
    pub migration_cost: f64,
    pub ratio: f64,
    pub sequential_facts: usize,
    pub migration_facts: usize,
    pub facts_identical: bool,
    pub sequential_trees: usize,
    pub migration_trees: usize,
    pub tree_gap: f64,
    pub sequential_scene_trees: usize,
    pub migration_scene_trees: usize,
}

/// Stable description of a store's facts, independent of id assignment.
pub fn fact_multiset(store: &Store) -> Vec<String> {
    let mut v: Vec<String> = store
        .facts()
        .map(|f| {
            serde_json::to_string(&(&f.canonical_key, &f.text, f.anchor, &f.source_refs, &f.entities, &f.topics))
                .expect("serializable")
        })
        .collect();
    v.sort();
    v
}

fn build(sessions: &[memforest_core::substrate::Session], mocks: &MockBackends) -> Result<Store> {
    let mut s = Store::new(StoreConfig::default())?;
    for x in sessions {
        s.ingest_session(x.clone(), &mocks.ports(), ChunkErrorPolicy::SkipChunk)?;
    }
    Ok(s)
}

/// Cumulative cost of ingesting instances one after another into one store,
/// against building instance 1 and merging each later instance's
/// already-materialized store into it.
pub fn migration(max_n: usize, seed: u64, params: SynthParams, cost: &CostModel) -> Result<Vec<MigrationRow>> {
    let instances: Vec<_> = (1..=max_n).map(|i| synth::instance(seed, i, params)).collect();

    let seq_mocks = MockBackends::new();
    let mut seq = Store::new(StoreConfig::default())?;
    let mut seq_cum = 0.0;

    let mig_mocks = MockBackends::new();
    let mut acc: Option<Store> = None;
    let mut mig_cum = 0.0;

    let mut out = Vec::new();
    for (i, sessions) in instances.iter().enumerate() {
        let before = seq_mocks.ledger.snapshot();
        for s in sessions {
            seq.ingest_session(s.clone(), &seq_mocks.ports(), ChunkErrorPolicy::SkipChunk)?;
        }
        seq_cum += cost.cost(&seq_mocks.ledger.snapshot().since(&before));

        acc = Some(match acc.take() {
            None => {
                let before = mig_mocks.ledger.snapshot();
                let s = build(sessions, &mig_mocks)?;
                mig_cum += cost.cost(&mig_mocks.ledger.snapshot().since(&before));
                s
            }
            Some(a) => {
                // The incoming state is already materialized; only the merge is charged.
                let state = build(sessions, &MockBackends::new())?;
                let before = mig_mocks.ledger.snapshot();
                let (merged, _) = a.merge(state, &mig_mocks.ports())?;
                mig_cum += cost.cost(&mig_mocks.ledger.snapshot().since(&before));
                merged
            }
        });
        let a = acc.as_ref().expect("accumulator");
        let (st, mt) = (seq.tree_count(), a.tree_count());
        let scenes = |s: &Store| s.tree_counts().get(&Family::Scene).copied().unwrap_or(0);
        out.push(MigrationRow {
            instances: i + 1,
            sequential_cost: seq_cum,
            migration_cost: mig_cum,
            ratio: seq_cum / mig_cum,
            sequential_facts: seq.fact_count(),
            migration_facts: a.fact_count(),
            facts_identical: fact_multiset(&seq) == fact_multiset(a),
            sequential_trees: st,
            migration_trees: mt,
            tree_gap: st.abs_diff(mt) as f64 / st.max(mt).max(1) as f64,
            sequential_scene_trees: scenes(&seq),
            migration_scene_trees: scenes(a),
        });
    }
    Ok(out)
}

/// Rows as CSV with a header naming every column.
pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Output of one scenario run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scenario", content = "rows", rename_all = "kebab-case")]
pub enum BenchReport {
    LazyVsEager(Vec<LazyEagerRow>),
    LevelParallel(Vec<LevelParallelRow>),
    KSweep(Vec<KSweepRow>),
    Migration(Vec<MigrationRow>),
}

impl BenchReport {
    pub fn csv(&self) -> Result<String> {
        match self {
            BenchReport::LazyVsEager(r) => to_csv(r),
            BenchReport::LevelParallel(r) => to_csv(r),
            BenchReport::KSweep(r) => to_csv(r),
            BenchReport::Migration(r) => to_csv(r),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchParams {
    pub k: usize,
    pub sizes: Vec<usize>,
    pub ks: Vec<usize>,
    pub sweep_facts: usize,
    pub instances: usize,
    pub seed: u64,
    pub synth: SynthParams,
    pub cost: CostModel,
}

impl Default for BenchParams {
    fn default() -> Self {
        Self {
            k: 8,
            sizes: vec![16, 64, 256, 1024],
            ks: vec![2, 4, 8, 16, 32, 64],
            sweep_facts: 1024,
            instances: 8,
            seed: 7,
            synth: SynthParams::default(),
            cost: CostModel::default(),
        }
    }
}

pub fn run(scenario: Scenario, p: &BenchParams) -> Result<BenchReport> {
    Ok(match scenario {
        Scenario::LazyVsEager => BenchReport::LazyVsEager(lazy_vs_eager(&p.sizes, p.k)?),
        Scenario::LevelParallel => BenchReport::LevelParallel(level_parallel(&p.sizes, p.k, &p.cost)?),
        Scenario::KSweep => BenchReport::KSweep(k_sweep(&p.ks, p.sweep_facts, p.seed)?),
        Scenario::Migration => BenchReport::Migration(migration(p.instances, p.seed, p.synth, &p.cost)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_header_names_columns() {
        let rows = lazy_vs_eager(&[16], 8).unwrap();
        let csv = to_csv(&rows).unwrap();
        assert_eq!(csv.lines().next().unwrap(), "facts,k,eager_calls,lazy_calls,ratio");
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn cost_model_weights() {
        let mut s = LedgerSnapshot::default();
        s.extractor.calls = 2;
        s.summarizer.calls = 3;
        s.embedder.calls = 10;
        assert!((CostModel::default().cost(&s) - 6.0).abs() < 1e-12);
    }
}
