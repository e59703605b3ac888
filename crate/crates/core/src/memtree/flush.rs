use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::MemTree;
use crate::backends::{par_map, PortResult, Ports};
use crate::index::EmbeddingIndex;
use crate::substrate::{NodeId, Payload, TemporalAnchor, TreeId};

/// Counters and timings for one flush.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlushStats {
    /// Leaves structurally inserted before this flush (filled by callers).
    pub inserts: usize,
    /// Leaves structurally removed before this flush (filled by callers).
    pub removals: usize,
    /// Trees repacked during the structural phase (filled by callers).
    pub repacks: usize,
    /// Nodes whose summary was recomputed, including passthroughs.
    pub refreshed: usize,
    pub refreshed_by_level: Vec<usize>,
    pub summarizer_calls: usize,
    pub summarizer_calls_by_level: Vec<usize>,
    /// Nodes refreshed by copying text, without a summarizer call.
    pub passthroughs: usize,
    pub embedder_calls: usize,
    /// Longest chain of summarizer calls that had to run one after another.
    pub dependency_depth: usize,
    /// Nodes left dirty because a port call failed.
    pub failures: usize,
    /// Nodes left dirty because a child could not be refreshed.
    pub blocked: usize,
    pub trees: Vec<TreeId>,
    pub refreshed_nodes: Vec<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summarize_micros: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embed_micros: Option<u64>,
}

impl FlushStats {
    pub fn is_noop(&self) -> bool {
        self.refreshed == 0 && self.summarizer_calls == 0 && self.embedder_calls == 0
    }

    /// Folds another flush into this one (used when operations flush more than once).
    pub fn absorb(&mut self, other: FlushStats) {
        self.inserts += other.inserts;
        self.removals += other.removals;
        self.repacks += other.repacks;
        self.refreshed += other.refreshed;
        add_levels(&mut self.refreshed_by_level, &other.refreshed_by_level);
        self.summarizer_calls += other.summarizer_calls;
        add_levels(&mut self.summarizer_calls_by_level, &other.summarizer_calls_by_level);
        self.passthroughs += other.passthroughs;
        self.embedder_calls += other.embedder_calls;
        self.dependency_depth = self.dependency_depth.max(other.dependency_depth);
        self.failures += other.failures;
        self.blocked += other.blocked;
        let trees: BTreeSet<TreeId> = self.trees.iter().chain(&other.trees).copied().collect();
        self.trees = trees.into_iter().collect();
        self.refreshed_nodes.extend(other.refreshed_nodes);
        self.summarize_micros = sum_opt(self.summarize_micros, other.summarize_micros);
        self.embed_micros = sum_opt(self.embed_micros, other.embed_micros);
    }
}

fn add_levels(into: &mut Vec<usize>, from: &[usize]) {
    if into.len() < from.len() {
        into.resize(from.len(), 0);
    }
    for (a, b) in into.iter_mut().zip(from) {
        *a += b;
    }
}

fn sum_opt(a: Option<u64>, b: Option<u64>) -> Option<u64> {
    match (a, b) {
        (None, None) => None,
        (a, b) => Some(a.unwrap_or(0) + b.unwrap_or(0)),
    }
}

fn bump(v: &mut Vec<usize>, level: usize) {
    if v.len() <= level {
        v.resize(level + 1, 0);
    }
    v[level] += 1;
}

/// Store-side lookups the flush needs for leaves.
pub struct FlushContext<'a> {
    /// Text of a fact or dialogue cell.
    pub leaf_text: &'a dyn Fn(Payload) -> Option<String>,
    /// Precomputed embedding for a payload, if the store already has one.
    pub known_vector: &'a dyn Fn(Payload) -> Option<Vec<f32>>,
}

struct SummaryJob {
    tree: TreeId,
    node: NodeId,
    interval: TemporalAnchor,
    texts: Vec<String>,
}

enum VectorSource {
    Known(Vec<f32>),
    CopyChild(NodeId),
    Embed(usize),
}

/// Refreshes every dirty node of `trees` restricted to `only`.
///
/// Levels are processed bottom-up. Within a level, summarizer calls for all
/// trees go through `ports.exec` together; results are applied in
/// `(tree, node)` order, so the outcome does not depend on the executor.
/// Fact leaves and single-child internal nodes copy their text instead of
/// calling the summarizer. A node whose port call fails stays dirty, as do
/// its ancestors, and is retried by the next flush.
pub fn flush(
    trees: &mut BTreeMap<TreeId, MemTree>,
    only: &BTreeSet<TreeId>,
    ctx: &FlushContext<'_>,
    node_index: &mut EmbeddingIndex<NodeId>,
    ports: &Ports<'_>,
) -> FlushStats {
    let mut stats = FlushStats::default();
    let mut by_level: BTreeMap<u32, Vec<(TreeId, NodeId)>> = BTreeMap::new();
    for t in only {
        let Some(tree) = trees.get(t) else { continue };
        let mut any = false;
        for n in tree.nodes().filter(|n| n.dirty) {
            by_level.entry(n.level).or_default().push((*t, n.node_id));
            any = true;
        }
        if any {
            stats.trees.push(*t);
        }
    }
    if by_level.is_empty() {
        return stats;
    }

    let t0 = ports.clock.now_micros();
    // Nodes whose summary is current for this flush, with their call depth.
    let mut depth: BTreeMap<NodeId, usize> = BTreeMap::new();
    let mut refreshed: Vec<(TreeId, NodeId)> = Vec::new();

    for (level, nodes) in &by_level {
        let mut jobs: Vec<SummaryJob> = Vec::new();
        for &(t, id) in nodes {
            let tree = &trees[&t];
            let node = tree.node(id).expect("dirty node exists");
            if node.is_leaf() {
                let payload = node.payload.expect("leaf payload");
                let Some(text) = (ctx.leaf_text)(payload) else {
                    stats.failures += 1;
                    continue;
                };
                match payload {
                    Payload::Fact(_) => {
                        set_summary(trees, t, id, text);
                        depth.insert(id, 0);
                        refreshed.push((t, id));
                        stats.passthroughs += 1;
                    }
                    Payload::Cell(_) => {
                        jobs.push(SummaryJob { tree: t, node: id, interval: node.interval, texts: alloc::vec![text] })
                    }
                }
                continue;
            }
            let ready = node.children.iter().all(|c| {
                let cn = tree.node(*c).expect("child exists");
                (!cn.dirty || depth.contains_key(c)) && cn.summary.is_some()
            });
            if !ready {
                stats.blocked += 1;
                continue;
            }
            if node.children.len() == 1 {
                let c = node.children[0];
                let text = tree.node(c).and_then(|cn| cn.summary.clone()).expect("ready child");
                let d = depth.get(&c).copied().unwrap_or(0);
                set_summary(trees, t, id, text);
                depth.insert(id, d);
                refreshed.push((t, id));
                stats.passthroughs += 1;
                continue;
            }
            let texts = node
                .children
                .iter()
                .map(|c| tree.node(*c).and_then(|cn| cn.summary.clone()).expect("ready child"))
                .collect();
            jobs.push(SummaryJob { tree: t, node: id, interval: node.interval, texts });
        }

        let results: Vec<PortResult<String>> = par_map(ports.exec, &jobs, |job| {
            let texts: Vec<&str> = job.texts.iter().map(String::as_str).collect();
            ports.summarize(&job.interval, &texts)
        });
        for (job, res) in jobs.iter().zip(results) {
            stats.summarizer_calls += 1;
            bump(&mut stats.summarizer_calls_by_level, *level as usize);
            match res {
                Ok(text) => {
                    let below = trees[&job.tree]
                        .node(job.node)
                        .map(|n| n.children.iter().filter_map(|c| depth.get(c)).copied().max().unwrap_or(0))
                        .unwrap_or(0);
                    set_summary(trees, job.tree, job.node, text);
                    depth.insert(job.node, below + 1);
                    refreshed.push((job.tree, job.node));
                }
                Err(_) => stats.failures += 1,
            }
        }
    }
    let t1 = ports.clock.now_micros();

    // Embeddings, in level order so copied vectors are already fresh.
    refreshed.sort_by_key(|(t, id)| (trees[t].node(*id).map_or(0, |n| n.level), *t, *id));
    let mut texts: Vec<String> = Vec::new();
    let mut text_slot: BTreeMap<String, usize> = BTreeMap::new();
    let mut plan: Vec<VectorSource> = Vec::with_capacity(refreshed.len());
    for &(t, id) in &refreshed {
        let node = trees[&t].node(id).expect("refreshed node");
        if let Some(v) = node.payload.and_then(|p| (ctx.known_vector)(p)) {
            plan.push(VectorSource::Known(v));
        } else if node.children.len() == 1 {
            plan.push(VectorSource::CopyChild(node.children[0]));
        } else {
            let text = node.summary.clone().expect("refreshed node has a summary");
            let slot = *text_slot.entry(text.clone()).or_insert_with(|| {
                texts.push(text);
                texts.len() - 1
            });
            plan.push(VectorSource::Embed(slot));
        }
    }
    let vectors: Vec<PortResult<Vec<f32>>> = par_map(ports.exec, &texts, |text| ports.embed(text));
    stats.embedder_calls = vectors.len();

    for (&(t, id), source) in refreshed.iter().zip(plan) {
        let v = match source {
            VectorSource::Known(v) => Some(v),
            VectorSource::CopyChild(c) => node_index.get(&c).map(|v| v.to_vec()),
            VectorSource::Embed(slot) => vectors[slot].as_ref().ok().cloned(),
        };
        let ok = match v {
            Some(v) => node_index.upsert(id, v).is_ok(),
            None => false,
        };
        // A node whose child is still dirty must stay dirty too.
        let child_pending = trees[&t]
            .node(id)
            .is_some_and(|n| n.children.iter().any(|c| trees[&t].node(*c).is_some_and(|cn| cn.dirty)));
        if !ok {
            stats.failures += 1;
            continue;
        }
        if child_pending {
            continue;
        }
        let tree = trees.get_mut(&t).expect("tree");
        let level = tree.node(id).map_or(0, |n| n.level);
        tree.node_mut(id).expect("node").dirty = false;
        stats.refreshed += 1;
        bump(&mut stats.refreshed_by_level, level as usize);
        stats.refreshed_nodes.push(id);
    }
    let t2 = ports.clock.now_micros();

    stats.dependency_depth = depth.values().copied().max().unwrap_or(0);
    stats.refreshed_nodes.sort();
    if let (Some(a), Some(b), Some(c)) = (t0, t1, t2) {
        stats.summarize_micros = Some(b.saturating_sub(a));
        stats.embed_micros = Some(c.saturating_sub(b));
    }
    stats
}

fn set_summary(trees: &mut BTreeMap<TreeId, MemTree>, t: TreeId, id: NodeId, text: String) {
    if let Some(n) = trees.get_mut(&t).and_then(|tree| tree.node_mut(id)) {
        n.summary = Some(text);
    }
}
