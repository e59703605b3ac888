//! Query path: forest recall over root and fact signals, per-tree browse
//! (embedding-scored or chooser-guided, optionally with planner subqueries),
//! and evidence assembly.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backends::{par_map, ChildView, Choice, Ports, RootView};
use crate::error::{Error, Result};
use crate::index::dot;
use crate::memtree::MemTree;
use crate::router::scope_topic;
use crate::store::Store;
use crate::substrate::{NodeId, Payload, SourceRef, TemporalAnchor, TreeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "emb")]
    Emb,
    #[serde(rename = "emb+planner")]
    EmbPlanner,
    #[serde(rename = "llm")]
    Llm,
    #[serde(rename = "llm+planner")]
    LlmPlanner,
    #[serde(rename = "flat")]
    Flat,
    #[serde(rename = "root-only")]
    RootOnly,
}

impl Mode {
    pub const ALL: [Mode; 6] = [Mode::Emb, Mode::EmbPlanner, Mode::Llm, Mode::LlmPlanner, Mode::Flat, Mode::RootOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Emb => "emb",
            Mode::EmbPlanner => "emb+planner",
            Mode::Llm => "llm",
            Mode::LlmPlanner => "llm+planner",
            Mode::Flat => "flat",
            Mode::RootOnly => "root-only",
        }
    }

    pub fn uses_planner(self) -> bool {
        matches!(self, Mode::EmbPlanner | Mode::LlmPlanner)
    }

    pub fn uses_chooser(self) -> bool {
        matches!(self, Mode::Llm | Mode::LlmPlanner)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| Error::UnknownMode(s.to_string()))
    }
}

/// How root and fact similarity combine into a tree score.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "alpha")]
pub enum Combiner {
    #[default]
    Max,
    Mean,
    /// `alpha * root + (1 - alpha) * fact`.
    Weighted(f64),
}

impl Combiner {
    /// A tree without a matched fact scores by its root alone.
    pub fn combine(self, root: f64, fact: Option<f64>) -> f64 {
        let Some(fact) = fact else { return root };
        match self {
            Combiner::Max => root.max(fact),
            Combiner::Mean => (root + fact) / 2.0,
            Combiner::Weighted(a) => a * root + (1.0 - a) * fact,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub k_root: usize,
    pub k_fact: usize,
    pub k_trees: usize,
    pub beam_width: usize,
    pub leaf_budget: usize,
    /// Chooser calls allowed per tree; `None` means twice the tree height.
    pub step_budget: Option<usize>,
    pub final_top_k: usize,
    pub combiner: Combiner,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k_root: 10,
            k_fact: 20,
            k_trees: 5,
            beam_width: 2,
            leaf_budget: 10,
            step_budget: None,
            final_top_k: 10,
            combiner: Combiner::Max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Root,
    Fact,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallCandidate {
    pub tree_id: TreeId,
    pub scope: String,
    pub root_score: f64,
    pub fact_score: Option<f64>,
    pub score: f64,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrowseStep {
    pub node: NodeId,
    /// Child ids with their similarity to the browse query.
    pub scores: Vec<(NodeId, f64)>,
    pub chosen: Vec<NodeId>,
    /// The chooser answered out of range and embedding scores were used.
    #[serde(default, skip_serializing_if = "core::ops::Not::not")]
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrowseTrace {
    pub tree_id: TreeId,
    pub query: String,
    pub visited: Vec<NodeId>,
    pub steps: Vec<BrowseStep>,
    /// Reached leaves ranked by similarity to the browse query.
    pub leaves: Vec<(NodeId, f64)>,
    /// The chooser failed and the whole tree was browsed by embeddings.
    #[serde(default, skip_serializing_if = "core::ops::Not::not")]
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub text: String,
    pub anchor: TemporalAnchor,
    pub source_refs: Vec<SourceRef>,
    pub score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub payload: Option<Payload>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tree_id: Option<TreeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerContext {
    pub query: String,
    pub mode: Mode,
    pub candidates: Vec<RecallCandidate>,
    pub subqueries: BTreeMap<TreeId, String>,
    #[serde(default, skip_serializing_if = "core::ops::Not::not")]
    pub planner_fallback: bool,
    pub traces: Vec<BrowseTrace>,
    pub evidence: Vec<Evidence>,
    /// Total characters of evidence text.
    pub chars: usize,
}

impl AnswerContext {
    fn empty(query: &str, mode: Mode) -> Self {
        Self {
            query: query.to_string(),
            mode,
            candidates: Vec::new(),
            subqueries: BTreeMap::new(),
            planner_fallback: false,
            traces: Vec::new(),
            evidence: Vec::new(),
            chars: 0,
        }
    }
}

fn by_score_then_key<K: Ord>(a: &(K, f64), b: &(K, f64)) -> core::cmp::Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// Candidate trees from the union of root hits and trees owning the best
/// matching facts, ranked by combined score with ties to the lower tree id.
pub fn forest_recall(store: &Store, query: &[f32], cfg: &RetrievalConfig) -> Result<Vec<RecallCandidate>> {
    let roots: BTreeSet<TreeId> = store.root_index.top_k(query, cfg.k_root)?.into_iter().map(|(t, _)| t).collect();
    let mut best_fact: BTreeMap<TreeId, f64> = BTreeMap::new();
    for (f, s) in store.fact_index.top_k(query, cfg.k_fact)? {
        for t in store.placement.trees_of(&Payload::Fact(f)) {
            let e = best_fact.entry(t).or_insert(s);
            *e = e.max(s);
        }
    }
    let union: BTreeSet<TreeId> = roots.iter().copied().chain(best_fact.keys().copied()).collect();
    let mut out: Vec<RecallCandidate> = union
        .into_iter()
        .filter_map(|t| {
            let tree = store.trees.get(&t)?;
            let root_score = store.root_index.get(&t).map_or(-1.0, |v| dot(query, v));
            let fact_score = best_fact.get(&t).copied();
            let provenance = match (roots.contains(&t), fact_score.is_some()) {
                (true, true) => Provenance::Both,
                (true, false) => Provenance::Root,
                _ => Provenance::Fact,
            };
            Some(RecallCandidate {
                tree_id: t,
                scope: tree.scope.to_string(),
                root_score,
                fact_score,
                score: cfg.combiner.combine(root_score, fact_score),
                provenance,
            })
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.tree_id.cmp(&b.tree_id)));
    out.truncate(cfg.k_trees);
    Ok(out)
}

fn node_score(store: &Store, id: NodeId, query: &[f32]) -> f64 {
    store.node_index.get(&id).map_or(-1.0, |v| dot(query, v))
}

fn ranked_children(store: &Store, tree: &MemTree, id: NodeId, query: &[f32]) -> Vec<(NodeId, f64)> {
    let Some(n) = tree.node(id) else { return Vec::new() };
    n.children.iter().map(|c| (*c, node_score(store, *c, query))).collect()
}

fn finish_leaves(mut leaves: Vec<(NodeId, f64)>, budget: usize) -> Vec<(NodeId, f64)> {
    leaves.sort_by(by_score_then_key);
    leaves.dedup_by_key(|l| l.0);
    leaves.truncate(budget);
    leaves
}

/// Beam descent by embedding similarity: every expanded node follows its
/// `beam_width` best children. Reached leaves are ranked and cut to
/// `leaf_budget`.
pub fn browse_embedding(
    store: &Store,
    tree: &MemTree,
    query_text: &str,
    query: &[f32],
    beam_width: usize,
    leaf_budget: usize,
) -> BrowseTrace {
    let mut trace = BrowseTrace {
        tree_id: tree.tree_id,
        query: query_text.to_string(),
        visited: Vec::new(),
        steps: Vec::new(),
        leaves: Vec::new(),
        fallback: false,
    };
    let Some(root) = tree.root() else { return trace };
    let mut frontier = vec_of(root);
    let mut leaves = Vec::new();
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for id in frontier {
            trace.visited.push(id);
            let node = tree.node(id).expect("frontier node");
            if node.is_leaf() {
                leaves.push((id, node_score(store, id, query)));
                continue;
            }
            let scores = ranked_children(store, tree, id, query);
            let mut order = scores.clone();
            order.sort_by(by_score_then_key);
            let chosen: Vec<NodeId> = order.iter().take(beam_width.max(1)).map(|(c, _)| *c).collect();
            next.extend(chosen.iter().copied());
            trace.steps.push(BrowseStep { node: id, scores, chosen, fallback: false });
        }
        frontier = next;
    }
    trace.leaves = finish_leaves(leaves, leaf_budget);
    trace
}

fn vec_of(id: NodeId) -> Vec<NodeId> {
    let mut v = Vec::with_capacity(1);
    v.push(id);
    v
}

/// Chooser-guided descent. Each chooser call is one step; descent ends when
/// the chooser stops, leaves are reached, or `step_budget` is spent. An out
/// of range answer falls back to embedding scores for that step; a port
/// failure falls back to [`browse_embedding`] for the whole tree.
#[allow(clippy::too_many_arguments)]
pub fn browse_llm(
    store: &Store,
    tree: &MemTree,
    subquery: &str,
    query: &[f32],
    ports: &Ports<'_>,
    beam_width: usize,
    leaf_budget: usize,
    step_budget: usize,
) -> BrowseTrace {
    let beam = beam_width.max(1);
    let mut trace = BrowseTrace {
        tree_id: tree.tree_id,
        query: subquery.to_string(),
        visited: Vec::new(),
        steps: Vec::new(),
        leaves: Vec::new(),
        fallback: false,
    };
    let Some(root) = tree.root() else { return trace };
    let mut frontier = vec_of(root);
    let mut leaves = Vec::new();
    let mut steps = 0;
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for id in frontier {
            trace.visited.push(id);
            let node = tree.node(id).expect("frontier node");
            if node.is_leaf() {
                leaves.push((id, node_score(store, id, query)));
                continue;
            }
            if steps >= step_budget {
                continue;
            }
            steps += 1;
            let views: Vec<ChildView<'_>> = node
                .children
                .iter()
                .map(|c| {
                    let n = tree.node(*c).expect("child");
                    ChildView {
                        summary: n.summary.as_deref().unwrap_or_default(),
                        interval: n.interval,
                        is_leaf: n.is_leaf(),
                    }
                })
                .collect();
            let scores = ranked_children(store, tree, id, query);
            let choice = match ports.choose(subquery, &views) {
                Some(Ok(c)) => c,
                _ => {
                    let mut t = browse_embedding(store, tree, subquery, query, beam_width, leaf_budget);
                    t.fallback = true;
                    return t;
                }
            };
            let (chosen, fallback) = match choice {
                Choice::Stop => (Vec::new(), false),
                Choice::Children(idx) if !idx.is_empty() && idx.iter().all(|i| *i < views.len()) => {
                    let mut picked: Vec<NodeId> = Vec::new();
                    for i in idx {
                        let c = node.children[i];
                        if !picked.contains(&c) {
                            picked.push(c);
                        }
                    }
                    picked.truncate(beam);
                    (picked, false)
                }
                Choice::Children(_) => {
                    let mut order = scores.clone();
                    order.sort_by(by_score_then_key);
                    (order.iter().take(beam).map(|(c, _)| *c).collect(), true)
                }
            };
            next.extend(chosen.iter().copied());
            trace.steps.push(BrowseStep { node: id, scores, chosen, fallback });
        }
        frontier = next;
    }
    trace.leaves = finish_leaves(leaves, leaf_budget);
    trace
}

/// One planner call over all recalled roots. Trees the planner skips keep
/// the original query; a failed call keeps it everywhere and returns `true`.
pub fn plan_subqueries(
    store: &Store,
    query: &str,
    recalled: &[TreeId],
    ports: &Ports<'_>,
) -> (BTreeMap<TreeId, String>, bool) {
    let mut out: BTreeMap<TreeId, String> = recalled.iter().map(|t| (*t, query.to_string())).collect();
    if recalled.is_empty() {
        return (out, false);
    }
    let topics: Vec<(TreeId, String, String)> = recalled
        .iter()
        .filter_map(|t| {
            let tree = store.trees.get(t)?;
            let summary = tree.root_node().and_then(|r| r.summary.clone()).unwrap_or_default();
            Some((*t, scope_topic(&tree.scope, &store.scenes), summary))
        })
        .collect();
    let views: Vec<RootView<'_>> = topics
        .iter()
        .map(|(t, topic, summary)| RootView {
            tree: *t,
            family: store.trees[t].family(),
            topic,
            summary,
        })
        .collect();
    match ports.plan(query, &views) {
        None => (out, false),
        Some(Err(_)) => (out, true),
        Some(Ok(plans)) => {
            for (t, sub) in plans {
                if let Some(slot) = out.get_mut(&t) {
                    if !sub.trim().is_empty() {
                        *slot = sub;
                    }
                }
            }
            (out, false)
        }
    }
}

fn evidence_for(store: &Store, payload: Payload, score: f64, tree: Option<TreeId>) -> Option<Evidence> {
    match payload {
        Payload::Fact(f) => {
            let f = store.facts.get(&f)?;
            Some(Evidence {
                text: f.text.clone(),
                anchor: f.anchor,
                source_refs: f.source_refs.iter().cloned().collect(),
                score,
                payload: Some(payload),
                tree_id: tree,
            })
        }
        Payload::Cell(c) => {
            let c = store.cells.get(&c)?;
            Some(Evidence {
                text: c.text.clone(),
                anchor: c.anchor,
                source_refs: alloc::vec![SourceRef { session_id: c.session_id.clone(), turns: c.turns }],
                score,
                payload: Some(payload),
                tree_id: tree,
            })
        }
    }
}

impl Store {
    /// Answers `query` in `mode`. The query is embedded once; browse modes
    /// may embed planner subqueries as well.
    pub fn retrieve(&self, query: &str, mode: Mode, cfg: &RetrievalConfig, ports: &Ports<'_>) -> Result<AnswerContext> {
        let dirty = self.dirty_nodes();
        if dirty > 0 {
            return Err(Error::FlushPending(dirty));
        }
        let mut ctx = AnswerContext::empty(query, mode);
        if self.facts.is_empty() && self.trees.is_empty() {
            return Ok(ctx);
        }
        let qv = ports.embed(query)?;

        if mode == Mode::Flat {
            for (f, s) in self.fact_index.top_k(&qv, cfg.final_top_k)? {
                ctx.evidence.extend(evidence_for(self, Payload::Fact(f), s, None));
            }
            ctx.chars = ctx.evidence.iter().map(|e| e.text.len()).sum();
            return Ok(ctx);
        }

        ctx.candidates = forest_recall(self, &qv, cfg)?;
        if mode == Mode::RootOnly {
            for c in &ctx.candidates {
                let tree = &self.trees[&c.tree_id];
                let Some(root) = tree.root_node() else { continue };
                ctx.evidence.push(Evidence {
                    text: root.summary.clone().unwrap_or_default(),
                    anchor: root.interval,
                    source_refs: Vec::new(),
                    score: c.root_score,
                    payload: None,
                    tree_id: Some(c.tree_id),
                });
            }
            ctx.evidence.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.tree_id.cmp(&b.tree_id)));
            ctx.evidence.truncate(cfg.final_top_k);
            ctx.chars = ctx.evidence.iter().map(|e| e.text.len()).sum();
            return Ok(ctx);
        }

        let recalled: Vec<TreeId> = ctx.candidates.iter().map(|c| c.tree_id).collect();
        if mode.uses_planner() {
            let (subs, failed) = plan_subqueries(self, query, &recalled, ports);
            ctx.subqueries = subs;
            ctx.planner_fallback = failed;
        } else {
            ctx.subqueries = recalled.iter().map(|t| (*t, query.to_string())).collect();
        }

        // Subquery vectors, embedded once per distinct text.
        let mut vectors: BTreeMap<&str, Vec<f32>> = BTreeMap::new();
        vectors.insert(query, qv.clone());
        for s in ctx.subqueries.values() {
            if !vectors.contains_key(s.as_str()) {
                let v = ports.embed(s).unwrap_or_else(|_| qv.clone());
                vectors.insert(s.as_str(), v);
            }
        }

        let jobs: Vec<(TreeId, &str)> = recalled.iter().map(|t| (*t, ctx.subqueries[t].as_str())).collect();
        let traces = par_map(ports.exec, &jobs, |(t, sub)| {
            let tree = &self.trees[t];
            let v = &vectors[sub];
            if mode.uses_chooser() {
                let budget = cfg.step_budget.unwrap_or(2 * tree.height() as usize);
                browse_llm(self, tree, sub, v, ports, cfg.beam_width, cfg.leaf_budget, budget)
            } else {
                browse_embedding(self, tree, sub, v, cfg.beam_width, cfg.leaf_budget)
            }
        });

        // Pool leaves, rerank by the original query, keep each payload once.
        let mut pooled: BTreeMap<Payload, (f64, TreeId, NodeId)> = BTreeMap::new();
        for trace in &traces {
            let tree = &self.trees[&trace.tree_id];
            for (leaf, _) in &trace.leaves {
                let Some(p) = tree.node(*leaf).and_then(|n| n.payload) else { continue };
                let s = node_score(self, *leaf, &qv);
                let e = pooled.entry(p).or_insert((s, trace.tree_id, *leaf));
                if (s, core::cmp::Reverse((trace.tree_id, *leaf))) > (e.0, core::cmp::Reverse((e.1, e.2))) {
                    *e = (s, trace.tree_id, *leaf);
                }
            }
        }
        let mut ranked: Vec<(Payload, (f64, TreeId, NodeId))> = pooled.into_iter().collect();
        ranked.sort_by(|a, b| b.1 .0.total_cmp(&a.1 .0).then((a.1 .1, a.1 .2).cmp(&(b.1 .1, b.1 .2))));
        for (p, (s, t, _)) in ranked.into_iter().take(cfg.final_top_k) {
            ctx.evidence.extend(evidence_for(self, p, s, Some(t)));
        }
        ctx.chars = ctx.evidence.iter().map(|e| e.text.len()).sum();
        ctx.traces = traces;
        Ok(ctx)
    }
}
