//! Post-build maintenance: merging two stores, deleting a session, and
//! re-materializing derived artifacts under a new configuration.
//!
//! Each operation edits persistent state first, then flushes only the trees
//! it touched.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backends::{par_map, LedgerSnapshot, Ports};
use crate::error::{Error, Result};
use crate::index::dot;
use crate::memtree::{FlushStats, MemTree};
use crate::store::Store;
use crate::substrate::{
    derive_anchor, CellId, ClusterId, FactId, Family, NodeId, Payload, ScopeId, SessionArtifacts, SessionId,
    TemporalAnchor, TreeId, Turn,
};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeleteReport {
    pub session_id: SessionId,
    /// The session was not registered; nothing changed.
    pub unknown: bool,
    pub facts_removed: usize,
    /// Facts that survived with fewer source references.
    pub facts_pruned: usize,
    /// Surviving facts whose anchor moved to their remaining sources.
    pub facts_reanchored: usize,
    pub cells_removed: usize,
    pub leaves_removed: usize,
    pub trees_dropped: Vec<TreeId>,
    /// Ancestor sets of removed leaves, taken before removal.
    pub invalidated: Vec<NodeId>,
    pub flush: FlushStats,
    pub calls: LedgerSnapshot,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub facts_left: usize,
    pub facts_right: usize,
    pub facts_merged: usize,
    /// Right-hand facts whose canonical key already existed on the left.
    pub fact_collisions: usize,
    pub trees_left: usize,
    pub trees_right: usize,
    pub trees_merged: usize,
    pub trees_copied: usize,
    pub trees_total: usize,
    pub scenes_matched: usize,
    pub flush: FlushStats,
    pub calls: LedgerSnapshot,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RematerializeReport {
    /// Families whose trees were rebuilt for a new branching factor.
    pub rebuilt: Vec<Family>,
    pub reembedded: bool,
    pub resummarized: bool,
    pub trees_rebuilt: usize,
    pub flush: FlushStats,
    pub calls: LedgerSnapshot,
}

/// The configuration changes [`Store::rematerialize`] can apply.
pub const SUPPORTED_MIGRATIONS: &str = "k_session, k_entity, k_scene, embedder_id, summarizer_id, extract_retries";

impl Store {
    /// Removes a session and everything only it supports.
    ///
    /// Facts keep living while another session still cites them. Emptied
    /// trees are dropped; surviving ancestors of removed leaves are flushed.
    pub fn delete_session(&mut self, session: &SessionId, ports: &Ports<'_>) -> Result<DeleteReport> {
        let before = ports.ledger.snapshot();
        let mut report = DeleteReport { session_id: session.clone(), ..Default::default() };
        let Some(artifacts) = self.registry.remove(session) else {
            report.unknown = true;
            return Ok(report);
        };

        let mut touched: BTreeSet<TreeId> = BTreeSet::new();
        let mut invalidated: BTreeSet<NodeId> = BTreeSet::new();
        let mut doomed_leaves: Vec<(TreeId, NodeId)> = Vec::new();
        let mut reanchor: Vec<(FactId, TemporalAnchor)> = Vec::new();

        for id in &artifacts.facts {
            let Some(fact) = self.facts.get_mut(id) else { continue };
            fact.source_refs.retain(|r| &r.session_id != session);
            if fact.source_refs.is_empty() {
                doomed_leaves.extend(self.placement.get(&Payload::Fact(*id)).copied());
                continue;
            }
            report.facts_pruned += 1;
            let refs = fact.source_refs.clone();
            let mut span: Option<TemporalAnchor> = None;
            for r in &refs {
                let turns: Vec<Turn> = self
                    .sessions
                    .get(&r.session_id)
                    .map(|s| s.turns_in(r.turns).cloned().collect())
                    .unwrap_or_default();
                if let Ok(a) = derive_anchor(&turns) {
                    span = Some(span.map_or(a, |s| s.union(&a)));
                }
            }
            let fact = &self.facts[id];
            if let Some(span) = span {
                if !span.contains(&fact.anchor) {
                    reanchor.push((*id, span));
                }
            }
        }
        for c in &artifacts.cells {
            doomed_leaves.extend(self.placement.get(&Payload::Cell(*c)).copied());
        }

        for (t, leaf) in &doomed_leaves {
            if let Some(tree) = self.trees.get(t) {
                invalidated.extend(tree.ancestors(*leaf));
            }
        }
        for (t, leaf) in doomed_leaves {
            let Some(tree) = self.trees.get_mut(&t) else { continue };
            if let Some(p) = tree.remove_leaf(leaf, &mut self.counters.nodes) {
                self.placement.remove(p, t, leaf);
                self.node_index.delete(&leaf);
                report.leaves_removed += 1;
            }
            touched.insert(t);
        }

        for id in &artifacts.facts {
            if self.facts.get(id).is_some_and(|f| f.source_refs.is_empty()) {
                let topics = self.facts[id].topics.clone();
                let fact_index = &self.fact_index;
                let lookup = |f: FactId| if f == *id { None } else { fact_index.get(&f).map(|v| v.to_vec()) };
                self.scenes.remove_member(*id, &topics, &lookup);
                self.remove_fact(*id);
                report.facts_removed += 1;
            }
        }
        for c in &artifacts.cells {
            if self.cells.remove(c).is_some() {
                report.cells_removed += 1;
            }
        }

        for (id, anchor) in reanchor {
            self.facts.get_mut(&id).expect("fact").anchor = anchor;
            let places: Vec<(TreeId, NodeId)> = self.placement.get(&Payload::Fact(id)).copied().collect();
            for (t, leaf) in places {
                if let Some(tree) = self.trees.get_mut(&t) {
                    invalidated.extend(tree.ancestors(leaf));
                    tree.reposition_leaf(leaf, anchor, &mut self.counters.nodes);
                    tree.mark_dirty_ancestors(leaf);
                    touched.insert(t);
                }
            }
            report.facts_reanchored += 1;
        }

        self.sessions.remove(session);
        for t in touched.clone() {
            if self.trees.get(&t).is_some_and(|tree| tree.is_empty()) {
                self.drop_tree(t);
                touched.remove(&t);
                report.trees_dropped.push(t);
            }
        }
        self.bury_removed_nodes();
        report.flush = self.flush_trees(&touched, ports);
        report.flush.removals = report.leaves_removed;
        report.invalidated = invalidated.into_iter().collect();
        report.calls = ports.ledger.snapshot().since(&before);
        Ok(report)
    }

    /// Merges `other` into `self`. Facts are reconciled by canonical key with
    /// this store's version winning; matching trees are combined by grafting
    /// the smaller one's leaves into the larger; the rest are copied with their
    /// summaries and embeddings.
    pub fn merge(mut self, other: Store, ports: &Ports<'_>) -> Result<(Store, MergeReport)> {
        let before = ports.ledger.snapshot();
        for s in [&self, &other] {
            let dirty = s.dirty_nodes();
            if dirty > 0 {
                return Err(Error::FlushPending(dirty));
            }
        }
        if self.config.embedder_id != other.config.embedder_id {
            return Err(Error::Config(format!(
                "cannot merge stores embedded by {} and {}",
                self.config.embedder_id, other.config.embedder_id
            )));
        }
        let mut report = MergeReport {
            facts_left: self.facts.len(),
            facts_right: other.facts.len(),
            trees_left: self.trees.len(),
            trees_right: other.trees.len(),
            ..Default::default()
        };

        // Sessions. A session present on both sides keeps the left copy and
        // the right side's cells for it are dropped.
        let shared_sessions: BTreeSet<SessionId> =
            other.sessions.keys().filter(|s| self.sessions.contains_key(*s)).cloned().collect();
        for s in other.sessions.values() {
            if !shared_sessions.contains(&s.session_id) {
                self.insert_session(s.clone());
            }
        }

        // Facts.
        let mut fact_map: BTreeMap<FactId, FactId> = BTreeMap::new();
        let mut collided: BTreeSet<FactId> = BTreeSet::new();
        for f in other.facts.values() {
            match self.fact_by_key(&f.canonical_key) {
                Some(id) => {
                    let mine = self.facts.get_mut(&id).expect("fact");
                    mine.source_refs.extend(f.source_refs.iter().cloned());
                    mine.entities.extend(f.entities.iter().cloned());
                    mine.topics.extend(f.topics.iter().cloned());
                    fact_map.insert(f.fact_id, id);
                    collided.insert(id);
                    report.fact_collisions += 1;
                }
                None => {
                    let id = self.alloc_fact_id();
                    let mut copy = f.clone();
                    copy.fact_id = id;
                    self.insert_fact(copy);
                    if let Some(v) = other.fact_index.get(&f.fact_id) {
                        self.fact_index.upsert(id, v.to_vec())?;
                    }
                    if other.pending_scene.contains(&f.fact_id) {
                        self.pending_scene.insert(id);
                    }
                    fact_map.insert(f.fact_id, id);
                }
            }
        }

        // Cells.
        let mut cell_map: BTreeMap<CellId, CellId> = BTreeMap::new();
        for c in other.cells.values() {
            if shared_sessions.contains(&c.session_id) {
                continue;
            }
            let id = self.alloc_cell_id();
            let mut copy = c.clone();
            copy.cell_id = id;
            self.insert_cell(copy);
            cell_map.insert(c.cell_id, id);
        }

        // Scenes: match each right cluster to the best left centroid.
        let left_clusters: Vec<(ClusterId, Vec<f32>)> =
            self.scenes.clusters().map(|c| (c.cluster_id, c.centroid.clone())).collect();
        let mut scene_map: BTreeMap<ClusterId, ClusterId> = BTreeMap::new();
        for c in other.scenes.clusters() {
            let mut best: Option<(ClusterId, f64)> = None;
            for (id, centroid) in &left_clusters {
                let s = dot(&c.centroid, centroid);
                if s >= self.scenes.theta && best.is_none_or(|(_, b)| s > b) {
                    best = Some((*id, s));
                }
            }
            // Members already placed in a left scene stay there.
            let members: Vec<FactId> = c
                .members
                .iter()
                .filter_map(|m| fact_map.get(m).copied())
                .filter(|m| self.scenes.cluster_of(*m).is_none())
                .collect();
            let target = match best {
                Some((id, _)) => {
                    report.scenes_matched += 1;
                    id
                }
                None => {
                    let mut fresh = c.clone();
                    fresh.members = BTreeSet::new();
                    fresh.topic_counts = BTreeMap::new();
                    self.scenes.adopt(fresh)
                }
            };
            for m in members {
                let topics = self.facts[&m].topics.clone();
                let fact_index = &self.fact_index;
                let lookup = |f: FactId| fact_index.get(&f).map(|v| v.to_vec());
                self.scenes.add_member(target, m, &topics, &lookup);
                self.pending_scene.remove(&m);
            }
            scene_map.insert(c.cluster_id, target);
        }
        // An adopted cluster whose members all stayed on the left is empty.
        let empty: Vec<ClusterId> = self.scenes.clusters().filter(|c| c.members.is_empty()).map(|c| c.cluster_id).collect();
        for id in &empty {
            self.scenes.drop_empty(*id);
        }

        // Trees.
        let fact_scene: BTreeMap<FactId, ClusterId> =
            fact_map.values().filter_map(|f| self.scenes.cluster_of(*f).map(|c| (*f, c))).collect();
        let mut tree_map: BTreeMap<TreeId, TreeId> = BTreeMap::new();
        let mut touched: BTreeSet<TreeId> = BTreeSet::new();
        for bt in other.trees.values() {
            let target_cluster = match bt.scope.family {
                Family::Scene => {
                    let cid = bt.scope.key.parse::<u64>().ok().and_then(|c| scene_map.get(&ClusterId(c)));
                    match cid {
                        Some(c) if self.scenes.get(*c).is_some() => Some(*c),
                        _ => continue,
                    }
                }
                _ => None,
            };
            let scope = target_cluster.map_or_else(|| bt.scope.clone(), ScopeId::scene);
            let map_payload = |p: Payload| -> Option<Payload> {
                match p {
                    Payload::Fact(f) => {
                        let id = *fact_map.get(&f)?;
                        if target_cluster.is_some() && fact_scene.get(&id) != target_cluster.as_ref() {
                            return None;
                        }
                        Some(Payload::Fact(id))
                    }
                    Payload::Cell(c) => cell_map.get(&c).map(|c| Payload::Cell(*c)),
                }
            };

            let tid = match self.scopes.get(&scope).copied() {
                None => {
                    let tid = self.alloc_tree_id();
                    let (copy, idmap) = bt.remapped(tid, scope.clone(), &mut self.counters.nodes, &map_payload);
                    if copy.is_empty() {
                        continue;
                    }
                    for (old, new) in &idmap {
                        if let Some(v) = other.node_index.get(old) {
                            self.node_index.upsert(*new, v.to_vec())?;
                        }
                    }
                    self.trees.insert(tid, copy);
                    self.scopes.insert(scope, tid);
                    report.trees_copied += 1;
                    tid
                }
                Some(tid) => {
                    self.merge_matched(tid, bt, &other, &map_payload)?;
                    report.trees_merged += 1;
                    tid
                }
            };
            self.reconcile_leaves(tid, &collided);
            self.reset_placement(tid);
            tree_map.insert(bt.tree_id, tid);
            if self.trees[&tid].dirty_count() > 0 {
                touched.insert(tid);
            }
        }

        // Registry.
        for (s, a) in other.registry.iter() {
            let mapped = SessionArtifacts {
                facts: a.facts.iter().filter_map(|f| fact_map.get(f).copied()).collect(),
                cells: a.cells.iter().filter_map(|c| cell_map.get(c).copied()).collect(),
                trees: a.trees.iter().filter_map(|t| tree_map.get(t).copied()).collect(),
            };
            let mut merged = self.registry.lookup(s);
            merged.facts.extend(mapped.facts);
            merged.cells.extend(mapped.cells);
            merged.trees.extend(mapped.trees);
            self.registry.register(s.clone(), merged);
        }

        self.bury_removed_nodes();
        report.flush = self.flush_trees(&touched, ports);
        report.facts_merged = self.facts.len();
        report.trees_total = self.trees.len();
        report.calls = ports.ledger.snapshot().since(&before);
        Ok((self, report))
    }

    // Combines right-hand tree `bt` into left tree `tid`, grafting the
    // smaller side's leaves into the larger.
    fn merge_matched(
        &mut self,
        tid: TreeId,
        bt: &MemTree,
        other: &Store,
        map_payload: &dyn Fn(Payload) -> Option<Payload>,
    ) -> Result<()> {
        let present: BTreeSet<Payload> = {
            let at = &self.trees[&tid];
            at.leaves().iter().filter_map(|l| at.node(*l).and_then(|n| n.payload)).collect()
        };
        let keep = |p: Payload| map_payload(p).filter(|q| !present.contains(q));
        let left_larger = self.trees[&tid].leaf_count() >= bt.leaf_count();

        if left_larger {
            for l in bt.leaves() {
                let n = bt.node(l).expect("leaf");
                let Some(p) = keep(n.payload.expect("payload")) else { continue };
                let id = self.counters.nodes.alloc();
                let tree = self.trees.get_mut(&tid).expect("tree");
                tree.graft_leaf(id, p, n.interval, n.summary.clone(), &mut self.counters.nodes);
                if let Some(v) = other.node_index.get(&l) {
                    self.node_index.upsert(id, v.to_vec())?;
                }
            }
            return Ok(());
        }

        let scope = self.trees[&tid].scope.clone();
        let k = self.trees[&tid].k;
        let (mut copy, idmap) = bt.remapped(tid, scope, &mut self.counters.nodes, &keep);
        for (old, new) in &idmap {
            if let Some(v) = other.node_index.get(old) {
                self.node_index.upsert(*new, v.to_vec())?;
            }
        }
        let old = self.trees.remove(&tid).expect("tree");
        for n in old.nodes().filter(|n| !n.is_leaf()) {
            self.node_index.delete(&n.node_id);
        }
        for l in old.leaves() {
            let n = old.node(l).expect("leaf");
            let summary = if n.dirty { None } else { n.summary.clone() };
            copy.graft_leaf(l, n.payload.expect("payload"), n.interval, summary, &mut self.counters.nodes);
        }
        if copy.k != k {
            copy.rebuild_with_k(k, &mut self.counters.nodes)?;
        }
        self.trees.insert(tid, copy);
        Ok(())
    }

    // Leaves copied from the right side may carry a colliding fact whose
    // left-hand text or anchor won; bring them in line.
    fn reconcile_leaves(&mut self, tid: TreeId, collided: &BTreeSet<FactId>) {
        let tree = self.trees.get(&tid).expect("tree");
        let mut fixes: Vec<(NodeId, TemporalAnchor, bool)> = Vec::new();
        for l in tree.leaves() {
            let n = tree.node(l).expect("leaf");
            let Some(Payload::Fact(f)) = n.payload else { continue };
            if !collided.contains(&f) {
                continue;
            }
            let fact = &self.facts[&f];
            let text_changed = n.summary.as_deref() != Some(fact.text.as_str());
            if n.interval != fact.anchor || text_changed {
                fixes.push((l, fact.anchor, n.interval != fact.anchor));
            }
        }
        let tree = self.trees.get_mut(&tid).expect("tree");
        for (leaf, anchor, moved) in fixes {
            if moved {
                tree.reposition_leaf(leaf, anchor, &mut self.counters.nodes);
            }
            if let Some(n) = tree.node_mut(leaf) {
                n.summary = None;
            }
            tree.mark_dirty_ancestors(leaf);
            self.node_index.delete(&leaf);
        }
    }

    fn reset_placement(&mut self, tid: TreeId) {
        self.placement.retain_tree(tid);
        let tree = &self.trees[&tid];
        for l in tree.leaves() {
            if let Some(p) = tree.node(l).and_then(|n| n.payload) {
                self.placement.insert(p, tid, l);
            }
        }
    }

    /// Regenerates derived artifacts for `config` without re-extracting.
    ///
    /// A new branching factor rebuilds tree shapes, a new embedder re-embeds
    /// facts and nodes and recomputes scene centroids, a new summarizer
    /// resummarizes every node. Changing `chunk_size` or `theta_scene` would
    /// require re-extraction or re-routing and is rejected.
    pub fn rematerialize(&mut self, config: crate::StoreConfig, ports: &Ports<'_>) -> Result<RematerializeReport> {
        config.validate()?;
        let before = ports.ledger.snapshot();
        let mut unsupported = Vec::new();
        if config.chunk_size != self.config.chunk_size {
            unsupported.push("chunk_size");
        }
        if config.theta_scene != self.config.theta_scene {
            unsupported.push("theta_scene");
        }
        if !unsupported.is_empty() {
            return Err(Error::UnsupportedMigration {
                requested: unsupported.join(", "),
                supported: SUPPORTED_MIGRATIONS.to_string(),
            });
        }
        let mut report = RematerializeReport::default();

        for family in Family::ALL {
            let k = config.k_for(family);
            if k == self.config.k_for(family) {
                continue;
            }
            report.rebuilt.push(family);
            for tree in self.trees.values_mut().filter(|t| t.family() == family) {
                tree.rebuild_with_k(k, &mut self.counters.nodes)?;
                report.trees_rebuilt += 1;
            }
        }
        self.bury_removed_nodes();

        if config.summarizer_id != self.config.summarizer_id {
            report.resummarized = true;
            for tree in self.trees.values_mut() {
                let ids: Vec<NodeId> = tree.nodes().map(|n| n.node_id).collect();
                for id in ids {
                    if let Some(n) = tree.node_mut(id) {
                        n.dirty = true;
                    }
                }
            }
        }
        let reembed = config.embedder_id != self.config.embedder_id;
        self.config = config;

        if reembed {
            report.reembedded = true;
            self.reembed_facts(ports)?;
            self.reembed_clean_nodes(ports)?;
        }
        let all: BTreeSet<TreeId> = self.trees.keys().copied().collect();
        report.flush = self.flush_trees(&all, ports);
        report.calls = ports.ledger.snapshot().since(&before);
        Ok(report)
    }

    fn reembed_facts(&mut self, ports: &Ports<'_>) -> Result<()> {
        let facts: Vec<(FactId, String)> = self.facts.values().map(|f| (f.fact_id, f.text.clone())).collect();
        let vectors = par_map(ports.exec, &facts, |(_, text)| ports.embed(text));
        self.fact_index.clear();
        for ((id, _), v) in facts.iter().zip(vectors) {
            match v {
                Ok(v) => self.fact_index.upsert(*id, v)?,
                Err(_) => {
                    self.pending_scene.insert(*id);
                }
            }
        }
        let fact_index = &self.fact_index;
        let lookup = |f: FactId| fact_index.get(&f).map(|v| v.to_vec());
        self.scenes.recompute(&lookup);
        Ok(())
    }

    // Re-embeds every clean node from its existing summary; no summarizer
    // calls. Dirty nodes are left for the following flush.
    fn reembed_clean_nodes(&mut self, ports: &Ports<'_>) -> Result<()> {
        let mut jobs: Vec<(NodeId, String)> = Vec::new();
        let mut fact_rows: Vec<(NodeId, FactId)> = Vec::new();
        for tree in self.trees.values() {
            for n in tree.nodes().filter(|n| !n.dirty) {
                if let Some(Payload::Fact(f)) = n.payload {
                    fact_rows.push((n.node_id, f));
                } else if let Some(s) = &n.summary {
                    jobs.push((n.node_id, s.clone()));
                }
            }
        }
        let mut texts: Vec<String> = jobs.iter().map(|(_, s)| s.clone()).collect();
        texts.sort();
        texts.dedup();
        let vectors = par_map(ports.exec, &texts, |t| ports.embed(t));
        let by_text: BTreeMap<&str, &Vec<f32>> =
            texts.iter().zip(&vectors).filter_map(|(t, v)| v.as_ref().ok().map(|v| (t.as_str(), v))).collect();
        self.node_index.clear();
        for (id, f) in fact_rows {
            if let Some(v) = self.fact_index.get(&f) {
                self.node_index.upsert(id, v.to_vec())?;
            }
        }
        for (id, s) in &jobs {
            if let Some(v) = by_text.get(s.as_str()) {
                self.node_index.upsert(*id, (*v).clone())?;
            }
        }
        self.root_index.clear();
        Ok(())
    }
}
