//! The memory store: persistent state (sessions, facts, cells, scopes, tree
//! structure, reverse maps, scene clusters) plus derived indexes.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backends::Ports;
use crate::error::{Error, Result};
use crate::index::EmbeddingIndex;
use crate::memtree::{flush, FlushContext, FlushStats, MemTree, NodeIdGen, TreeNode};
use crate::router::{self, SceneCluster, SceneState};
use crate::substrate::{
    CanonicalFact, CellId, DialogueCell, FactId, Family, NodeId, Payload, PlacementMap, RoutedRecord, ScopeId,
    Session, SessionId, SessionRegistry, SourceRef, TreeId,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StoreConfig {
    /// Turns per extraction chunk.
    pub chunk_size: usize,
    pub k_session: usize,
    pub k_entity: usize,
    pub k_scene: usize,
    /// Minimum centroid cosine for a fact to join an existing scene.
    pub theta_scene: f64,
    /// Extra extraction attempts per chunk after the first failure.
    pub extract_retries: u32,
    /// Fingerprint of the embedding backend; a change triggers re-embedding.
    pub embedder_id: String,
    /// Fingerprint of the summarization backend; a change triggers resummarizing.
    pub summarizer_id: String,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            chunk_size: 2,
            k_session: 8,
            k_entity: 8,
            k_scene: 8,
            theta_scene: 0.60,
            extract_retries: 2,
            embedder_id: "mock-hash-16".into(),
            summarizer_id: "mock-clause".into(),
        }
    }
}

impl StoreConfig {
    pub fn with_k(mut self, k: usize) -> Self {
        self.k_session = k;
        self.k_entity = k;
        self.k_scene = k;
        self
    }

    pub fn k_for(&self, family: Family) -> usize {
        match family {
            Family::Session => self.k_session,
            Family::Entity => self.k_entity,
            Family::Scene => self.k_scene,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunk_size == 0 {
            return Err(Error::Config("chunk_size must be at least 1".into()));
        }
        for f in Family::ALL {
            if self.k_for(f) < 2 {
                return Err(Error::Config(format!("k for {} trees must be at least 2", f.as_str())));
            }
        }
        if !(-1.0..=1.0).contains(&self.theta_scene) {
            return Err(Error::Config("theta_scene must lie in [-1, 1]".into()));
        }
        Ok(())
    }
}

/// Monotonic id counters. Ids are never reused within a store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub next_fact: u64,
    pub next_cell: u64,
    pub next_tree: u64,
    pub nodes: NodeIdGen,
    pub next_arrival: u64,
}

impl Default for Counters {
    fn default() -> Self {
        Self { next_fact: 1, next_cell: 1, next_tree: 1, nodes: NodeIdGen::default(), next_arrival: 0 }
    }
}

/// Tree metadata as persisted; nodes travel separately.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeRecord {
    pub tree_id: TreeId,
    pub scope: ScopeId,
    pub k: usize,
    pub root: Option<NodeId>,
    pub next_seq: u64,
    pub rebuilds: u64,
}

/// Everything needed to reconstruct a store. Indexes over roots are derived
/// and rebuilt on load.
#[derive(Debug, Clone, PartialEq)]
pub struct StoreParts {
    pub config: StoreConfig,
    pub counters: Counters,
    pub sessions: Vec<Session>,
    pub facts: Vec<CanonicalFact>,
    pub cells: Vec<DialogueCell>,
    pub placement: PlacementMap,
    pub registry: SessionRegistry,
    pub trees: Vec<TreeRecord>,
    pub nodes: Vec<(TreeId, TreeNode)>,
    pub scene_next_id: u64,
    pub scenes: Vec<SceneCluster>,
    pub pending_scene: BTreeSet<FactId>,
    pub node_vectors: Vec<(NodeId, Vec<f32>)>,
    pub fact_vectors: Vec<(FactId, Vec<f32>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Store {
    pub(crate) config: StoreConfig,
    pub(crate) counters: Counters,
    pub(crate) sessions: BTreeMap<SessionId, Session>,
    pub(crate) facts: BTreeMap<FactId, CanonicalFact>,
    pub(crate) fact_keys: BTreeMap<String, FactId>,
    pub(crate) cells: BTreeMap<CellId, DialogueCell>,
    pub(crate) trees: BTreeMap<TreeId, MemTree>,
    pub(crate) scopes: BTreeMap<ScopeId, TreeId>,
    pub(crate) placement: PlacementMap,
    pub(crate) registry: SessionRegistry,
    pub(crate) scenes: SceneState,
    pub(crate) pending_scene: BTreeSet<FactId>,
    pub(crate) node_index: EmbeddingIndex<NodeId>,
    pub(crate) root_index: EmbeddingIndex<TreeId>,
    pub(crate) fact_index: EmbeddingIndex<FactId>,
}

impl Store {
    pub fn new(config: StoreConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            scenes: SceneState::new(config.theta_scene),
            config,
            counters: Counters::default(),
            sessions: BTreeMap::new(),
            facts: BTreeMap::new(),
            fact_keys: BTreeMap::new(),
            cells: BTreeMap::new(),
            trees: BTreeMap::new(),
            scopes: BTreeMap::new(),
            placement: PlacementMap::default(),
            registry: SessionRegistry::default(),
            pending_scene: BTreeSet::new(),
            node_index: EmbeddingIndex::new(),
            root_index: EmbeddingIndex::new(),
            fact_index: EmbeddingIndex::new(),
        })
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    pub fn session(&self, id: &SessionId) -> Option<&Session> {
        self.sessions.get(id)
    }

    pub fn sessions(&self) -> impl Iterator<Item = &Session> {
        self.sessions.values()
    }

    pub fn fact(&self, id: FactId) -> Option<&CanonicalFact> {
        self.facts.get(&id)
    }

    pub fn facts(&self) -> impl Iterator<Item = &CanonicalFact> {
        self.facts.values()
    }

    pub fn fact_count(&self) -> usize {
        self.facts.len()
    }

    pub fn fact_by_key(&self, key: &str) -> Option<FactId> {
        self.fact_keys.get(key).copied()
    }

    pub fn cell(&self, id: CellId) -> Option<&DialogueCell> {
        self.cells.get(&id)
    }

    pub fn cells(&self) -> impl Iterator<Item = &DialogueCell> {
        self.cells.values()
    }

    pub fn tree(&self, id: TreeId) -> Option<&MemTree> {
        self.trees.get(&id)
    }

    pub fn trees(&self) -> impl Iterator<Item = &MemTree> {
        self.trees.values()
    }

    pub fn tree_count(&self) -> usize {
        self.trees.len()
    }

    pub fn tree_for_scope(&self, scope: &ScopeId) -> Option<TreeId> {
        self.scopes.get(scope).copied()
    }

    pub fn placement(&self) -> &PlacementMap {
        &self.placement
    }

    pub fn registry(&self) -> &SessionRegistry {
        &self.registry
    }

    pub(crate) fn registry_mut(&mut self) -> &mut SessionRegistry {
        &mut self.registry
    }

    pub fn scenes(&self) -> &SceneState {
        &self.scenes
    }

    pub fn pending_scene(&self) -> &BTreeSet<FactId> {
        &self.pending_scene
    }

    pub fn node_index(&self) -> &EmbeddingIndex<NodeId> {
        &self.node_index
    }

    pub fn root_index(&self) -> &EmbeddingIndex<TreeId> {
        &self.root_index
    }

    pub fn fact_index(&self) -> &EmbeddingIndex<FactId> {
        &self.fact_index
    }

    /// Text shown to the summarizer or browser for a leaf payload.
    pub fn payload_text(&self, p: Payload) -> Option<&str> {
        match p {
            Payload::Fact(f) => self.facts.get(&f).map(|f| f.text.as_str()),
            Payload::Cell(c) => self.cells.get(&c).map(|c| c.text.as_str()),
        }
    }

    /// Planner-visible topic for a tree.
    pub fn tree_topic(&self, tree: TreeId) -> String {
        self.trees.get(&tree).map_or_else(String::new, |t| router::scope_topic(&t.scope, &self.scenes))
    }

    pub fn dirty_nodes(&self) -> usize {
        self.trees.values().map(|t| t.dirty_count()).sum()
    }

    pub(crate) fn alloc_fact_id(&mut self) -> FactId {
        let id = FactId(self.counters.next_fact);
        self.counters.next_fact += 1;
        id
    }

    pub(crate) fn alloc_cell_id(&mut self) -> CellId {
        let id = CellId(self.counters.next_cell);
        self.counters.next_cell += 1;
        id
    }

    pub(crate) fn alloc_tree_id(&mut self) -> TreeId {
        let id = TreeId(self.counters.next_tree);
        self.counters.next_tree += 1;
        id
    }

    pub(crate) fn insert_cell(&mut self, cell: DialogueCell) {
        self.cells.insert(cell.cell_id, cell);
    }

    pub(crate) fn insert_fact(&mut self, fact: CanonicalFact) {
        self.fact_keys.insert(fact.canonical_key.clone(), fact.fact_id);
        self.facts.insert(fact.fact_id, fact);
    }

    pub(crate) fn remove_fact(&mut self, id: FactId) -> Option<CanonicalFact> {
        let f = self.facts.remove(&id)?;
        self.fact_keys.remove(&f.canonical_key);
        self.fact_index.delete(&id);
        self.pending_scene.remove(&id);
        Some(f)
    }

    pub(crate) fn insert_session(&mut self, mut session: Session) {
        session.arrival_seq = self.counters.next_arrival;
        self.counters.next_arrival += 1;
        self.sessions.insert(session.session_id.clone(), session);
    }

    pub(crate) fn add_source_refs(&mut self, id: FactId, refs: impl IntoIterator<Item = SourceRef>) {
        if let Some(f) = self.facts.get_mut(&id) {
            f.source_refs.extend(refs);
        }
    }

    /// Embeds a new fact, assigns its scene and returns its entity and
    /// scene records. On embedder failure the scene is deferred.
    pub(crate) fn route_new_fact(&mut self, id: FactId, ports: &Ports<'_>) -> Result<Vec<RoutedRecord>> {
        let scene = self.assign_scene(id, ports);
        let fact = self.facts.get(&id).expect("fact exists");
        router::route_fact(fact, scene)
    }

    fn assign_scene(&mut self, id: FactId, ports: &Ports<'_>) -> Option<crate::substrate::ClusterId> {
        let fact = self.facts.get(&id)?;
        if let Some(c) = self.scenes.cluster_of(id) {
            return Some(c);
        }
        let v = match self.fact_index.get(&id) {
            Some(v) => v.to_vec(),
            None => match ports.embed(&fact.text) {
                Ok(v) => v,
                Err(_) => {
                    self.pending_scene.insert(id);
                    return None;
                }
            },
        };
        if self.fact_index.upsert(id, v.clone()).is_err() {
            self.pending_scene.insert(id);
            return None;
        }
        let topics = fact.topics.clone();
        self.pending_scene.remove(&id);
        let fact_index = &self.fact_index;
        let lookup = |f: FactId| fact_index.get(&f).map(|v| v.to_vec());
        Some(self.scenes.assign(id, &v, &topics, &lookup))
    }

    /// Retries scene assignment for facts whose embedding failed earlier.
    pub(crate) fn retry_deferred_scenes(&mut self, ports: &Ports<'_>, records: &mut Vec<RoutedRecord>) -> Result<()> {
        let pending: Vec<FactId> = self.pending_scene.iter().copied().collect();
        for id in pending {
            if let Some(c) = self.assign_scene(id, ports) {
                let anchor = self.facts[&id].anchor;
                records.push(RoutedRecord::new(ScopeId::scene(c), Payload::Fact(id), anchor)?);
            }
        }
        Ok(())
    }

    pub(crate) fn tree_or_create(&mut self, scope: &ScopeId) -> Result<TreeId> {
        if let Some(t) = self.scopes.get(scope) {
            return Ok(*t);
        }
        let id = self.alloc_tree_id();
        let tree = MemTree::new(id, scope.clone(), self.config.k_for(scope.family))?;
        self.trees.insert(id, tree);
        self.scopes.insert(scope.clone(), id);
        Ok(id)
    }

    /// Structural phase of an update batch: groups records per tree, sorts
    /// each group by time and inserts the leaves. Records whose payload
    /// already sits in the target tree are skipped.
    pub(crate) fn insert_records(&mut self, records: &[RoutedRecord]) -> Result<(usize, usize, BTreeSet<TreeId>)> {
        let mut groups: BTreeMap<&ScopeId, Vec<&RoutedRecord>> = BTreeMap::new();
        for r in records {
            groups.entry(&r.scope).or_default().push(r);
        }
        let mut touched = BTreeSet::new();
        let mut inserted = 0;
        let mut repacks = 0;
        for (scope, mut group) in groups {
            group.sort_by_key(|r| r.anchor.start);
            let tid = self.tree_or_create(scope)?;
            let tree = self.trees.get_mut(&tid).expect("tree");
            let before = tree.rebuilds;
            for r in group {
                if self.placement.trees_of(&r.payload).contains(&tid) {
                    continue;
                }
                let leaf = tree.insert_leaf(r.payload, r.anchor, &mut self.counters.nodes);
                self.placement.insert(r.payload, tid, leaf);
                inserted += 1;
            }
            repacks += (tree.rebuilds - before) as usize;
            touched.insert(tid);
        }
        self.bury_removed_nodes();
        Ok((inserted, repacks, touched))
    }

    /// Alg. 1 end to end: structural inserts for all records, then one flush
    /// over every touched tree.
    pub fn apply_updates(&mut self, records: &[RoutedRecord], ports: &Ports<'_>) -> Result<FlushStats> {
        let (inserted, repacks, touched) = self.insert_records(records)?;
        let mut stats = self.flush_trees(&touched, ports);
        stats.inserts = inserted;
        stats.repacks = repacks;
        Ok(stats)
    }

    /// Drops index rows of internal nodes removed by structural edits.
    pub(crate) fn bury_removed_nodes(&mut self) {
        for tree in self.trees.values_mut() {
            for id in tree.drain_graveyard() {
                self.node_index.delete(&id);
            }
        }
    }

    /// Refreshes the dirty nodes of `only` and then their root rows.
    pub fn flush_trees(&mut self, only: &BTreeSet<TreeId>, ports: &Ports<'_>) -> FlushStats {
        let facts = &self.facts;
        let cells = &self.cells;
        let fact_index = &self.fact_index;
        let leaf_text = |p: Payload| -> Option<String> {
            match p {
                Payload::Fact(f) => facts.get(&f).map(|f| f.text.clone()),
                Payload::Cell(c) => cells.get(&c).map(|c| c.text.clone()),
            }
        };
        let known_vector = |p: Payload| -> Option<Vec<f32>> {
            match p {
                Payload::Fact(f) => fact_index.get(&f).map(|v| v.to_vec()),
                Payload::Cell(_) => None,
            }
        };
        let ctx = FlushContext { leaf_text: &leaf_text, known_vector: &known_vector };
        let stats = flush(&mut self.trees, only, &ctx, &mut self.node_index, ports);
        self.refresh_root_rows(only);
        stats
    }

    pub fn flush_all(&mut self, ports: &Ports<'_>) -> FlushStats {
        let all: BTreeSet<TreeId> = self.trees.keys().copied().collect();
        self.flush_trees(&all, ports)
    }

    pub(crate) fn refresh_root_rows(&mut self, only: &BTreeSet<TreeId>) {
        for t in only {
            let row = self
                .trees
                .get(t)
                .and_then(|tree| tree.root())
                .and_then(|r| self.node_index.get(&r))
                .map(|v| v.to_vec());
            match row {
                Some(v) => {
                    let _ = self.root_index.upsert(*t, v);
                }
                None => {
                    if !self.trees.contains_key(t) {
                        self.root_index.delete(t);
                    }
                }
            }
        }
    }

    /// Removes a tree, its scope binding, placement entries and index rows.
    pub(crate) fn drop_tree(&mut self, id: TreeId) {
        if let Some(tree) = self.trees.remove(&id) {
            for n in tree.nodes() {
                self.node_index.delete(&n.node_id);
            }
            self.scopes.remove(&tree.scope);
            self.placement.retain_tree(id);
            for a in self.registry.values_mut() {
                a.trees.remove(&id);
            }
        }
        self.root_index.delete(&id);
    }

    /// Structural invariants across the whole store. Returns the first
    /// violation found.
    pub fn check_invariants(&self) -> core::result::Result<(), String> {
        for t in self.trees.values() {
            t.check().map_err(|e| format!("tree {}: {e}", t.tree_id))?;
            if t.is_empty() {
                return Err(format!("tree {} is empty", t.tree_id));
            }
            if self.scopes.get(&t.scope) != Some(&t.tree_id) {
                return Err(format!("scope binding for tree {} is wrong", t.tree_id));
            }
            for l in t.leaves() {
                let p = t.node(l).and_then(|n| n.payload).ok_or("leaf without payload")?;
                if !self.placement.get(&p).any(|e| *e == (t.tree_id, l)) {
                    return Err(format!("leaf {l} of tree {} missing from placement", t.tree_id));
                }
                let anchor = match p {
                    Payload::Fact(f) => self.facts.get(&f).map(|f| f.anchor),
                    Payload::Cell(c) => self.cells.get(&c).map(|c| c.anchor),
                };
                if anchor != t.node(l).map(|n| n.interval) {
                    return Err(format!("leaf {l} interval differs from its payload anchor"));
                }
            }
        }
        if self.scopes.len() != self.trees.len() {
            return Err("scope map and tree map disagree".into());
        }
        for (p, entries) in self.placement.iter() {
            for (t, l) in entries {
                let ok = self.trees.get(t).and_then(|tree| tree.node(*l)).is_some_and(|n| n.payload == Some(*p));
                if !ok {
                    return Err(format!("placement entry {p:?} -> ({t}, {l}) is dangling"));
                }
            }
        }
        for f in self.facts.values() {
            if self.fact_keys.get(&f.canonical_key) != Some(&f.fact_id) {
                return Err(format!("fact {} missing from key map", f.fact_id));
            }
            if f.source_refs.is_empty() {
                return Err(format!("fact {} has no sources", f.fact_id));
            }
            let placed = self.placement.get(&Payload::Fact(f.fact_id)).count();
            if placed == 0 && !self.pending_scene.contains(&f.fact_id) {
                return Err(format!("fact {} is in no tree", f.fact_id));
            }
            for r in &f.source_refs {
                if !self.sessions.contains_key(&r.session_id) {
                    return Err(format!("fact {} cites unknown session {}", f.fact_id, r.session_id));
                }
            }
        }
        if self.fact_keys.len() != self.facts.len() {
            return Err("fact key map has stale entries".into());
        }
        for (s, a) in self.registry.iter() {
            for f in &a.facts {
                if !self.facts.get(f).is_some_and(|f| f.sourced_from(s)) {
                    return Err(format!("registry of {s} lists fact {f} not sourced from it"));
                }
            }
            for c in &a.cells {
                if !self.cells.contains_key(c) {
                    return Err(format!("registry of {s} lists missing cell {c}"));
                }
            }
        }
        for c in self.scenes.clusters() {
            for m in &c.members {
                if !self.facts.contains_key(m) {
                    return Err(format!("scene {} lists missing fact {m}", c.cluster_id));
                }
            }
        }
        Ok(())
    }

    pub fn to_parts(&self) -> StoreParts {
        let mut nodes = Vec::new();
        let mut trees = Vec::new();
        for t in self.trees.values() {
            trees.push(TreeRecord {
                tree_id: t.tree_id,
                scope: t.scope.clone(),
                k: t.k,
                root: t.root(),
                next_seq: t.next_seq(),
                rebuilds: t.rebuilds,
            });
            nodes.extend(t.nodes().map(|n| (t.tree_id, n.clone())));
        }
        StoreParts {
            config: self.config.clone(),
            counters: self.counters,
            sessions: self.sessions.values().cloned().collect(),
            facts: self.facts.values().cloned().collect(),
            cells: self.cells.values().cloned().collect(),
            placement: self.placement.clone(),
            registry: self.registry.clone(),
            trees,
            nodes,
            scene_next_id: self.scenes.next_id(),
            scenes: self.scenes.clusters().cloned().collect(),
            pending_scene: self.pending_scene.clone(),
            node_vectors: self.node_index.iter().map(|(k, v)| (*k, v.to_vec())).collect(),
            fact_vectors: self.fact_index.iter().map(|(k, v)| (*k, v.to_vec())).collect(),
        }
    }

    pub fn from_parts(parts: StoreParts) -> Result<Self> {
        let mut store = Store::new(parts.config)?;
        store.counters = parts.counters;
        store.sessions = parts.sessions.into_iter().map(|s| (s.session_id.clone(), s)).collect();
        for f in parts.facts {
            store.insert_fact(f);
        }
        store.cells = parts.cells.into_iter().map(|c| (c.cell_id, c)).collect();
        store.placement = parts.placement;
        store.registry = parts.registry;
        let mut by_tree: BTreeMap<TreeId, Vec<TreeNode>> = BTreeMap::new();
        for (t, n) in parts.nodes {
            by_tree.entry(t).or_default().push(n);
        }
        for r in parts.trees {
            let nodes = by_tree.remove(&r.tree_id).unwrap_or_default();
            let tree = MemTree::from_parts(r.tree_id, r.scope.clone(), r.k, r.root, r.next_seq, r.rebuilds, nodes)?;
            if store.scopes.insert(r.scope, r.tree_id).is_some() {
                return Err(Error::Snapshot(format!("scope of tree {} bound twice", r.tree_id)));
            }
            store.trees.insert(r.tree_id, tree);
        }
        if let Some(t) = by_tree.keys().next() {
            return Err(Error::Snapshot(format!("nodes reference unknown tree {t}")));
        }
        store.scenes = SceneState::from_parts(store.config.theta_scene, parts.scene_next_id, parts.scenes);
        store.pending_scene = parts.pending_scene;
        for (k, v) in parts.node_vectors {
            store.node_index.upsert(k, v)?;
        }
        for (k, v) in parts.fact_vectors {
            store.fact_index.upsert(k, v)?;
        }
        let all: BTreeSet<TreeId> = store.trees.keys().copied().collect();
        store.refresh_root_rows(&all);
        store.check_invariants().map_err(Error::Snapshot)?;
        Ok(store)
    }

    /// Number of trees per family.
    pub fn tree_counts(&self) -> BTreeMap<Family, usize> {
        let mut out = BTreeMap::new();
        for t in self.trees.values() {
            *out.entry(t.family()).or_default() += 1;
        }
        out
    }

    /// Summaries of every node, keyed by id.
    pub fn summaries(&self) -> BTreeMap<NodeId, Option<String>> {
        self.trees
            .values()
            .flat_map(|t| t.nodes().map(|n| (n.node_id, n.summary.clone())))
            .collect()
    }
}
