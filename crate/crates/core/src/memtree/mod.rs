//! Balanced k-ary trees with time-ordered leaves.
//!
//! Structural edits (insert, delete, split) are applied eagerly and mark the
//! affected path dirty. Summary and embedding work happens later, in
//! [`flush`], which refreshes dirty nodes bottom-up, level by level.
//!
//! Leaves are ordered by `(anchor.start, seq)` where `seq` is the insertion
//! sequence, so equal anchors keep arrival order. Overflowing nodes first try
//! to hand a border child to a sibling with room, then split: the rightmost
//! node of a level splits `k | 1` so time-ordered appends stay packed, any
//! other node splits in half. A split only happens when some ancestor has
//! room or the tree is full and may grow; otherwise the lowest ancestor whose
//! subtree still fits under its level is rebuilt with its leaves spread
//! evenly. Deletions that leave the tree too tall repack it from its leaves.

mod flush;

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::substrate::{Family, NodeId, Payload, ScopeId, TemporalAnchor, TreeId};

pub use flush::{flush, FlushContext, FlushStats};

/// Allocator for store-unique node ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeIdGen {
    pub next: u64,
}

impl Default for NodeIdGen {
    fn default() -> Self {
        Self { next: 1 }
    }
}

impl NodeIdGen {
    pub fn alloc(&mut self) -> NodeId {
        let id = NodeId(self.next);
        self.next += 1;
        id
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeNode {
    pub node_id: NodeId,
    /// 0 for leaves, increasing toward the root.
    pub level: u32,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub payload: Option<Payload>,
    /// Insertion sequence; the tie-break among equal leaf anchors.
    pub seq: u64,
    pub interval: TemporalAnchor,
    pub dirty: bool,
    pub summary: Option<String>,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.level == 0
    }
}

/// Leaves a subtree rooted at `level` can hold.
fn capacity(k: usize, level: u32) -> usize {
    k.saturating_pow(level)
}

/// Smallest `h` with `k^h >= n`. Zero for `n <= 1`.
pub fn ceil_log(k: usize, n: usize) -> u32 {
    let mut h = 0;
    let mut cap: usize = 1;
    while cap < n {
        cap = cap.saturating_mul(k.max(2));
        h += 1;
    }
    h
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemTree {
    pub tree_id: TreeId,
    pub scope: ScopeId,
    pub k: usize,
    root: Option<NodeId>,
    nodes: BTreeMap<NodeId, TreeNode>,
    next_seq: u64,
    leaf_total: usize,
    /// Number of full repacks performed; diagnostic only.
    pub rebuilds: u64,
    /// Internal nodes removed since the last drain, for index cleanup.
    graveyard: Vec<NodeId>,
}

impl MemTree {
    pub fn new(tree_id: TreeId, scope: ScopeId, k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config(alloc::format!("branching factor must be at least 2, got {k}")));
        }
        Ok(Self {
            tree_id,
            scope,
            k,
            root: None,
            nodes: BTreeMap::new(),
            next_seq: 0,
            leaf_total: 0,
            rebuilds: 0,
            graveyard: Vec::new(),
        })
    }

    /// Reassembles a tree from persisted nodes, checking structure.
    pub fn from_parts(
        tree_id: TreeId,
        scope: ScopeId,
        k: usize,
        root: Option<NodeId>,
        next_seq: u64,
        rebuilds: u64,
        nodes: impl IntoIterator<Item = TreeNode>,
    ) -> Result<Self> {
        let mut t = Self::new(tree_id, scope, k)?;
        t.root = root;
        t.next_seq = next_seq;
        t.rebuilds = rebuilds;
        t.nodes = nodes.into_iter().map(|n| (n.node_id, n)).collect();
        t.leaf_total = t.nodes.values().filter(|n| n.is_leaf()).count();
        t.check().map_err(|e| Error::Snapshot(alloc::format!("tree {tree_id}: {e}")))?;
        Ok(t)
    }

    pub fn family(&self) -> Family {
        self.scope.family
    }

    pub fn root(&self) -> Option<NodeId> {
        self.root
    }

    pub fn root_node(&self) -> Option<&TreeNode> {
        self.root.and_then(|r| self.nodes.get(&r))
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn node(&self, id: NodeId) -> Option<&TreeNode> {
        self.nodes.get(&id)
    }

    pub(crate) fn node_mut(&mut self, id: NodeId) -> Option<&mut TreeNode> {
        self.nodes.get_mut(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &TreeNode> {
        self.nodes.values()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.root.is_none()
    }

    /// Number of levels including the leaf level; 0 for an empty tree.
    pub fn height(&self) -> u32 {
        self.root_node().map_or(0, |r| r.level + 1)
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_total
    }

    /// Leaves in temporal order.
    pub fn leaves(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        if let Some(r) = self.root {
            self.collect_leaves(r, &mut out);
        }
        out
    }

    fn collect_leaves(&self, id: NodeId, out: &mut Vec<NodeId>) {
        let n = &self.nodes[&id];
        if n.is_leaf() {
            out.push(id);
        } else {
            for c in &n.children {
                self.collect_leaves(*c, out);
            }
        }
    }

    fn last_start(&self, mut id: NodeId) -> crate::substrate::Timestamp {
        loop {
            let n = &self.nodes[&id];
            match n.children.last() {
                Some(c) => id = *c,
                None => return n.interval.start,
            }
        }
    }

    /// Path from `id` up to the root, inclusive of both.
    pub fn ancestors(&self, id: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut cur = Some(id);
        while let Some(c) = cur {
            out.push(c);
            cur = self.nodes.get(&c).and_then(|n| n.parent);
        }
        out
    }

    pub fn dirty_count(&self) -> usize {
        self.nodes.values().filter(|n| n.dirty).count()
    }

    pub(crate) fn drain_graveyard(&mut self) -> Vec<NodeId> {
        core::mem::take(&mut self.graveyard)
    }

    /// Marks `leaf` and its ancestors dirty. Returns only the nodes that were
    /// clean before, so repeated marks coalesce.
    pub fn mark_dirty_ancestors(&mut self, leaf: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        for id in self.ancestors(leaf) {
            let n = self.nodes.get_mut(&id).expect("ancestor exists");
            if !n.dirty {
                n.dirty = true;
                out.push(id);
            }
        }
        out
    }

    fn mark_dirty(&mut self, id: NodeId) {
        if let Some(n) = self.nodes.get_mut(&id) {
            n.dirty = true;
        }
    }

    /// Inserts a leaf at its temporal position (after every leaf with the
    /// same or an earlier start) and returns its id.
    pub fn insert_leaf(&mut self, payload: Payload, anchor: TemporalAnchor, ids: &mut NodeIdGen) -> NodeId {
        let id = ids.alloc();
        self.insert_leaf_with_id(id, payload, anchor, ids);
        id
    }

    /// Like [`insert_leaf`](Self::insert_leaf) but reuses a given leaf id.
    pub(crate) fn insert_leaf_with_id(&mut self, id: NodeId, payload: Payload, anchor: TemporalAnchor, ids: &mut NodeIdGen) {
        let seq = self.next_seq;
        self.next_seq += 1;
        let leaf = TreeNode {
            node_id: id,
            level: 0,
            parent: None,
            children: Vec::new(),
            payload: Some(payload),
            seq,
            interval: anchor,
            dirty: true,
            summary: None,
        };
        self.nodes.insert(id, leaf);
        self.leaf_total += 1;

        let Some(root) = self.root else {
            self.root = Some(id);
            return;
        };
        if self.nodes[&root].is_leaf() {
            let new_root = self.new_internal(ids, 1, Vec::new());
            self.attach(new_root, 0, root);
            self.root = Some(new_root);
        }

        // Descend to the level-1 node that owns the insertion point.
        let mut cur = self.root.expect("root");
        loop {
            let n = &self.nodes[&cur];
            let pos = n.children.iter().rposition(|c| self.nodes[c].interval.start <= anchor.start);
            if n.level == 1 {
                let at = pos.map_or(0, |p| p + 1);
                self.attach(cur, at, id);
                break;
            }
            let mut next = pos.unwrap_or(0);
            // In the gap between two children the leaf may open the right one
            // instead of closing the left one; prefer the side with room.
            if let Some(p) = pos {
                if p + 1 < n.children.len()
                    && self.nodes[&n.children[p]].children.len() >= self.k
                    && self.nodes[&n.children[p + 1]].children.len() < self.k
                    && self.last_start(n.children[p]) <= anchor.start
                {
                    next = p + 1;
                }
            }
            cur = n.children[next];
        }
        self.refresh_path(cur);
        self.mark_dirty_ancestors(id);
        self.fix_overflow(cur, ids);
        self.enforce_bound(ids);
    }

    /// Inserts a leaf that already has a summary (moved from another tree).
    /// With `summary = None` the leaf is left dirty like a fresh insert.
    pub(crate) fn graft_leaf(
        &mut self,
        id: NodeId,
        payload: Payload,
        anchor: TemporalAnchor,
        summary: Option<String>,
        ids: &mut NodeIdGen,
    ) {
        self.insert_leaf_with_id(id, payload, anchor, ids);
        let leaf = self.nodes.get_mut(&id).expect("grafted leaf");
        leaf.dirty = summary.is_none();
        leaf.summary = summary;
    }

    /// Grafts every leaf of `other` into this tree under fresh ids, keeping
    /// clean summaries. Returns the new ids in `other`'s leaf order.
    pub fn absorb(&mut self, other: &MemTree, ids: &mut NodeIdGen) -> Vec<NodeId> {
        let mut out = Vec::with_capacity(other.leaf_count());
        for l in other.leaves() {
            let n = &other.nodes[&l];
            let id = ids.alloc();
            let summary = if n.dirty { None } else { n.summary.clone() };
            self.graft_leaf(id, n.payload.expect("leaf payload"), n.interval, summary, ids);
            out.push(id);
        }
        out
    }

    /// Copies this tree under fresh node ids. Leaf payloads pass through
    /// `map`; leaves mapped to `None` are removed from the copy, which dirties
    /// their paths. Returns the copy and the old-to-new id map of surviving
    /// nodes.
    pub(crate) fn remapped(
        &self,
        tree_id: TreeId,
        scope: ScopeId,
        ids: &mut NodeIdGen,
        map: &dyn Fn(Payload) -> Option<Payload>,
    ) -> (MemTree, BTreeMap<NodeId, NodeId>) {
        let mut idmap: BTreeMap<NodeId, NodeId> = BTreeMap::new();
        for id in self.nodes.keys() {
            idmap.insert(*id, ids.alloc());
        }
        let mut copy = MemTree::new(tree_id, scope, self.k).expect("k already validated");
        copy.next_seq = self.next_seq;
        copy.leaf_total = self.leaf_total;
        copy.root = self.root.map(|r| idmap[&r]);
        let mut doomed = Vec::new();
        for n in self.nodes.values() {
            let mut c = n.clone();
            c.node_id = idmap[&n.node_id];
            c.parent = n.parent.map(|p| idmap[&p]);
            c.children = n.children.iter().map(|x| idmap[x]).collect();
            if let Some(p) = n.payload {
                match map(p) {
                    Some(q) => c.payload = Some(q),
                    None => doomed.push(c.node_id),
                }
            }
            copy.nodes.insert(c.node_id, c);
        }
        for d in doomed {
            copy.remove_leaf(d, ids);
        }
        idmap.retain(|_, new| copy.nodes.contains_key(new));
        (copy, idmap)
    }

    /// Removes a leaf, pruning emptied ancestors and marking the survivors
    /// dirty. Returns the payload the leaf carried.
    pub fn remove_leaf(&mut self, leaf: NodeId, ids: &mut NodeIdGen) -> Option<Payload> {
        let node = self.nodes.remove(&leaf)?;
        self.leaf_total -= 1;
        let payload = node.payload;
        let mut child = leaf;
        let mut parent = node.parent;
        while let Some(p) = parent {
            let pn = self.nodes.get_mut(&p).expect("parent exists");
            pn.children.retain(|c| *c != child);
            if !pn.children.is_empty() {
                break;
            }
            let up = pn.parent;
            self.nodes.remove(&p);
            self.graveyard.push(p);
            child = p;
            parent = up;
        }
        match parent {
            None => self.root = None,
            Some(p) => {
                self.refresh_path(p);
                for a in self.ancestors(p) {
                    self.mark_dirty(a);
                }
            }
        }
        self.collapse_root();
        self.enforce_bound(ids);
        payload
    }

    /// Moves a leaf to the position matching `anchor`, keeping its id.
    pub(crate) fn reposition_leaf(&mut self, leaf: NodeId, anchor: TemporalAnchor, ids: &mut NodeIdGen) {
        let Some(payload) = self.remove_leaf(leaf, ids) else { return };
        self.insert_leaf_with_id(leaf, payload, anchor, ids);
    }

    /// Rebuilds every internal node, packing leaves evenly. Leaves keep their
    /// ids, summaries and dirty flags; all new internal nodes are dirty.
    pub fn repack(&mut self, ids: &mut NodeIdGen) {
        let leaves = self.leaves();
        let old: Vec<NodeId> = self.nodes.values().filter(|n| !n.is_leaf()).map(|n| n.node_id).collect();
        for id in old {
            self.nodes.remove(&id);
            self.graveyard.push(id);
        }
        for l in &leaves {
            self.nodes.get_mut(l).expect("leaf").parent = None;
        }
        self.root = self.pack(leaves, ids);
    }

    /// Re-forms the tree with a new branching factor.
    pub fn rebuild_with_k(&mut self, k: usize, ids: &mut NodeIdGen) -> Result<()> {
        if k < 2 {
            return Err(Error::Config(alloc::format!("branching factor must be at least 2, got {k}")));
        }
        self.k = k;
        self.repack(ids);
        Ok(())
    }

    fn pack(&mut self, mut level_nodes: Vec<NodeId>, ids: &mut NodeIdGen) -> Option<NodeId> {
        if level_nodes.is_empty() {
            return None;
        }
        let mut level = 1;
        while level_nodes.len() > 1 {
            let n = level_nodes.len();
            let groups = n.div_ceil(self.k);
            let (base, extra) = (n / groups, n % groups);
            let mut next = Vec::with_capacity(groups);
            let mut it = level_nodes.into_iter();
            for g in 0..groups {
                let size = base + usize::from(g < extra);
                let children: Vec<NodeId> = it.by_ref().take(size).collect();
                let p = self.new_internal(ids, level, Vec::new());
                for (i, c) in children.into_iter().enumerate() {
                    self.attach(p, i, c);
                }
                self.recompute_interval(p);
                next.push(p);
            }
            level_nodes = next;
            level += 1;
        }
        self.rebuilds += 1;
        level_nodes.pop()
    }

    fn new_internal(&mut self, ids: &mut NodeIdGen, level: u32, children: Vec<NodeId>) -> NodeId {
        let id = ids.alloc();
        let interval = children
            .first()
            .map(|c| self.nodes[c].interval)
            .unwrap_or(TemporalAnchor::point(crate::substrate::Timestamp(0)));
        self.nodes.insert(
            id,
            TreeNode {
                node_id: id,
                level,
                parent: None,
                children,
                payload: None,
                seq: 0,
                interval,
                dirty: true,
                summary: None,
            },
        );
        id
    }

    fn attach(&mut self, parent: NodeId, at: usize, child: NodeId) {
        self.nodes.get_mut(&child).expect("child").parent = Some(parent);
        let p = self.nodes.get_mut(&parent).expect("parent");
        p.children.insert(at, child);
        p.dirty = true;
    }

    fn recompute_interval(&mut self, id: NodeId) {
        let n = &self.nodes[&id];
        if n.is_leaf() || n.children.is_empty() {
            return;
        }
        let mut iv = self.nodes[&n.children[0]].interval;
        for c in &n.children[1..] {
            iv = iv.union(&self.nodes[c].interval);
        }
        self.nodes.get_mut(&id).expect("node").interval = iv;
    }

    /// Recomputes intervals from `id` up to the root.
    fn refresh_path(&mut self, id: NodeId) {
        for a in self.ancestors(id) {
            self.recompute_interval(a);
        }
    }

    /// Whether `id` is the last node of its level.
    fn is_rightmost(&self, id: NodeId) -> bool {
        let mut cur = id;
        while let Some(p) = self.nodes[&cur].parent {
            if self.nodes[&p].children.last() != Some(&cur) {
                return false;
            }
            cur = p;
        }
        true
    }

    fn fix_overflow(&mut self, mut id: NodeId, ids: &mut NodeIdGen) {
        while self.nodes[&id].children.len() > self.k {
            if self.shift_to_sibling(id) {
                return;
            }
            if !self.can_split(id) {
                self.rebuild_lowest_fitting(id, ids);
                return;
            }
            let appended = self.is_rightmost(id);
            let children = self.nodes[&id].children.clone();
            let keep = if appended { self.k } else { children.len().div_ceil(2) };
            let moved: Vec<NodeId> = children[keep..].to_vec();
            let level = self.nodes[&id].level;
            let sib = self.new_internal(ids, level, Vec::new());
            self.nodes.get_mut(&id).expect("node").children.truncate(keep);
            for (i, c) in moved.into_iter().enumerate() {
                self.attach(sib, i, c);
            }
            self.recompute_interval(id);
            self.recompute_interval(sib);
            self.mark_dirty(id);

            match self.nodes[&id].parent {
                Some(p) => {
                    let at = self.nodes[&p].children.iter().position(|c| *c == id).expect("child of parent") + 1;
                    self.attach(p, at, sib);
                    self.refresh_path(p);
                    id = p;
                }
                None => {
                    let root = self.new_internal(ids, level + 1, Vec::new());
                    self.attach(root, 0, id);
                    self.attach(root, 1, sib);
                    self.recompute_interval(root);
                    self.root = Some(root);
                    return;
                }
            }
        }
    }

    /// Whether splitting upward from `id` keeps the height bound: an ancestor
    /// has room, or every node on the path is full and the tree may grow.
    fn can_split(&self, id: NodeId) -> bool {
        let mut cur = self.nodes[&id].parent;
        while let Some(p) = cur {
            if self.nodes[&p].children.len() < self.k {
                return true;
            }
            cur = self.nodes[&p].parent;
        }
        let root = self.root_node().expect("overflow implies a root");
        capacity(self.k, root.level) < self.leaf_total
    }

    fn subtree_leaves(&self, id: NodeId) -> usize {
        let n = &self.nodes[&id];
        if n.is_leaf() {
            return 1;
        }
        n.children.iter().map(|c| self.subtree_leaves(*c)).sum()
    }

    fn rebuild_lowest_fitting(&mut self, id: NodeId, ids: &mut NodeIdGen) {
        let mut cur = id;
        while self.subtree_leaves(cur) > capacity(self.k, self.nodes[&cur].level) {
            cur = self.nodes[&cur].parent.expect("the root fits when the tree may not grow");
        }
        let mut leaves = Vec::new();
        self.collect_leaves(cur, &mut leaves);
        let mut stack = core::mem::take(&mut self.nodes.get_mut(&cur).expect("node").children);
        while let Some(c) = stack.pop() {
            if self.nodes[&c].is_leaf() {
                continue;
            }
            let n = self.nodes.remove(&c).expect("internal node");
            stack.extend(n.children);
            self.graveyard.push(c);
        }
        self.rebuilds += 1;
        self.fill(cur, &leaves, ids);
    }

    /// Hangs `leaves` under the empty internal node `node`, spread evenly over
    /// a complete set of levels.
    fn fill(&mut self, node: NodeId, leaves: &[NodeId], ids: &mut NodeIdGen) {
        let level = self.nodes[&node].level;
        if level == 1 {
            for (i, l) in leaves.iter().enumerate() {
                self.attach(node, i, *l);
            }
        } else {
            let groups = leaves.len().div_ceil(capacity(self.k, level - 1));
            let (base, extra) = (leaves.len() / groups, leaves.len() % groups);
            let mut at = 0;
            for g in 0..groups {
                let size = base + usize::from(g < extra);
                let child = self.new_internal(ids, level - 1, Vec::new());
                self.attach(node, g, child);
                self.fill(child, &leaves[at..at + size], ids);
                at += size;
            }
        }
        self.recompute_interval(node);
        self.mark_dirty(node);
    }

    // Hands one border child of an overfull node to an adjacent sibling with
    // spare room. Only the left neighbour of a rightmost node is skipped, so
    // time-ordered appends keep filling fresh nodes.
    fn shift_to_sibling(&mut self, id: NodeId) -> bool {
        let Some(p) = self.nodes[&id].parent else { return false };
        let siblings = self.nodes[&p].children.clone();
        let i = siblings.iter().position(|c| *c == id).expect("child of parent");
        if i > 0 && !self.is_rightmost(id) {
            let left = siblings[i - 1];
            if self.nodes[&left].children.len() < self.k {
                let moved = self.nodes.get_mut(&id).expect("node").children.remove(0);
                let at = self.nodes[&left].children.len();
                self.attach(left, at, moved);
                self.recompute_interval(id);
                self.recompute_interval(left);
                self.mark_dirty(id);
                return true;
            }
        }
        if i + 1 < siblings.len() {
            let right = siblings[i + 1];
            if self.nodes[&right].children.len() < self.k {
                let moved = self.nodes.get_mut(&id).expect("node").children.pop().expect("overfull");
                self.attach(right, 0, moved);
                self.recompute_interval(id);
                self.recompute_interval(right);
                self.mark_dirty(id);
                return true;
            }
        }
        false
    }

    fn collapse_root(&mut self) {
        while let Some(r) = self.root {
            let n = &self.nodes[&r];
            if n.is_leaf() || n.children.len() != 1 {
                break;
            }
            let child = n.children[0];
            self.nodes.remove(&r);
            self.graveyard.push(r);
            self.nodes.get_mut(&child).expect("child").parent = None;
            self.root = Some(child);
        }
    }

    fn enforce_bound(&mut self, ids: &mut NodeIdGen) {
        let Some(root) = self.root_node() else { return };
        let n = self.leaf_count();
        if root.level > ceil_log(self.k, n) {
            self.repack(ids);
        }
    }

    /// Full structural check; returns a description of the first violation.
    pub fn check(&self) -> core::result::Result<(), String> {
        use alloc::format;
        let Some(root) = self.root else {
            return if self.nodes.is_empty() { Ok(()) } else { Err("nodes without a root".into()) };
        };
        let rn = self.nodes.get(&root).ok_or("root missing")?;
        if rn.parent.is_some() {
            return Err("root has a parent".into());
        }
        let mut seen = BTreeSet::new();
        let mut stack = alloc::vec![root];
        while let Some(id) = stack.pop() {
            if !seen.insert(id) {
                return Err(format!("node {id} reachable twice"));
            }
            let n = self.nodes.get(&id).ok_or_else(|| format!("node {id} missing"))?;
            if n.is_leaf() {
                if n.payload.is_none() || !n.children.is_empty() {
                    return Err(format!("leaf {id} malformed"));
                }
                continue;
            }
            if n.children.is_empty() || n.children.len() > self.k {
                return Err(format!("node {id} has {} children (k = {})", n.children.len(), self.k));
            }
            let mut iv: Option<TemporalAnchor> = None;
            for c in &n.children {
                let cn = self.nodes.get(c).ok_or_else(|| format!("child {c} missing"))?;
                if cn.parent != Some(id) {
                    return Err(format!("child {c} has wrong parent"));
                }
                if cn.level + 1 != n.level {
                    return Err(format!("child {c} at level {} under level {}", cn.level, n.level));
                }
                iv = Some(iv.map_or(cn.interval, |a| a.union(&cn.interval)));
                stack.push(*c);
            }
            if iv != Some(n.interval) {
                return Err(format!("node {id} interval is not the union of its children"));
            }
        }
        if seen.len() != self.nodes.len() {
            return Err("unreachable nodes present".into());
        }
        let leaves = self.leaves();
        for w in leaves.windows(2) {
            let (a, b) = (&self.nodes[&w[0]], &self.nodes[&w[1]]);
            if (a.interval.start, a.seq) >= (b.interval.start, b.seq) {
                return Err(format!("leaves {} and {} out of temporal order", a.node_id, b.node_id));
            }
        }
        if rn.level > ceil_log(self.k, leaves.len()) {
            return Err(format!("height {} exceeds bound for N = {}", rn.level + 1, leaves.len()));
        }
        Ok(())
    }
}
