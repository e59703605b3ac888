//! Routes canonical facts to session, entity and scene scopes.
//!
//! Routing uses only the embedder (for scene assignment); no summarizer or
//! extractor calls happen here. Scenes come from greedy online clustering:
//! a fact joins the first cluster, in creation order, whose centroid is at
//! least `theta` cosine-similar and best among all clusters; otherwise it
//! seeds a new one.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::index::{dot, normalize};
use crate::substrate::{CanonicalFact, ClusterId, DialogueCell, FactId, Payload, RoutedRecord, ScopeId};

/// Label given to scenes whose members carry no topics.
pub const UNTOPICAL: &str = "general";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneCluster {
    pub cluster_id: ClusterId,
    /// Unit-length mean of member embeddings.
    pub centroid: Vec<f32>,
    pub members: BTreeSet<FactId>,
    pub topic_counts: BTreeMap<String, u64>,
}

impl SceneCluster {
    /// Most frequent member topic; ties go to the alphabetically first.
    pub fn label(&self) -> &str {
        let mut best: Option<(&String, u64)> = None;
        for (t, c) in &self.topic_counts {
            if best.is_none_or(|(_, bc)| *c > bc) {
                best = Some((t, *c));
            }
        }
        best.map_or(UNTOPICAL, |(t, _)| t.as_str())
    }

    // Summed in member-id order, so the centroid depends only on the member
    // set and never accumulates add/remove drift.
    fn recompute_centroid(&mut self, vectors: &dyn Fn(FactId) -> Option<Vec<f32>>) {
        let mut sum: Vec<f64> = Vec::new();
        for m in &self.members {
            let Some(v) = vectors(*m) else { continue };
            if sum.is_empty() {
                sum = alloc::vec![0.0; v.len()];
            }
            for (s, x) in sum.iter_mut().zip(&v) {
                *s += *x as f64;
            }
        }
        let mut c: Vec<f32> = sum.iter().map(|x| *x as f32).collect();
        if normalize(&mut c) {
            self.centroid = c;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub theta: f64,
    clusters: BTreeMap<ClusterId, SceneCluster>,
    member_of: BTreeMap<FactId, ClusterId>,
    next_id: u64,
}

impl SceneState {
    pub fn new(theta: f64) -> Self {
        Self { theta, clusters: BTreeMap::new(), member_of: BTreeMap::new(), next_id: 1 }
    }

    pub fn from_parts(theta: f64, next_id: u64, clusters: impl IntoIterator<Item = SceneCluster>) -> Self {
        let clusters: BTreeMap<ClusterId, SceneCluster> = clusters.into_iter().map(|c| (c.cluster_id, c)).collect();
        let member_of = clusters
            .values()
            .flat_map(|c| c.members.iter().map(move |m| (*m, c.cluster_id)))
            .collect();
        Self { theta, clusters, member_of, next_id }
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    pub fn clusters(&self) -> impl Iterator<Item = &SceneCluster> {
        self.clusters.values()
    }

    pub fn get(&self, id: ClusterId) -> Option<&SceneCluster> {
        self.clusters.get(&id)
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn cluster_of(&self, fact: FactId) -> Option<ClusterId> {
        self.member_of.get(&fact).copied()
    }

    /// Best-matching cluster at or above the threshold. Clusters are scanned
    /// in creation order and only a strictly better score displaces the
    /// current best.
    pub fn best_match(&self, v: &[f32]) -> Option<(ClusterId, f64)> {
        let mut best: Option<(ClusterId, f64)> = None;
        for c in self.clusters.values() {
            let s = dot(v, &c.centroid);
            if s >= self.theta && best.is_none_or(|(_, b)| s > b) {
                best = Some((c.cluster_id, s));
            }
        }
        best
    }

    /// Places a fact with unit embedding `v`, returning its cluster.
    /// `vectors` must resolve every member, including `fact`.
    pub fn assign(
        &mut self,
        fact: FactId,
        v: &[f32],
        topics: &BTreeSet<String>,
        vectors: &dyn Fn(FactId) -> Option<Vec<f32>>,
    ) -> ClusterId {
        if let Some(c) = self.member_of.get(&fact) {
            return *c;
        }
        let id = match self.best_match(v) {
            Some((id, _)) => id,
            None => {
                let id = ClusterId(self.next_id);
                self.next_id += 1;
                self.clusters.insert(
                    id,
                    SceneCluster {
                        cluster_id: id,
                        centroid: v.to_vec(),
                        members: BTreeSet::new(),
                        topic_counts: BTreeMap::new(),
                    },
                );
                id
            }
        };
        self.add_member(id, fact, topics, vectors);
        id
    }

    pub(crate) fn add_member(
        &mut self,
        id: ClusterId,
        fact: FactId,
        topics: &BTreeSet<String>,
        vectors: &dyn Fn(FactId) -> Option<Vec<f32>>,
    ) {
        let c = self.clusters.get_mut(&id).expect("cluster exists");
        c.members.insert(fact);
        for t in topics {
            *c.topic_counts.entry(t.clone()).or_default() += 1;
        }
        c.recompute_centroid(vectors);
        self.member_of.insert(fact, id);
    }

    /// Takes a fact out of its cluster. Returns the cluster id and whether the
    /// cluster became empty (and was dropped).
    pub fn remove_member(
        &mut self,
        fact: FactId,
        topics: &BTreeSet<String>,
        vectors: &dyn Fn(FactId) -> Option<Vec<f32>>,
    ) -> Option<(ClusterId, bool)> {
        let id = self.member_of.remove(&fact)?;
        let c = self.clusters.get_mut(&id).expect("cluster exists");
        c.members.remove(&fact);
        if c.members.is_empty() {
            self.clusters.remove(&id);
            return Some((id, true));
        }
        for t in topics {
            if let Some(n) = c.topic_counts.get_mut(t) {
                *n -= 1;
                if *n == 0 {
                    c.topic_counts.remove(t);
                }
            }
        }
        c.recompute_centroid(vectors);
        Some((id, false))
    }

    /// Recomputes every centroid from `vectors`, e.g. after the embedder changed.
    pub fn recompute(&mut self, vectors: &dyn Fn(FactId) -> Option<Vec<f32>>) {
        for c in self.clusters.values_mut() {
            c.recompute_centroid(vectors);
        }
    }

    /// Drops `id` if it has no members.
    pub(crate) fn drop_empty(&mut self, id: ClusterId) {
        if self.clusters.get(&id).is_some_and(|c| c.members.is_empty()) {
            self.clusters.remove(&id);
        }
    }

    /// Inserts a cluster wholesale under a fresh id (used by merge).
    pub(crate) fn adopt(&mut self, mut cluster: SceneCluster) -> ClusterId {
        let id = ClusterId(self.next_id);
        self.next_id += 1;
        cluster.cluster_id = id;
        for m in &cluster.members {
            self.member_of.insert(*m, id);
        }
        self.clusters.insert(id, cluster);
        id
    }
}

/// Session-scope records for `cells`, skipping cells already in `emitted`.
pub fn route_cells(cells: &[DialogueCell], emitted: &mut BTreeSet<crate::substrate::CellId>) -> Result<Vec<RoutedRecord>> {
    let mut out = Vec::new();
    for c in cells {
        if emitted.insert(c.cell_id) {
            out.push(RoutedRecord::new(ScopeId::session(&c.session_id), Payload::Cell(c.cell_id), c.anchor)?);
        }
    }
    Ok(out)
}

/// One entity record per label, plus the scene record when a cluster is known.
pub fn route_fact(fact: &CanonicalFact, scene: Option<ClusterId>) -> Result<Vec<RoutedRecord>> {
    let mut out = Vec::new();
    for label in &fact.entities {
        let Ok(scope) = ScopeId::entity(label) else { continue };
        out.push(RoutedRecord::new(scope, Payload::Fact(fact.fact_id), fact.anchor)?);
    }
    if let Some(c) = scene {
        out.push(RoutedRecord::new(ScopeId::scene(c), Payload::Fact(fact.fact_id), fact.anchor)?);
    }
    Ok(out)
}

/// Label used as the planner-visible topic of a scope.
pub fn scope_topic(scope: &ScopeId, scenes: &SceneState) -> String {
    match scope.family {
        crate::substrate::Family::Scene => scope
            .key
            .parse::<u64>()
            .ok()
            .and_then(|id| scenes.get(ClusterId(id)))
            .map_or_else(|| UNTOPICAL.to_string(), |c| c.label().to_string()),
        _ => scope.key.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::cosine;
    use alloc::vec;
    use proptest::prelude::*;

    fn unit(v: &[f32]) -> Vec<f32> {
        let mut v = v.to_vec();
        normalize(&mut v);
        v
    }

    #[test]
    fn seed_join_and_threshold() {
        let mut s = SceneState::new(0.6);
        let none = BTreeSet::new();
        let vecs = |f: FactId| Some(if f.0 < 3 { unit(&[1.0, 0.0]) } else { near_theta() });
        let a = s.assign(FactId(1), &unit(&[1.0, 0.0]), &none, &vecs);
        assert_eq!(s.get(a).unwrap().centroid, vec![1.0, 0.0]);
        assert_eq!(s.assign(FactId(2), &unit(&[1.0, 0.0]), &none, &vecs), a);
        let v = near_theta();
        assert!(dot(&v, &s.get(a).unwrap().centroid) < 0.6);
        assert_ne!(s.assign(FactId(3), &v, &none, &vecs), a);
    }

    // cosine to e0 just under 0.6
    fn near_theta() -> Vec<f32> {
        let angle = libm::acos(0.6 - 1e-3);
        unit(&[libm::cos(angle) as f32, libm::sin(angle) as f32])
    }

    #[test]
    fn label_is_most_frequent_topic() {
        let mut s = SceneState::new(0.0);
        let t = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect::<BTreeSet<_>>();
        let vecs = |f: FactId| Some(unit(&[1.0, f.0 as f32 / 10.0]));
        let c = s.assign(FactId(1), &vecs(FactId(1)).unwrap(), &t(&["travel"]), &vecs);
        s.assign(FactId(2), &vecs(FactId(2)).unwrap(), &t(&["residence"]), &vecs);
        s.assign(FactId(3), &vecs(FactId(3)).unwrap(), &t(&["residence", "work"]), &vecs);
        assert_eq!(s.get(c).unwrap().label(), "residence");
    }

    #[test]
    fn fact_routes_fan_out() {
        let fact = CanonicalFact {
            fact_id: FactId(1),
            text: "Bob moved to Miami".into(),
            anchor: crate::substrate::TemporalAnchor::point(crate::substrate::Timestamp(0)),
            source_refs: BTreeSet::new(),
            entities: ["bob".to_string(), "miami".to_string()].into_iter().collect(),
            topics: BTreeSet::new(),
            canonical_key: "bob moved to miami".into(),
        };
        let r = route_fact(&fact, Some(ClusterId(4))).unwrap();
        assert_eq!(r.len(), 3);
        let mut bare = fact.clone();
        bare.entities.clear();
        assert_eq!(route_fact(&bare, Some(ClusterId(4))).unwrap().len(), 1);
    }

    proptest! {
        #[test]
        fn centroid_is_renormalized_member_mean(
            vs in proptest::collection::vec(proptest::collection::vec(-1.0f32..1.0, 3), 1..40),
            removals in proptest::collection::vec(any::<usize>(), 0..10),
            theta in 0.0f64..0.9,
        ) {
            let mut s = SceneState::new(theta);
            let mut all: BTreeMap<FactId, Vec<f32>> = BTreeMap::new();
            for (i, v) in vs.iter().enumerate() {
                let mut u = v.clone();
                if normalize(&mut u) { all.insert(FactId(i as u64), u); }
            }
            let lookup = |f: FactId| all.get(&f).cloned();
            let mut live: BTreeSet<FactId> = BTreeSet::new();
            for (f, u) in &all {
                s.assign(*f, u, &BTreeSet::new(), &lookup);
                live.insert(*f);
            }
            for r in removals {
                if live.is_empty() { break; }
                let f = *live.iter().nth(r % live.len()).unwrap();
                live.remove(&f);
                s.remove_member(f, &BTreeSet::new(), &lookup);
            }
            for c in s.clusters() {
                prop_assert!(!c.members.is_empty());
                let mut mean = vec![0.0f64; 3];
                for m in &c.members {
                    prop_assert!(live.contains(m));
                    for (a, b) in mean.iter_mut().zip(&all[m]) { *a += *b as f64; }
                }
                let mean: Vec<f32> = mean.iter().map(|x| *x as f32).collect();
                let cos = cosine(&mean, &c.centroid);
                // a mean that cancels to ~0 has no direction to compare
                if libm::sqrt(dot(&mean, &mean)) > 1e-3 {
                    prop_assert!(cos > 1.0 - 1e-4, "cos {}", cos);
                }
            }
        }
    }
}
