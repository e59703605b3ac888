//! Exact cosine top-K over unit vectors.
//!
//! Rows are kept in a `BTreeMap`, so scans visit keys in order and ties break
//! toward the smaller key. All vectors in one index share a dimension, fixed
//! by the first insert.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Scales `v` to unit length. Returns `false` for a zero or non-finite vector.
pub fn normalize(v: &mut [f32]) -> bool {
    let norm2: f64 = v.iter().map(|x| (*x as f64) * (*x as f64)).sum();
    if !norm2.is_finite() || norm2 == 0.0 {
        return false;
    }
    let inv = 1.0 / libm::sqrt(norm2);
    for x in v.iter_mut() {
        *x = (*x as f64 * inv) as f32;
    }
    true
}

/// Dot product accumulated in f64.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

/// Cosine similarity; 0 when either side is zero.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let na = libm::sqrt(dot(a, a));
    let nb = libm::sqrt(dot(b, b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex<K: Ord + Copy> {
    dim: Option<usize>,
    rows: BTreeMap<K, Vec<f32>>,
}

impl<K: Ord + Copy> Default for EmbeddingIndex<K> {
    fn default() -> Self {
        Self { dim: None, rows: BTreeMap::new() }
    }
}

impl<K: Ord + Copy> EmbeddingIndex<K> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Inserts or replaces the row for `key`. The vector is stored normalized;
    /// one that is already unit length (within 1e-6) is stored bit for bit, so
    /// copying rows between indexes never drifts.
    pub fn upsert(&mut self, key: K, mut vector: Vec<f32>) -> Result<()> {
        self.check_dim(vector.len())?;
        let norm2 = dot(&vector, &vector);
        let unit = vector.iter().all(|x| x.is_finite()) && (norm2 - 1.0).abs() <= 1e-6;
        if !unit && !normalize(&mut vector) {
            return Err(Error::Config("cannot index a zero or non-finite vector".into()));
        }
        self.dim = Some(vector.len());
        self.rows.insert(key, vector);
        Ok(())
    }

    pub fn delete(&mut self, key: &K) -> Option<Vec<f32>> {
        let out = self.rows.remove(key);
        if self.rows.is_empty() {
            self.dim = None;
        }
        out
    }

    pub fn get(&self, key: &K) -> Option<&[f32]> {
        self.rows.get(key).map(Vec::as_slice)
    }

    pub fn contains(&self, key: &K) -> bool {
        self.rows.contains_key(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&K, &[f32])> {
        self.rows.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn keys(&self) -> impl Iterator<Item = &K> {
        self.rows.keys()
    }

    pub fn clear(&mut self) {
        self.rows.clear();
        self.dim = None;
    }

    /// The `k` rows most similar to `query`, best first; ties go to the
    /// smaller key.
    pub fn top_k(&self, query: &[f32], k: usize) -> Result<Vec<(K, f64)>> {
        self.top_k_filtered(query, k, |_| true)
    }

    /// Like [`top_k`](Self::top_k) over rows accepted by `keep`.
    pub fn top_k_filtered<F: Fn(&K) -> bool>(&self, query: &[f32], k: usize, keep: F) -> Result<Vec<(K, f64)>> {
        if self.rows.is_empty() || k == 0 {
            return Ok(Vec::new());
        }
        self.check_dim(query.len())?;
        let mut q = query.to_vec();
        if !normalize(&mut q) {
            return Ok(Vec::new());
        }
        let mut scored: Vec<(K, f64)> = self
            .rows
            .iter()
            .filter(|(key, _)| keep(key))
            .map(|(key, v)| (*key, dot(&q, v)))
            .collect();
        // Stable sort keeps key order among equal scores.
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(core::cmp::Ordering::Equal));
        scored.truncate(k);
        Ok(scored)
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        match self.dim {
            Some(expected) if expected != got => Err(Error::DimensionMismatch { expected, got }),
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn exact_top_k_with_tie_break() {
        let mut idx = EmbeddingIndex::<u64>::new();
        idx.upsert(3, vec![1.0, 0.0]).unwrap();
        idx.upsert(1, vec![1.0, 0.0]).unwrap();
        idx.upsert(2, vec![0.0, 1.0]).unwrap();
        let hits = idx.top_k(&[1.0, 0.0], 2).unwrap();
        assert_eq!(hits.iter().map(|h| h.0).collect::<Vec<_>>(), vec![1, 3]);
        assert!(matches!(idx.top_k(&[1.0, 0.0, 0.0], 1), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(idx.upsert(9, vec![1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn delete_and_reinsert() {
        let mut idx = EmbeddingIndex::<u64>::new();
        idx.upsert(1, vec![0.0, 2.0]).unwrap();
        assert_eq!(idx.get(&1).unwrap(), &[0.0, 1.0]);
        idx.delete(&1);
        assert!(idx.top_k(&[1.0, 0.0], 3).unwrap().is_empty());
        // dimension resets once empty
        idx.upsert(1, vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(idx.dim(), Some(3));
    }

    #[test]
    fn zero_vectors_rejected() {
        let mut v = vec![0.0f32, 0.0];
        assert!(!normalize(&mut v));
        let mut idx = EmbeddingIndex::<u64>::new();
        assert!(idx.upsert(1, v).is_err());
    }

    proptest! {
        #[test]
        fn top_k_matches_brute_force(
            rows in proptest::collection::vec(proptest::collection::vec(-1.0f32..1.0, 4), 1..40),
            q in proptest::collection::vec(-1.0f32..1.0, 4),
            k in 1usize..10,
        ) {
            let mut idx = EmbeddingIndex::<u64>::new();
            let mut kept = Vec::new();
            for (i, r) in rows.iter().enumerate() {
                if idx.upsert(i as u64, r.clone()).is_ok() {
                    kept.push((i as u64, r.clone()));
                }
            }
            prop_assume!(q.iter().any(|x| *x != 0.0));
            let hits = idx.top_k(&q, k).unwrap();
            let mut oracle: Vec<(u64, f64)> = kept.iter().map(|(i, r)| (*i, cosine(&q, r))).collect();
            oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            prop_assert_eq!(hits.len(), oracle.len().min(k));
            for (h, o) in hits.iter().zip(&oracle) {
                prop_assert!((h.1 - o.1).abs() < 1e-5);
            }
        }
    }
}
