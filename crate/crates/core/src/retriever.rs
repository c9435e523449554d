//! Exact k-nearest-neighbour demonstration retrieval by cosine similarity.
//!
//! Store vectors are unit length, so scoring is a dot product against the
//! normalized query. Ranking is score descending, then sample id ascending;
//! that total order makes results independent of scan order and thread count.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedder::{dot, EmbeddingStore, EmbeddingVector};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RetrievalError {
    #[error("dimension mismatch: query {query}, store {store}")]
    DimensionMismatch { query: usize, store: usize },
    #[error("zero vector")]
    ZeroVector,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("no candidates to retrieve from")]
    EmptyStore,
    #[error("sample '{0}' is not in the embedding store")]
    Missing(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub sample_id: String,
    pub score: f64,
}

/// Neighbours in rank order (most similar first).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RetrievalResult {
    pub neighbors: Vec<Neighbor>,
}

impl RetrievalResult {
    pub fn top(&self, k: usize) -> RetrievalResult {
        RetrievalResult { neighbors: self.neighbors.iter().take(k).cloned().collect() }
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.neighbors.iter().map(|n| n.sample_id.as_str())
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }
}

pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, RetrievalError> {
    if a.dim() != b.dim() {
        return Err(RetrievalError::DimensionMismatch { query: a.dim(), store: b.dim() });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(RetrievalError::ZeroVector);
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Rank order: higher score first, then lexicographically smaller id.
pub fn rank_order(a: &Neighbor, b: &Neighbor) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.sample_id.cmp(&b.sample_id))
}

/// Flat copy of the candidate vectors for fast scanning.
#[derive(Debug, Clone)]
pub struct Retriever {
    ids: Vec<String>,
    matrix: Vec<f32>,
    /// L2 norm of each row; stored vectors are unit only up to f32 rounding.
    norms: Vec<f64>,
    dimension: usize,
    parallel: bool,
}

impl Retriever {
    /// Indexes every entry of the store.
    pub fn new(store: &EmbeddingStore) -> Self {
        Self::from_entries(store.dimension(), store.iter())
    }

    /// Indexes only the given ids (e.g. the training split).
    pub fn with_ids<'a>(
        store: &EmbeddingStore,
        ids: impl IntoIterator<Item = &'a str>,
    ) -> Result<Self, RetrievalError> {
        let entries = ids
            .into_iter()
            .map(|id| store.get(id).map(|v| (id, v)).ok_or_else(|| RetrievalError::Missing(id.into())))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::from_entries(store.dimension(), entries))
    }

    fn from_entries<'a>(
        dimension: usize,
        entries: impl IntoIterator<Item = (&'a str, &'a EmbeddingVector)>,
    ) -> Self {
        let mut ids = Vec::new();
        let mut matrix = Vec::new();
        let mut norms = Vec::new();
        for (id, v) in entries {
            ids.push(id.to_string());
            matrix.extend_from_slice(v.values());
            norms.push(v.norm());
        }
        Self { ids, matrix, norms, dimension, parallel: false }
    }

    /// Score candidates in parallel chunks. Results are unchanged.
    pub fn parallel(mut self, parallel: bool) -> Self {
        self.parallel = parallel;
        self
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn retrieve(&self, query: &EmbeddingVector, k: usize) -> Result<RetrievalResult, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        if self.ids.is_empty() {
            return Err(RetrievalError::EmptyStore);
        }
        if query.dim() != self.dimension {
            return Err(RetrievalError::DimensionMismatch { query: query.dim(), store: self.dimension });
        }
        let norm = query.norm();
        if norm == 0.0 {
            return Err(RetrievalError::ZeroVector);
        }
        let q = query.values();
        let score = |(row, &row_norm): (&[f32], &f64)| {
            if row_norm == 0.0 {
                return 0.0;
            }
            (dot(q, row) / (norm * row_norm)).clamp(-1.0, 1.0)
        };
        let scores: Vec<f64> = if self.parallel {
            self.matrix.par_chunks(self.dimension).zip(self.norms.par_iter()).map(score).collect()
        } else {
            self.matrix.chunks(self.dimension).zip(&self.norms).map(score).collect()
        };

        let mut order: Vec<usize> = (0..self.ids.len()).collect();
        let cmp = |&a: &usize, &b: &usize| {
            scores[b].total_cmp(&scores[a]).then_with(|| self.ids[a].cmp(&self.ids[b]))
        };
        let k = k.min(order.len());
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, cmp);
            order.truncate(k);
        }
        order.sort_unstable_by(cmp);
        Ok(RetrievalResult {
            neighbors: order
                .into_iter()
                .map(|i| Neighbor { sample_id: self.ids[i].clone(), score: scores[i] })
                .collect(),
        })
    }
}

/// Top-`k` entries of the whole store.
pub fn retrieve(
    query: &EmbeddingVector,
    store: &EmbeddingStore,
    k: usize,
) -> Result<RetrievalResult, RetrievalError> {
    Retriever::new(store).retrieve(query, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(values: &[f32]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let unit = EmbeddingVector::normalized(vec![0.3, -0.2, 0.9]).unwrap();
        assert!((cosine(&unit, &unit).unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(cosine(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        // 4 / (sqrt5 * sqrt5)
        assert!((cosine(&v(&[1.0, 2.0]), &v(&[2.0, 1.0])).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine(&v(&[1.0, 0.0]), &v(&[1.0, 0.0, 0.0])),
            Err(RetrievalError::DimensionMismatch { .. })
        ));
        assert_eq!(cosine(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])), Err(RetrievalError::ZeroVector));
    }

    #[test]
    fn single_entry_store() {
        let mut store = EmbeddingStore::new("m", 2);
        store.insert("only", v(&[0.0, 1.0])).unwrap();
        let result = retrieve(&v(&[1.0, 0.0]), &store, 5).unwrap();
        assert_eq!(result.ids().collect::<Vec<_>>(), ["only"]);
    }

    #[test]
    fn ties_break_by_sample_id() {
        let mut store = EmbeddingStore::new("m", 2);
        store.insert("b", v(&[1.0, 0.0])).unwrap();
        store.insert("a", v(&[1.0, 0.0])).unwrap();
        store.insert("c", v(&[0.0, 1.0])).unwrap();
        let result = retrieve(&v(&[1.0, 0.0]), &store, 2).unwrap();
        assert_eq!(result.ids().collect::<Vec<_>>(), ["a", "b"]);
    }

    #[test]
    fn restricted_candidates() {
        let mut store = EmbeddingStore::new("m", 2);
        store.insert("train:0", v(&[1.0, 0.0])).unwrap();
        store.insert("test:0", v(&[1.0, 0.0])).unwrap();
        let retriever = Retriever::with_ids(&store, ["train:0"]).unwrap();
        let result = retriever.retrieve(store.get("test:0").unwrap(), 3).unwrap();
        assert_eq!(result.ids().collect::<Vec<_>>(), ["train:0"]);
        assert!(Retriever::with_ids(&store, ["missing"]).is_err());
    }

    #[test]
    fn argument_errors() {
        let mut store = EmbeddingStore::new("m", 2);
        assert_eq!(retrieve(&v(&[1.0, 0.0]), &store, 1), Err(RetrievalError::EmptyStore));
        store.insert("a", v(&[1.0, 0.0])).unwrap();
        assert_eq!(retrieve(&v(&[1.0, 0.0]), &store, 0), Err(RetrievalError::ZeroK));
        assert!(matches!(
            retrieve(&v(&[1.0, 0.0, 0.0]), &store, 1),
            Err(RetrievalError::DimensionMismatch { .. })
        ));
    }
}
