//! The embedded knowledge base and softmax-over-cosine evidence retrieval.

use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{Backend, BackendError, SyntheticEmbedder};
use crate::dataset::{read_jsonl, write_jsonl, DatasetError};
use crate::math::{cosine, softmax_with_temperature, EmbeddingVector};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("duplicate knowledge id `{0}`")]
    DuplicateId(String),
    #[error("knowledge base is empty")]
    EmptyCorpus,
    #[error("knowledge item `{id}` has empty text")]
    EmptyText { id: String },
    #[error("embedding dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("retrieval temperature must be positive, got {0}")]
    InvalidAlpha(f64),
    #[error("invalid embedding for `{id}`: {message}")]
    InvalidEmbedding { id: String, message: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Io(#[from] DatasetError),
}

/// Anything that turns text into unit-norm vectors of a fixed dimension.
pub trait Embedder {
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, BackendError>;
    fn embedding_dim(&self) -> Result<usize, BackendError>;
}

impl<T: Backend + ?Sized> Embedder for T {
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        self.embed(text)
    }

    fn embedding_dim(&self) -> Result<usize, BackendError> {
        self.dim()
    }
}

impl Embedder for SyntheticEmbedder {
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        self.embed(text)
    }

    fn embedding_dim(&self) -> Result<usize, BackendError> {
        Ok(self.dim())
    }
}

/// One line of a knowledge-base JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawKnowledgeItem {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeItem {
    pub id: String,
    pub text: String,
    pub embedding: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub item: Arc<KnowledgeItem>,
    /// Position of the item in the base.
    pub index: usize,
    pub similarity: f64,
    pub probability: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    /// Evidence items per viewpoint.
    pub m: usize,
    /// Softmax temperature over cosine similarities.
    pub alpha: f64,
    /// Draw evidence from the retrieval distribution instead of taking the top `m`.
    pub sampling: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            m: 5,
            alpha: 1.5,
            sampling: false,
        }
    }
}

/// Immutable embedded corpus. Cloning shares the items.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    items: Arc<[Arc<KnowledgeItem>]>,
    dim: usize,
    alpha: f64,
    m: usize,
}

impl KnowledgeBase {
    /// Embeds items lacking a vector and normalizes the rest.
    pub fn build(
        raw_items: Vec<RawKnowledgeItem>,
        embedder: &(impl Embedder + ?Sized),
        alpha: f64,
        m: usize,
    ) -> Result<Self, RetrievalError> {
        if raw_items.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(RetrievalError::InvalidAlpha(alpha));
        }
        let dim = embedder.embedding_dim()?;
        let mut seen = HashSet::new();
        let mut items = Vec::with_capacity(raw_items.len());
        for raw in raw_items {
            if !seen.insert(raw.id.clone()) {
                return Err(RetrievalError::DuplicateId(raw.id));
            }
            if raw.text.trim().is_empty() {
                return Err(RetrievalError::EmptyText { id: raw.id });
            }
            let embedding = match raw.embedding {
                Some(v) => {
                    if v.len() != dim {
                        return Err(RetrievalError::DimensionMismatch {
                            expected: dim,
                            actual: v.len(),
                        });
                    }
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    // already-normalized vectors are kept verbatim so saved bases reload bit-exact
                    let e = if (norm - 1.0).abs() < 1e-12 {
                        EmbeddingVector::new(v)
                    } else {
                        EmbeddingVector::normalized(v)
                    };
                    e.map_err(|e| RetrievalError::InvalidEmbedding {
                        id: raw.id.clone(),
                        message: e.to_string(),
                    })?
                }
                None => {
                    let e = embedder.embed_text(&raw.text)?;
                    if e.dim() != dim {
                        return Err(RetrievalError::DimensionMismatch {
                            expected: dim,
                            actual: e.dim(),
                        });
                    }
                    e
                }
            };
            items.push(Arc::new(KnowledgeItem {
                id: raw.id,
                text: raw.text,
                embedding,
            }));
        }
        Ok(Self {
            items: items.into(),
            dim,
            alpha,
            m: m.max(1),
        })
    }

    pub fn load(path: &Path, embedder: &(impl Embedder + ?Sized), alpha: f64, m: usize) -> Result<Self, RetrievalError> {
        Self::build(read_jsonl(path)?, embedder, alpha, m)
    }

    /// Writes every item with its embedding so a later load skips embedding.
    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let rows: Vec<RawKnowledgeItem> = self
            .items
            .iter()
            .map(|i| RawKnowledgeItem {
                id: i.id.clone(),
                text: i.text.clone(),
                embedding: Some(i.embedding.values().to_vec()),
            })
            .collect();
        write_jsonl(path, &rows)?;
        Ok(())
    }

    pub fn items(&self) -> &[Arc<KnowledgeItem>] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn m(&self) -> usize {
        self.m
    }

    fn similarities(&self, query: &EmbeddingVector) -> Result<Vec<f64>, RetrievalError> {
        if query.dim() != self.dim {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dim,
                actual: query.dim(),
            });
        }
        Ok(self
            .items
            .iter()
            .map(|i| cosine(query.values(), i.embedding.values()))
            .collect())
    }

    /// `P(e | v)` for every item, in base order.
    pub fn retrieval_distribution(&self, query: &EmbeddingVector) -> Result<Vec<f64>, RetrievalError> {
        Ok(softmax_with_temperature(&self.similarities(query)?, self.alpha))
    }

    fn result(&self, index: usize, sims: &[f64], probs: &[f64]) -> RetrievalResult {
        RetrievalResult {
            item: Arc::clone(&self.items[index]),
            index,
            similarity: sims[index],
            probability: probs[index],
        }
    }

    /// The `min(m, len)` most probable items; ties go to the earlier item.
    pub fn retrieve_top_m(&self, query: &EmbeddingVector) -> Result<Vec<RetrievalResult>, RetrievalError> {
        let sims = self.similarities(query)?;
        let probs = softmax_with_temperature(&sims, self.alpha);
        let mut order: Vec<usize> = (0..self.len()).collect();
        // stable sort keeps insertion order among equal probabilities
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
        Ok(order
            .into_iter()
            .take(self.m)
            .map(|i| self.result(i, &sims, &probs))
            .collect())
    }

    /// Draws `min(m, len)` distinct items with probability proportional to
    /// `P(e | v)`, returned in descending probability.
    pub fn retrieve_sampled(
        &self,
        query: &EmbeddingVector,
        rng: &mut impl Rng,
    ) -> Result<Vec<RetrievalResult>, RetrievalError> {
        let sims = self.similarities(query)?;
        let probs = softmax_with_temperature(&sims, self.alpha);
        let mut weights = probs.clone();
        let mut picked = Vec::with_capacity(self.m.min(self.len()));
        for _ in 0..self.m.min(self.len()) {
            let total: f64 = weights.iter().sum();
            let mut u = rng.random::<f64>() * total;
            let mut choice = None;
            for (i, w) in weights.iter().enumerate() {
                if *w == 0.0 {
                    continue;
                }
                choice = Some(i);
                if u < *w {
                    break;
                }
                u -= w;
            }
            let Some(i) = choice else { break };
            weights[i] = 0.0;
            picked.push(i);
        }
        picked.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        Ok(picked.into_iter().map(|i| self.result(i, &sims, &probs)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(id: &str, v: Option<Vec<f64>>) -> RawKnowledgeItem {
        RawKnowledgeItem {
            id: id.into(),
            text: format!("text {id}"),
            embedding: v,
        }
    }

    fn embedder() -> SyntheticEmbedder {
        SyntheticEmbedder::new(64, 3, 0.0)
    }

    #[test]
    fn builds_unit_norm_items() {
        let kb = KnowledgeBase::build(vec![raw("a", None), raw("b", None), raw("c", None)], &embedder(), 1.5, 5).unwrap();
        assert_eq!(kb.len(), 3);
        for i in kb.items() {
            assert!((i.embedding.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_corpora() {
        let e = embedder();
        assert!(matches!(
            KnowledgeBase::build(vec![raw("e1", None), raw("e1", None)], &e, 1.5, 5),
            Err(RetrievalError::DuplicateId(id)) if id == "e1"
        ));
        assert!(matches!(KnowledgeBase::build(vec![], &e, 1.5, 5), Err(RetrievalError::EmptyCorpus)));
        assert!(matches!(
            KnowledgeBase::build(vec![raw("x", Some(vec![1.0; 32]))], &e, 1.5, 5),
            Err(RetrievalError::DimensionMismatch { expected: 64, actual: 32 })
        ));
    }

    fn unit(i: usize, d: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn two_item_distribution() {
        let kb = KnowledgeBase::build(vec![raw("a", Some(unit(0, 64))), raw("b", Some(unit(1, 64)))], &embedder(), 1.5, 5).unwrap();
        let q = EmbeddingVector::new(unit(0, 64)).unwrap();
        let p = kb.retrieval_distribution(&q).unwrap();
        let e = 1.5f64.exp();
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn top_m_ties_keep_insertion_order() {
        let mut v = vec![0.0; 64];
        v[0] = 1.0;
        v[1] = 1.0;
        let kb = KnowledgeBase::build(
            vec![raw("z", Some(unit(2, 64))), raw("first", Some(unit(0, 64))), raw("second", Some(unit(1, 64)))],
            &embedder(),
            1.5,
            2,
        )
        .unwrap();
        let top = kb.retrieve_top_m(&EmbeddingVector::normalized(v).unwrap()).unwrap();
        let ids: Vec<&str> = top.iter().map(|r| r.item.id.as_str()).collect();
        assert_eq!(ids, ["first", "second"]);
    }

    #[test]
    fn sampling_returns_distinct_items() {
        let items = (0..8).map(|i| raw(&format!("k{i}"), Some(unit(i, 64)))).collect();
        let kb = KnowledgeBase::build(items, &embedder(), 1.5, 5).unwrap();
        let q = EmbeddingVector::new(unit(3, 64)).unwrap();
        let mut rng = crate::seed::rng(4);
        let got = kb.retrieve_sampled(&q, &mut rng).unwrap();
        assert_eq!(got.len(), 5);
        let ids: HashSet<_> = got.iter().map(|r| r.index).collect();
        assert_eq!(ids.len(), 5);
        assert!(got.windows(2).all(|w| w[0].probability >= w[1].probability));
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("kb.jsonl");
        let e = embedder();
        let kb = KnowledgeBase::build(vec![raw("a", None), raw("b", None)], &e, 1.5, 5).unwrap();
        kb.save(&p).unwrap();
        let back = KnowledgeBase::load(&p, &e, 1.5, 5).unwrap();
        assert_eq!(back.items(), kb.items());
    }
}
