//! Unified relevance model: shared encoder with retrieval, coarse and fine
//! heads, plus query understanding.

pub mod baseline;
pub mod checkpoint;
pub mod corpus;
pub mod features;
pub mod net;
pub mod query;
pub mod train;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use checkpoint::{ModelCheckpoint, TrainingMeta};
pub use net::{Dims, TaskWeights};
pub use query::QueryStructure;
pub use train::{train_multitask, LabeledPair, TrainConfig};

use crate::domain::{Directive, Prediction, Product, ProductId, Query, RelevanceLabel, SourceStage, StandardsDoc, Tick};
use crate::error::{Error, Result};
use crate::par::{self, ExecMode};
use crate::rules;
use features::{cross_feature_names, hash_all, product_feature_names, query_feature_names};
use query::{parse_query, WorldLexicons};

pub type EmbeddingVector = Vec<f64>;

/// Exhaustive cosine index over product embeddings of one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingIndex {
    pub checkpoint_version: u64,
    pub dim: usize,
    pub ids: Vec<ProductId>,
    pub vectors: Vec<f64>,
}

impl EmbeddingIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieved {
    pub hits: Vec<(ProductId, f64)>,
    /// Set when `k` exceeded the corpus and the full corpus was returned.
    pub truncated: bool,
}

/// Inference handle over one checkpoint. Read-only and shareable.
#[derive(Debug, Clone)]
pub struct Model {
    ckpt: Arc<ModelCheckpoint>,
    lex: WorldLexicons,
}

impl Model {
    pub fn new(ckpt: ModelCheckpoint, lex: WorldLexicons) -> Self {
        Self { ckpt: Arc::new(ckpt), lex }
    }

    pub fn version(&self) -> u64 {
        self.ckpt.version
    }

    pub fn checkpoint(&self) -> &ModelCheckpoint {
        &self.ckpt
    }

    pub fn lexicons(&self) -> &WorldLexicons {
        &self.lex
    }

    pub fn structure(&self, q: &Query) -> QueryStructure {
        q.structure.clone().unwrap_or_else(|| parse_query(&q.text, &self.lex))
    }

    fn dims(&self) -> &Dims {
        &self.ckpt.dims
    }

    fn qfeats(&self, q: &Query, s: &QueryStructure) -> Vec<usize> {
        hash_all(&query_feature_names(&q.text, &q.language, s), self.dims().vocab)
    }

    fn pfeats(&self, p: &Product) -> Vec<usize> {
        hash_all(&product_feature_names(p), self.dims().vocab)
    }

    pub fn encode_query(&self, q: &Query) -> EmbeddingVector {
        let s = self.structure(q);
        net::embed(&self.ckpt.params, self.dims(), &self.qfeats(q, &s))
    }

    pub fn encode_product(&self, p: &Product) -> EmbeddingVector {
        net::embed(&self.ckpt.params, self.dims(), &self.pfeats(p))
    }

    pub fn build_index(&self, products: &[Product], mode: ExecMode) -> EmbeddingIndex {
        let vecs = par::map(mode, products, |p| self.encode_product(p));
        EmbeddingIndex {
            checkpoint_version: self.version(),
            dim: self.dims().ret_dim,
            ids: products.iter().map(|p| p.id.clone()).collect(),
            vectors: vecs.into_iter().flatten().collect(),
        }
    }

    /// Top-k by cosine, ties broken by product id.
    pub fn retrieve(&self, q: &Query, index: &EmbeddingIndex, k: usize, mode: ExecMode) -> Result<Retrieved> {
        if index.checkpoint_version != self.version() {
            return Err(Error::BadCheckpoint(format!(
                "index built for checkpoint {} but model is {}",
                index.checkpoint_version,
                self.version()
            )));
        }
        let qv = self.encode_query(q);
        let scores = par::map_range(mode, index.len(), |i| net::dot(&qv, index.vector(i)));
        let mut order: Vec<usize> = (0..index.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| index.ids[a].cmp(&index.ids[b])));
        let truncated = k > index.len();
        order.truncate(k);
        Ok(Retrieved { hits: order.into_iter().map(|i| (index.ids[i].clone(), scores[i])).collect(), truncated })
    }

    pub fn coarse_score(&self, q: &Query, candidates: &[&Product]) -> Vec<f64> {
        let s = self.structure(q);
        let qf = self.qfeats(q, &s);
        let mut cache = net::TokCache::new(&self.ckpt.params, self.dims());
        candidates.iter().map(|p| net::coarse_forward(&mut cache, &qf, &self.pfeats(p)).0).collect()
    }

    pub fn coarse_bin(&self, score: f64) -> RelevanceLabel {
        RelevanceLabel::saturating(train::bin_of(score, &self.ckpt.coarse_thresholds) as i32)
    }

    /// Fine-head prediction before directives.
    pub fn fine_base(&self, q: &Query, d: &Product) -> Prediction {
        let s = self.structure(q);
        let p = &self.ckpt.params;
        let dims = self.dims();
        let hq = net::encode_hidden(p, dims, &self.qfeats(q, &s));
        let hp = net::encode_hidden(p, dims, &self.pfeats(d));
        let cross = hash_all(&cross_feature_names(&s, d), dims.cross_vocab);
        let f = net::fine_forward(p, dims, hq.as_ref(), hp.as_ref(), &cross);
        Prediction::from_scores(f.probs, SourceStage::Fine)
    }

    /// `f(q, d | S, I)`: base scoring followed by directive adjustment. The
    /// standards shape the model only through its training data.
    pub fn fine_score(&self, q: &Query, d: &Product, _standards: &StandardsDoc, directives: &[Directive], now: Tick) -> Prediction {
        let base = self.fine_base(q, d);
        rules::apply_directives(&base, directives, now, &self.structure(q), d).prediction
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_world, WorldConfig};

    #[test]
    fn checkpoint_roundtrip_and_retrieval_permutation() {
        let w = generate_world(&WorldConfig { n_products: 200, n_queries: 30, ..Default::default() }).unwrap();
        let pairs: Vec<LabeledPair> = w
            .initial_corpus
            .iter()
            .map(|s| LabeledPair {
                query: w.query(&s.query_id).unwrap().clone(),
                product: w.serving_product(&s.product_id).unwrap().clone(),
                label: s.label,
            })
            .collect();
        let cfg = TrainConfig { epochs: 2, ..Default::default() };
        let ck = train_multitask(&pairs, w.lexicons(), &cfg, 1).unwrap();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(ModelCheckpoint::from_bytes(&bytes).unwrap(), ck);
        let m = Model::new(ck, w.lexicons().clone());
        let idx = m.build_index(&w.serving_products, ExecMode::Sequential);
        let q = w.queries[0].query.clone();
        let all = m.retrieve(&q, &idx, idx.len() + 5, ExecMode::Sequential).unwrap();
        assert!(all.truncated);
        let mut ids: Vec<_> = all.hits.iter().map(|h| h.0.clone()).collect();
        ids.sort();
        let mut expect = idx.ids.clone();
        expect.sort();
        assert_eq!(ids, expect);
        let par = m.retrieve(&q, &idx, 10, ExecMode::Parallel).unwrap();
        assert_eq!(par.hits, all.hits[..10].to_vec());
    }
}
