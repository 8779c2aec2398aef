//! Deterministic multi-task training with Adam.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{ModelCheckpoint, TrainingMeta};
use super::features::{cross_feature_names, hash_all, product_feature_names, query_feature_names};
use super::net::{batch_objective, coarse_forward, Batch, Dims, Example, LossParts, Params, TaskWeights, TokCache};
use crate::domain::{Product, Query, RelevanceLabel};
use crate::error::{Error, Result};
use crate::model::query::{parse_query, WorldLexicons};
use crate::util::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate at epoch e is `lr / (1 + lr_decay * e)`.
    pub lr_decay: f64,
    pub weights: TaskWeights,
    pub dims: Dims,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { seed: 11, epochs: 8, batch_size: 32, lr: 0.01, lr_decay: 0.3, weights: TaskWeights::default(), dims: Dims::default() }
    }
}

/// A labeled (query, product) pair as the model sees it.
#[derive(Debug, Clone)]
pub struct LabeledPair {
    pub query: Query,
    pub product: Product,
    pub label: RelevanceLabel,
}

/// Turns pairs into hashed examples; query structure comes from query
/// understanding unless the query already carries one.
pub fn featurize(pairs: &[LabeledPair], lex: &WorldLexicons, dims: &Dims) -> Vec<Example> {
    let mut groups: BTreeMap<String, usize> = BTreeMap::new();
    let mut products: BTreeMap<String, usize> = BTreeMap::new();
    pairs
        .iter()
        .map(|lp| {
            let s = lp.query.structure.clone().unwrap_or_else(|| parse_query(&lp.query.text, lex));
            let ng = groups.len();
            let group = *groups.entry(lp.query.text.to_lowercase()).or_insert(ng);
            let np = products.len();
            let product = *products.entry(lp.product.id.clone()).or_insert(np);
            Example {
                q: hash_all(&query_feature_names(&lp.query.text, &lp.query.language, &s), dims.vocab),
                p: hash_all(&product_feature_names(&lp.product), dims.vocab),
                cross: hash_all(&cross_feature_names(&s, &lp.product), dims.cross_vocab),
                label: lp.label.index(),
                group,
                product,
            }
        })
        .collect()
}

struct Groups {
    /// group -> label -> example indices
    by_label: BTreeMap<usize, [Vec<usize>; 4]>,
}

impl Groups {
    fn new(ex: &[Example]) -> Self {
        let mut by_label: BTreeMap<usize, [Vec<usize>; 4]> = BTreeMap::new();
        for (i, e) in ex.iter().enumerate() {
            by_label.entry(e.group).or_default()[e.label].push(i);
        }
        Self { by_label }
    }

    fn has_contrast(&self) -> bool {
        self.by_label.values().any(|ls| ls.iter().filter(|v| !v.is_empty()).count() >= 2)
    }

    /// A partner with a different label; random when `rng` is given,
    /// otherwise the first one (for the fixed evaluation batching).
    fn partner<R: Rng>(&self, ex: &[Example], i: usize, rng: Option<&mut R>) -> Option<(usize, usize)> {
        let ls = &self.by_label[&ex[i].group];
        let others: Vec<usize> = (0..4).filter(|&l| l != ex[i].label && !ls[l].is_empty()).collect();
        if others.is_empty() {
            return None;
        }
        let j = match rng {
            Some(r) => {
                let l = others[r.gen_range(0..others.len())];
                ls[l][r.gen_range(0..ls[l].len())]
            }
            None => ls[others[0]][0],
        };
        Some(if ex[i].label > ex[j].label { (i, j) } else { (j, i) })
    }
}

fn make_batch<R: Rng>(ex: &[Example], groups: &Groups, idx: &[usize], rng: Option<&mut R>) -> Batch {
    let mut seen_g = std::collections::BTreeSet::new();
    let mut seen_p = std::collections::BTreeSet::new();
    let retrieval = idx
        .iter()
        .copied()
        .filter(|&i| ex[i].label == 3 && !ex[i].q.is_empty())
        .filter(|&i| seen_g.insert(ex[i].group) && seen_p.insert(ex[i].product))
        .collect();
    let coarse = match rng {
        Some(r) => idx.iter().filter_map(|&i| groups.partner(ex, i, Some(&mut *r))).collect(),
        None => idx.iter().filter_map(|&i| groups.partner::<R>(ex, i, None)).collect(),
    };
    Batch { fine: idx.to_vec(), retrieval, coarse }
}

/// Full-data loss under fixed batching.
pub fn dataset_loss(p: &Params, d: &Dims, ex: &[Example], w: &TaskWeights, batch_size: usize) -> LossParts {
    let groups = Groups::new(ex);
    let idx: Vec<usize> = (0..ex.len()).collect();
    let mut acc = LossParts::default();
    let mut n = 0.0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let b = make_batch::<rand_chacha::ChaCha8Rng>(ex, &groups, chunk, None);
        let l = batch_objective(p, d, ex, &b, w, None);
        let k = chunk.len() as f64;
        acc.retrieval += l.retrieval * k;
        acc.coarse += l.coarse * k;
        acc.fine += l.fine * k;
        acc.total += l.total * k;
        n += k;
    }
    LossParts { retrieval: acc.retrieval / n, coarse: acc.coarse / n, fine: acc.fine / n, total: acc.total / n }
}

fn validate(ex: &[Example], cfg: &TrainConfig) -> Result<()> {
    if ex.is_empty() {
        return Err(Error::DegenerateCorpus("empty corpus".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidConfig("epochs, batch_size and lr must be positive".into()));
    }
    let w = &cfg.weights;
    if [w.retrieval, w.coarse, w.fine].iter().any(|x| *x < 0.0 || !x.is_finite()) {
        return Err(Error::InvalidConfig("task weights must be finite and non-negative".into()));
    }
    let mut labels = [0usize; 4];
    for e in ex {
        labels[e.label] += 1;
    }
    if w.fine > 0.0 && labels.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::DegenerateCorpus("fine task needs at least two distinct labels".into()));
    }
    if w.retrieval > 0.0 && (labels[3] < 2 || labels[3] == ex.len()) {
        return Err(Error::DegenerateCorpus("retrieval task needs positives and negatives".into()));
    }
    if w.coarse > 0.0 && !Groups::new(ex).has_contrast() {
        return Err(Error::DegenerateCorpus("coarse task needs a query with two distinct labels".into()));
    }
    Ok(())
}

struct Adam {
    m: Params,
    v: Params,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn step(&mut self, p: &mut Params, g: &Params, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let gb = g.blocks();
        let mb = self.m.blocks_mut();
        let vb = self.v.blocks_mut();
        for (((_, pv), (_, gv)), ((_, mv), (_, vv))) in p.blocks_mut().into_iter().zip(gb).zip(mb.into_iter().zip(vb)) {
            for i in 0..pv.len() {
                let gi = gv[i];
                if gi == 0.0 && mv[i] == 0.0 && vv[i] == 0.0 {
                    continue;
                }
                mv[i] = Self::B1 * mv[i] + (1.0 - Self::B1) * gi;
                vv[i] = Self::B2 * vv[i] + (1.0 - Self::B2) * gi * gi;
                pv[i] -= lr * (mv[i] / c1) / ((vv[i] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Trains from scratch on already-featurized examples.
pub fn train_examples(ex: &[Example], cfg: &TrainConfig) -> Result<(Params, Vec<f64>)> {
    validate(ex, cfg)?;
    let d = &cfg.dims;
    let mut params = Params::init(d, cfg.seed);
    let mut grad = Params::zeros(d);
    let mut adam = Adam { m: Params::zeros(d), v: Params::zeros(d), t: 0 };
    let groups = Groups::new(ex);
    let mut rng = rng_for(cfg.seed, &["train-order"]);
    let mut curve = Vec::with_capacity(cfg.epochs + 1);
    curve.push(dataset_loss(&params, d, ex, &cfg.weights, cfg.batch_size).total);
    let mut order: Vec<usize> = (0..ex.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr / (1.0 + cfg.lr_decay * epoch as f64);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let b = make_batch(ex, &groups, chunk, Some(&mut rng));
            grad.fill_zero();
            batch_objective(&params, d, ex, &b, &cfg.weights, Some(&mut grad));
            adam.step(&mut params, &grad, lr);
        }
        curve.push(dataset_loss(&params, d, ex, &cfg.weights, cfg.batch_size).total);
    }
    if !params.all_finite() {
        return Err(Error::DegenerateCorpus("training diverged to non-finite parameters".into()));
    }
    Ok((params, curve))
}

/// Coarse-score thresholds mapping scores to label bins, fitted by
/// coordinate search to maximise agreement with the training labels.
pub fn fit_thresholds(scores: &[f64], labels: &[usize]) -> [f64; 3] {
    if scores.is_empty() {
        return [0.25, 0.5, 0.75];
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cands: Vec<f64> = (0..=64).map(|i| sorted[((sorted.len() - 1) * i) / 64]).collect();
    let agree = |t: &[f64; 3]| -> usize {
        scores.iter().zip(labels).filter(|(s, l)| bin_of(**s, t) == **l).count()
    };
    let mut t = [cands[16], cands[32], cands[48]];
    let mut best = agree(&t);
    for _ in 0..3 {
        for k in 0..3 {
            for &c in &cands {
                let mut tt = t;
                tt[k] = c;
                if tt[0] > tt[1] || tt[1] > tt[2] {
                    continue;
                }
                let a = agree(&tt);
                if a > best {
                    best = a;
                    t = tt;
                }
            }
        }
    }
    t
}

pub fn bin_of(score: f64, t: &[f64; 3]) -> usize {
    t.iter().filter(|&&x| score >= x).count()
}

pub fn train_multitask(pairs: &[LabeledPair], lex: &WorldLexicons, cfg: &TrainConfig, version: u64) -> Result<ModelCheckpoint> {
    let ex = featurize(pairs, lex, &cfg.dims);
    let (params, curve) = train_examples(&ex, cfg)?;
    let mut cache = TokCache::new(&params, &cfg.dims);
    let scores: Vec<f64> = ex.iter().map(|e| coarse_forward(&mut cache, &e.q, &e.p).0).collect();
    let labels: Vec<usize> = ex.iter().map(|e| e.label).collect();
    let thresholds = fit_thresholds(&scores, &labels);
    drop(cache);
    let mut digest_src = String::new();
    for lp in pairs {
        digest_src.push_str(&format!("{}\t{}\t{}\n", lp.query.text, lp.product.id, lp.label.value()));
    }
    Ok(ModelCheckpoint {
        version,
        dims: cfg.dims,
        params,
        coarse_thresholds: thresholds,
        meta: TrainingMeta {
            corpus_version: crate::util::sha256_hex(digest_src.as_bytes()),
            corpus_size: pairs.len(),
            loss_curve: curve,
            seed: cfg.seed,
            config: cfg.clone(),
        },
    })
}

/// Max relative error between analytic and central-difference gradients
/// over `n` randomly chosen parameters with non-negligible gradient.
pub fn gradient_check(p: &Params, d: &Dims, ex: &[Example], batch: &Batch, w: &TaskWeights, n: usize, seed: u64) -> f64 {
    let mut g = Params::zeros(d);
    batch_objective(p, d, ex, batch, w, Some(&mut g));
    let mut cands = Vec::new();
    for (bi, (_, b)) in g.blocks().iter().enumerate() {
        for (i, v) in b.iter().enumerate() {
            if v.abs() > 1e-6 {
                cands.push((bi, i));
            }
        }
    }
    let mut rng = rng_for(seed, &["grad-check"]);
    cands.shuffle(&mut rng);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for &(bi, i) in cands.iter().take(n) {
        let an = g.get(bi, i);
        let mut pp = p.clone();
        pp.set(bi, i, p.get(bi, i) + h);
        let lp = batch_objective(&pp, d, ex, batch, w, None).total;
        pp.set(bi, i, p.get(bi, i) - h);
        let lm = batch_objective(&pp, d, ex, batch, w, None).total;
        let fd = (lp - lm) / (2.0 * h);
        worst = worst.max((an - fd).abs() / an.abs().max(fd.abs()));
    }
    worst
}

/// The batch used for gradient checks: first `size` examples with their
/// deterministic coarse partners.
pub fn fixed_batch(ex: &[Example], size: usize) -> Batch {
    let groups = Groups::new(ex);
    let idx: Vec<usize> = (0..ex.len().min(size)).collect();
    make_batch::<rand_chacha::ChaCha8Rng>(ex, &groups, &idx, None)
}
