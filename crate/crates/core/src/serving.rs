//! Online serving: retrieval, coarse ranking, consistency-routed fine
//! scoring, the hypernym relevance cache and association augmentation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use crate::deep_search::{augment_pool, AssociationStore};
use crate::domain::{Directive, Prediction, Product, ProductId, Query, QueryId, RelevanceLabel, SourceStage, StandardsDoc, Tick};
use crate::error::{Error, Result};
use crate::model::{EmbeddingIndex, Model, QueryStructure};
use crate::par::ExecMode;
use crate::records;
use crate::rules;

/// One logged (query, product) scoring event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServingLog {
    pub window_id: u64,
    pub query_id: QueryId,
    pub product_id: ProductId,
    pub coarse_bin: RelevanceLabel,
    /// Absent when the fine head was not consulted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fine_bin: Option<RelevanceLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyStat {
    pub query_id: QueryId,
    pub support: usize,
    pub agreement: usize,
    pub c: f64,
    pub window_id: u64,
}

/// `c(q)` over distinct logged products with both bins in the window; the
/// first log of a product counts.
pub fn consistency_score(query_id: &str, logs: &[ServingLog], min_support: usize, window_id: u64) -> Option<ConsistencyStat> {
    let mut seen = BTreeSet::new();
    let mut support = 0;
    let mut agreement = 0;
    for l in logs.iter().filter(|l| l.window_id == window_id && l.query_id == query_id) {
        let Some(fine) = l.fine_bin else { continue };
        if !seen.insert(l.product_id.as_str()) {
            continue;
        }
        support += 1;
        agreement += usize::from(fine == l.coarse_bin);
    }
    if support == 0 || support < min_support {
        return None;
    }
    Some(ConsistencyStat { query_id: query_id.to_string(), support, agreement, c: agreement as f64 / support as f64, window_id })
}

pub fn consistency_stats(logs: &[ServingLog], min_support: usize, window_id: u64) -> BTreeMap<QueryId, ConsistencyStat> {
    let qids: BTreeSet<&str> = logs.iter().filter(|l| l.window_id == window_id).map(|l| l.query_id.as_str()).collect();
    qids.into_iter().filter_map(|q| consistency_score(q, logs, min_support, window_id).map(|s| (q.to_string(), s))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferencePath {
    CoarseOnly,
    Full,
}

pub fn route_inference(query_id: &str, stats: &BTreeMap<QueryId, ConsistencyStat>, tau: f64) -> InferencePath {
    match stats.get(query_id) {
        Some(s) if s.c >= tau => InferencePath::CoarseOnly,
        _ => InferencePath::Full,
    }
}

// ---- hypernym cache ----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CacheKey {
    pub category: Option<String>,
    pub brand: Option<String>,
    pub attributes: BTreeMap<String, String>,
    pub product_id: ProductId,
}

impl CacheKey {
    pub fn new(s: &QueryStructure, product_id: &str) -> Self {
        Self { category: s.category().map(str::to_string), brand: s.brand.clone(), attributes: s.attributes.clone(), product_id: product_id.to_string() }
    }

    /// Generalizations, most specific first: attribute subsets by
    /// decreasing size with the brand, then the same without it. The
    /// category is never dropped and the key itself is excluded.
    pub fn hypernyms(&self) -> Vec<CacheKey> {
        let attrs: Vec<(&String, &String)> = self.attributes.iter().collect();
        let n = attrs.len();
        let mut subsets: Vec<u32> = (0..(1u32 << n)).collect();
        subsets.sort_by_key(|m| (std::cmp::Reverse(m.count_ones()), *m));
        let mut out = Vec::new();
        let brands: Vec<Option<String>> = if self.brand.is_some() { vec![self.brand.clone(), None] } else { vec![None] };
        for brand in brands {
            for &m in &subsets {
                let key = CacheKey {
                    category: self.category.clone(),
                    brand: brand.clone(),
                    attributes: attrs.iter().enumerate().filter(|(i, _)| m & (1 << i) != 0).map(|(_, (k, v))| ((*k).clone(), (*v).clone())).collect(),
                    product_id: self.product_id.clone(),
                };
                if key != *self {
                    out.push(key);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub label: RelevanceLabel,
    pub checkpoint_version: u64,
    pub timestamp: Tick,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheRecord {
    key: CacheKey,
    entry: CacheEntry,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheHit {
    Exact,
    /// Zero inferred from a generalized key.
    HypernymZero,
}

/// Concurrent reads, serialized writes; last writer wins per key.
#[derive(Debug, Default)]
pub struct RelevanceCache {
    entries: RwLock<HashMap<CacheKey, CacheEntry>>,
    hits: AtomicUsize,
    inferred: AtomicUsize,
    lookups: AtomicUsize,
}

impl RelevanceCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&self, s: &QueryStructure, d: &Product, label: RelevanceLabel, checkpoint_version: u64, at: Tick) {
        if s.category().is_none() {
            return;
        }
        let e = CacheEntry { label, checkpoint_version, timestamp: at };
        self.entries.write().expect("cache lock").insert(CacheKey::new(s, &d.id), e);
    }

    /// Exact hit first; otherwise a zero on a generalized key is
    /// propagated when the product sits outside the key's category.
    /// Non-zero generalized entries never propagate.
    pub fn lookup(&self, s: &QueryStructure, d: &Product, checkpoint_version: u64) -> Option<(RelevanceLabel, CacheHit)> {
        self.lookups.fetch_add(1, Ordering::Relaxed);
        s.category()?;
        let key = CacheKey::new(s, &d.id);
        let map = self.entries.read().expect("cache lock");
        let live = |k: &CacheKey| map.get(k).filter(|e| e.checkpoint_version == checkpoint_version);
        if let Some(e) = live(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Some((e.label, CacheHit::Exact));
        }
        for h in key.hypernyms() {
            if let Some(e) = live(&h) {
                let outside = h.category.as_ref().map(|c| !d.category_path.contains(c)).unwrap_or(false);
                if e.label == RelevanceLabel::IRRELEVANT && outside {
                    self.inferred.fetch_add(1, Ordering::Relaxed);
                    return Some((RelevanceLabel::IRRELEVANT, CacheHit::HypernymZero));
                }
            }
        }
        None
    }

    /// (lookups, exact hits, inferred zeros)
    pub fn counters(&self) -> (usize, usize, usize) {
        (self.lookups.load(Ordering::Relaxed), self.hits.load(Ordering::Relaxed), self.inferred.load(Ordering::Relaxed))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map = self.entries.read().expect("cache lock");
        let mut recs: Vec<CacheRecord> = map.iter().map(|(k, e)| CacheRecord { key: k.clone(), entry: e.clone() }).collect();
        recs.sort_by(|a, b| a.key.cmp(&b.key));
        records::write_jsonl(path, &recs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let recs: Vec<CacheRecord> = records::read_jsonl_or_empty(path)?;
        let c = Self::new();
        {
            let mut map = c.entries.write().expect("cache lock");
            for r in recs {
                map.insert(r.key, r.entry);
            }
        }
        Ok(c)
    }
}

// ---- serving pipeline -----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServingConfig {
    pub retrieve_k: usize,
    pub fine_k: usize,
    pub tau: f64,
    pub min_support: usize,
    pub routing: bool,
    pub use_cache: bool,
    /// Fraction of downgraded queries still scored by the fine head for
    /// drift monitoring. Off by default.
    pub shadow_rate: f64,
}

impl Default for ServingConfig {
    fn default() -> Self {
        Self { retrieve_k: 50, fine_k: 20, tau: 0.95, min_support: 20, routing: false, use_cache: false, shadow_rate: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServedItem {
    pub product_id: ProductId,
    pub coarse_score: f64,
    pub coarse_bin: RelevanceLabel,
    pub prediction: Prediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServeResult {
    pub query_id: QueryId,
    pub path: InferencePath,
    pub items: Vec<ServedItem>,
    pub fine_calls: usize,
    pub logs: Vec<ServingLog>,
}

/// Product features as serving sees them.
pub trait ProductSource: Sync {
    fn product(&self, id: &str) -> Result<&Product>;
}

/// The world's serving-side catalog.
pub struct ServingView<'w>(pub &'w crate::world::World);

impl ProductSource for ServingView<'_> {
    fn product(&self, id: &str) -> Result<&Product> {
        self.0.serving_product(id)
    }
}

/// Read-only inputs of one request.
pub struct ServeContext<'a> {
    pub model: &'a Model,
    pub index: &'a EmbeddingIndex,
    pub products: &'a dyn ProductSource,
    pub standards: &'a StandardsDoc,
    pub directives: &'a [Directive],
    pub now: Tick,
    pub stats: &'a BTreeMap<QueryId, ConsistencyStat>,
    pub cache: Option<&'a RelevanceCache>,
    pub associations: Option<&'a AssociationStore>,
    pub window_id: u64,
    pub mode: ExecMode,
}

/// Counts fine-head invocations across requests.
#[derive(Debug, Default)]
pub struct FineCounter(AtomicUsize);

impl FineCounter {
    pub fn get(&self) -> usize {
        self.0.load(Ordering::Relaxed)
    }
}

pub fn serve(q: &Query, ctx: &ServeContext<'_>, cfg: &ServingConfig, counter: &FineCounter) -> Result<ServeResult> {
    if cfg.retrieve_k == 0 || cfg.fine_k == 0 {
        return Err(Error::InvalidK);
    }
    let retrieved = ctx.model.retrieve(q, ctx.index, cfg.retrieve_k, ctx.mode)?;
    let base: Vec<ProductId> = retrieved.hits.iter().map(|(id, _)| id.clone()).collect();
    let assoc = ctx.associations.and_then(|a| a.get(&q.text));
    let pool = match assoc {
        Some(rec) => augment_pool(&base, rec),
        None => base,
    };
    let assoc_ids: BTreeSet<&str> = assoc.map(|r| r.candidates.iter().map(|c| c.product_id.as_str()).collect()).unwrap_or_default();
    let products: Vec<&Product> = pool.iter().map(|id| ctx.products.product(id)).collect::<Result<_>>()?;
    let coarse = ctx.model.coarse_score(q, &products);
    let mut order: Vec<usize> = (0..products.len()).collect();
    order.sort_by(|&a, &b| coarse[b].total_cmp(&coarse[a]).then_with(|| products[a].id.cmp(&products[b].id)));
    // association candidates passed the strong-relevance gate; keep them
    let mut top: Vec<usize> = order.iter().copied().filter(|&i| assoc_ids.contains(products[i].id.as_str())).collect();
    for &i in &order {
        if top.len() >= cfg.fine_k.max(assoc_ids.len()) {
            break;
        }
        if !top.contains(&i) {
            top.push(i);
        }
    }
    let path = if cfg.routing { route_inference(&q.id, ctx.stats, cfg.tau) } else { InferencePath::Full };
    let shadow = path == InferencePath::CoarseOnly
        && cfg.shadow_rate > 0.0
        && crate::util::unit_draw(ctx.window_id, &["shadow", &q.id]) < cfg.shadow_rate;
    let s = ctx.model.structure(q);
    let mut items = Vec::with_capacity(top.len());
    let mut logs = Vec::with_capacity(top.len());
    let mut fine_calls = 0;
    for i in top {
        let d = products[i];
        let cbin = ctx.model.coarse_bin(coarse[i]);
        let mut fine_bin = None;
        let base = if assoc_ids.contains(d.id.as_str()) {
            Prediction::one_hot(RelevanceLabel::STRONG, 0.0, SourceStage::Cached)
        } else if let Some((l, _)) = ctx.cache.filter(|_| cfg.use_cache).and_then(|c| c.lookup(&s, d, ctx.model.version())) {
            Prediction::one_hot(l, 0.0, SourceStage::Cached)
        } else if path == InferencePath::Full || shadow {
            fine_calls += 1;
            counter.0.fetch_add(1, Ordering::Relaxed);
            let p = ctx.model.fine_base(q, d);
            fine_bin = Some(p.label);
            if let Some(c) = ctx.cache.filter(|_| cfg.use_cache) {
                c.insert(&s, d, p.label, ctx.model.version(), ctx.now);
            }
            if shadow {
                Prediction::one_hot(cbin, 0.0, SourceStage::Coarse)
            } else {
                p
            }
        } else {
            Prediction::one_hot(cbin, 0.0, SourceStage::Coarse)
        };
        let pred = rules::apply_directives(&base, ctx.directives, ctx.now, &s, d).prediction;
        logs.push(ServingLog { window_id: ctx.window_id, query_id: q.id.clone(), product_id: d.id.clone(), coarse_bin: cbin, fine_bin });
        items.push(ServedItem { product_id: d.id.clone(), coarse_score: coarse[i], coarse_bin: cbin, prediction: pred });
    }
    let _ = ctx.standards;
    Ok(ServeResult { query_id: q.id.clone(), path, items, fine_calls, logs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log(q: &str, p: &str, c: u8, f: u8) -> ServingLog {
        ServingLog {
            window_id: 1,
            query_id: q.into(),
            product_id: p.into(),
            coarse_bin: RelevanceLabel::new(c).unwrap(),
            fine_bin: Some(RelevanceLabel::new(f).unwrap()),
        }
    }

    #[test]
    fn consistency_counts() {
        let logs = vec![log("q", "a", 1, 1), log("q", "b", 2, 2), log("q", "c", 3, 3), log("q", "d", 0, 0)];
        assert_eq!(consistency_score("q", &logs, 1, 1).unwrap().c, 1.0);
        let logs = vec![log("q", "a", 1, 1), log("q", "b", 2, 2), log("q", "c", 3, 3), log("q", "d", 0, 2)];
        assert_eq!(consistency_score("q", &logs, 1, 1).unwrap().c, 0.75);
        assert!(consistency_score("q", &logs[..2], 20, 1).is_none());
    }

    #[test]
    fn routing_rule() {
        let mut stats = BTreeMap::new();
        stats.insert("a".to_string(), ConsistencyStat { query_id: "a".into(), support: 20, agreement: 20, c: 1.0, window_id: 1 });
        stats.insert("b".to_string(), ConsistencyStat { query_id: "b".into(), support: 20, agreement: 19, c: 0.95, window_id: 1 });
        assert_eq!(route_inference("a", &stats, 0.95), InferencePath::CoarseOnly);
        assert_eq!(route_inference("zzz", &stats, 0.95), InferencePath::Full);
        assert_eq!(route_inference("b", &stats, 1.0), InferencePath::Full);
        assert_eq!(route_inference("a", &stats, 1.0), InferencePath::CoarseOnly);
    }

    fn product(id: &str, dept: &str, leaf: &str) -> Product {
        Product { id: id.into(), title: String::new(), category_path: vec![dept.into(), leaf.into()], brand: None, attributes: BTreeMap::new(), visual_tags: vec![] }
    }

    fn structure(cat: &str, brand: Option<&str>, attrs: &[(&str, &str)]) -> QueryStructure {
        QueryStructure {
            category_intent: vec![cat.into()],
            brand: brand.map(Into::into),
            attributes: attrs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            corrected_text: None,
        }
    }

    #[test]
    fn hypernym_zero_only() {
        let c = RelevanceCache::new();
        let soccer = product("p9", "shoes", "soccer_shoes");
        let general = structure("basketball_shoes", Some("nike"), &[]);
        let specific = structure("basketball_shoes", Some("nike"), &[("style", "high-top")]);
        assert!(c.lookup(&specific, &soccer, 1).is_none());
        c.insert(&general, &soccer, RelevanceLabel::IRRELEVANT, 1, 0);
        assert_eq!(c.lookup(&specific, &soccer, 1), Some((RelevanceLabel::IRRELEVANT, CacheHit::HypernymZero)));
        assert!(c.lookup(&specific, &soccer, 2).is_none());
        let bball = product("p1", "shoes", "basketball_shoes");
        c.insert(&general, &bball, RelevanceLabel::STRONG, 1, 0);
        assert!(c.lookup(&specific, &bball, 1).is_none());
        assert_eq!(c.lookup(&general, &bball, 1), Some((RelevanceLabel::STRONG, CacheHit::Exact)));
    }

    #[test]
    fn hypernym_order() {
        let k = CacheKey::new(&structure("dresses", Some("zara"), &[("color", "red"), ("style", "sexy")]), "p");
        let hs = k.hypernyms();
        assert_eq!(hs.len(), 7);
        assert_eq!(hs[0].attributes.len(), 1);
        assert!(hs[0].brand.is_some());
        assert!(hs.last().unwrap().brand.is_none() && hs.last().unwrap().attributes.is_empty());
        assert!(hs.iter().all(|h| h.category.as_deref() == Some("dresses")));
    }

    #[test]
    fn concurrent_inserts_single_entry() {
        let c = RelevanceCache::new();
        let s = structure("dresses", None, &[]);
        let p = product("p", "clothing", "dresses");
        std::thread::scope(|sc| {
            for t in 0..8u8 {
                let (c, s, p) = (&c, &s, &p);
                sc.spawn(move || {
                    for _ in 0..100 {
                        c.insert(s, p, RelevanceLabel::saturating(t as i32 % 4), 1, 0);
                    }
                });
            }
        });
        assert_eq!(c.len(), 1);
        c.insert(&s, &p, RelevanceLabel::WEAK, 1, 0);
        assert_eq!(c.lookup(&s, &p, 1).unwrap().0, RelevanceLabel::WEAK);
    }
}
