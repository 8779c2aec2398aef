//! Deep search: a budgeted plan/act loop over the search tools whose output
//! is materialized as gated query-to-product associations.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{Product, ProductId, Query, RelevanceLabel};
use crate::error::Result;
use crate::memory::MemoryStore;
use crate::model::query::{parse_query, WorldLexicons};
use crate::records;
use crate::world::tools::{ToolCall, ToolName, ToolResult, Tools};

pub fn reliability(tool: ToolName) -> f64 {
    match tool {
        ToolName::EcomSearch => 0.9,
        ToolName::ImageSearch => 0.7,
        ToolName::WebSearch => 0.5,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub step: usize,
    pub call: ToolCall,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<ToolResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Tool path that led to this call.
    pub path: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchState {
    pub intent_hypotheses: Vec<String>,
    pub attempted_rewrites: BTreeSet<String>,
    pub evidence: Vec<Evidence>,
    pub candidate_confidence: BTreeMap<ProductId, f64>,
    /// Tool path behind each candidate's best confidence.
    pub candidate_path: BTreeMap<ProductId, Vec<String>>,
    pub step: usize,
}

impl SearchState {
    /// Confidence of the k-th best candidate, 0 when fewer exist.
    pub fn kth_confidence(&self, k: usize) -> f64 {
        let mut c: Vec<f64> = self.candidate_confidence.values().copied().collect();
        c.sort_by(|a, b| b.total_cmp(a));
        if k == 0 {
            return 1.0;
        }
        c.get(k - 1).copied().unwrap_or(0.0)
    }

    fn absorb(&mut self, tool: ToolName, result: &ToolResult, path: &[String]) {
        for h in &result.hits {
            let Some(pid) = &h.product_id else { continue };
            let conf = (reliability(tool) * h.score).clamp(0.0, 1.0);
            let cur = self.candidate_confidence.get(pid).copied().unwrap_or(-1.0);
            if conf > cur {
                self.candidate_confidence.insert(pid.clone(), conf);
                self.candidate_path.insert(pid.clone(), path.to_vec());
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationCandidate {
    pub product_id: ProductId,
    pub weight: f64,
    pub meta: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationRecord {
    pub query_id: String,
    pub query_text: String,
    pub candidates: Vec<AssociationCandidate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeepSearchConfig {
    pub budget: usize,
    pub confidence_threshold: f64,
    pub top_k: usize,
}

impl Default for DeepSearchConfig {
    fn default() -> Self {
        Self { budget: 6, confidence_threshold: 0.9, top_k: 5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Action {
    Call(ToolCall, Vec<String>),
    Stop,
}

/// Scripted planner: rewrite and search the catalog, fall back to the web
/// when confidence is low, then follow every image reference found.
pub trait SearchPolicy {
    fn next(&self, q: &Query, state: &SearchState, cfg: &DeepSearchConfig) -> Option<(ToolCall, Vec<String>)>;
}

pub struct ScriptedPlanner {
    pub lex: WorldLexicons,
}

impl SearchPolicy for ScriptedPlanner {
    fn next(&self, q: &Query, state: &SearchState, cfg: &DeepSearchConfig) -> Option<(ToolCall, Vec<String>)> {
        let called = |tool: ToolName, arg: &str| state.evidence.iter().any(|e| e.call.tool == tool.as_str() && e.call.argument == arg);
        let rewrite = parse_query(&q.text, &self.lex).corrected_text.unwrap_or_else(|| q.text.trim().to_lowercase());
        if !called(ToolName::EcomSearch, &rewrite) {
            let path = vec![format!("ecom_search:{rewrite}")];
            return Some((ToolCall::new(ToolName::EcomSearch, rewrite, 20), path));
        }
        if state.kth_confidence(cfg.top_k) >= cfg.confidence_threshold {
            return None;
        }
        let text = q.text.trim().to_lowercase();
        if !called(ToolName::WebSearch, &text) {
            let path = vec![format!("web_search:{text}")];
            return Some((ToolCall::new(ToolName::WebSearch, text, 5), path));
        }
        for e in &state.evidence {
            if e.call.tool != ToolName::WebSearch.as_str() {
                continue;
            }
            let Some(r) = &e.result else { continue };
            for h in &r.hits {
                if let Some(img) = &h.image_ref {
                    if !called(ToolName::ImageSearch, img) {
                        let mut path = e.path.clone();
                        path.push(format!("image_search:{img}"));
                        return Some((ToolCall::new(ToolName::ImageSearch, img.clone(), 20), path));
                    }
                }
            }
        }
        None
    }
}

/// Runs the loop until the budget is spent, the top-k confidences clear the
/// threshold, or the policy has nothing left to try. Tool failures are
/// recorded as evidence and the loop continues.
pub fn deep_search(q: &Query, policy: &dyn SearchPolicy, tools: &dyn Tools, cfg: &DeepSearchConfig) -> (SearchState, AssociationRecord) {
    let mut state = SearchState { intent_hypotheses: vec![q.text.trim().to_lowercase()], ..Default::default() };
    while state.step < cfg.budget {
        if state.step > 0 && state.kth_confidence(cfg.top_k) >= cfg.confidence_threshold {
            break;
        }
        let action = match policy.next(q, &state, cfg) {
            Some((call, path)) => Action::Call(call, path),
            None => Action::Stop,
        };
        let Action::Call(call, path) = action else { break };
        state.step += 1;
        if call.tool == ToolName::EcomSearch.as_str() {
            state.attempted_rewrites.insert(call.argument.clone());
        }
        match (ToolName::parse(&call.tool), tools.call(&call)) {
            (Ok(tool), Ok(result)) => {
                if tool == ToolName::WebSearch {
                    for h in &result.hits {
                        if let Some(c) = &h.category {
                            state.intent_hypotheses.push(format!("{} -> {c}", h.entity.clone().unwrap_or_default()));
                        }
                    }
                }
                state.absorb(tool, &result, &path);
                state.evidence.push(Evidence { step: state.step, call, result: Some(result), error: None, path });
            }
            (_, Err(e)) | (Err(e), _) => {
                state.evidence.push(Evidence { step: state.step, call, result: None, error: Some(e.to_string()), path });
            }
        }
    }
    let mut cands: Vec<AssociationCandidate> = state
        .candidate_confidence
        .iter()
        .map(|(pid, w)| AssociationCandidate { product_id: pid.clone(), weight: *w, meta: state.candidate_path[pid].clone() })
        .collect();
    cands.sort_by(|a, b| b.weight.total_cmp(&a.weight).then_with(|| a.product_id.cmp(&b.product_id)));
    cands.truncate(cfg.top_k);
    let record = AssociationRecord { query_id: q.id.clone(), query_text: q.text.trim().to_lowercase(), candidates: cands };
    (state, record)
}

/// `C_base ∪ {d_i}` keeping base order, then association order.
pub fn augment_pool(base: &[ProductId], record: &AssociationRecord) -> Vec<ProductId> {
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    let mut out = Vec::with_capacity(base.len() + record.candidates.len());
    for id in base.iter().chain(record.candidates.iter().map(|c| &c.product_id)) {
        if seen.insert(id.as_str()) {
            out.push(id.clone());
        }
    }
    out
}

/// Keeps strongly relevant candidates. A memory precedent settles a
/// candidate without calling the annotator.
pub fn gate_associations(
    record: &AssociationRecord,
    memory: Option<&MemoryStore>,
    annotate: &mut dyn FnMut(&str) -> Result<RelevanceLabel>,
) -> Result<AssociationRecord> {
    let mut kept = Vec::new();
    for c in &record.candidates {
        let label = match memory.and_then(|m| m.precedent_for(&record.query_text, &c.product_id)) {
            Some((_, l)) => l,
            None => annotate(&c.product_id)?,
        };
        if label == RelevanceLabel::STRONG {
            kept.push(c.clone());
        }
    }
    Ok(AssociationRecord { candidates: kept, ..record.clone() })
}

/// Precomputed associations keyed by normalized query text.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AssociationStore {
    pub records: BTreeMap<String, AssociationRecord>,
}

impl AssociationStore {
    pub fn get(&self, query_text: &str) -> Option<&AssociationRecord> {
        self.records.get(&query_text.trim().to_lowercase())
    }

    pub fn insert(&mut self, r: AssociationRecord) {
        self.records.insert(r.query_text.clone(), r);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        records::write_jsonl(path, self.records.values())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let recs: Vec<AssociationRecord> = records::read_jsonl_or_empty(path)?;
        Ok(Self { records: recs.into_iter().map(|r| (r.query_text.clone(), r)).collect() })
    }
}

/// Products referenced by a record, resolved through `lookup`.
pub fn resolve<'a>(record: &AssociationRecord, lookup: &dyn Fn(&str) -> Result<&'a Product>) -> Result<Vec<&'a Product>> {
    record.candidates.iter().map(|c| lookup(&c.product_id)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_world, WorldConfig};

    fn world() -> crate::world::World {
        generate_world(&WorldConfig { n_products: 300, n_queries: 40, ..Default::default() }).unwrap()
    }

    #[test]
    fn zero_budget() {
        let w = world();
        let planner = ScriptedPlanner { lex: w.lexicons().clone() };
        let q = Query::new("x", "lorax costume", "en").unwrap();
        let (s, r) = deep_search(&q, &planner, &w, &DeepSearchConfig { budget: 0, ..Default::default() });
        assert_eq!(s.step, 0);
        assert!(r.candidates.is_empty());
    }

    #[test]
    fn lorax_chain() {
        let w = world();
        let planner = ScriptedPlanner { lex: w.lexicons().clone() };
        let q = Query::new("x", "lorax costume", "en").unwrap();
        let (s, r) = deep_search(&q, &planner, &w, &DeepSearchConfig::default());
        assert!(s.step <= 6);
        let top = &r.candidates[0];
        assert_eq!(top.meta.len(), 2, "{:?}", r);
        assert!(top.meta[0].starts_with("web_search:") && top.meta[1].starts_with("image_search:"));
        let p = w.product(&top.product_id).unwrap();
        assert_eq!(p.attributes.get("color").map(String::as_str), Some("orange"));
    }

    #[test]
    fn pool_union() {
        let base: Vec<String> = (0..10).map(|i| format!("b{i}")).collect();
        let rec = AssociationRecord {
            query_id: "q".into(),
            query_text: "q".into(),
            candidates: (0..5).map(|i| AssociationCandidate { product_id: format!("a{i}"), weight: 1.0, meta: vec![] }).collect(),
        };
        assert_eq!(augment_pool(&base, &rec).len(), 15);
        let empty = AssociationRecord { candidates: vec![], ..rec.clone() };
        assert_eq!(augment_pool(&base, &empty), base);
    }

    #[test]
    fn gating_keeps_strong_in_order() {
        let rec = AssociationRecord {
            query_id: "q".into(),
            query_text: "q".into(),
            candidates: ["a", "b", "c"].iter().map(|p| AssociationCandidate { product_id: p.to_string(), weight: 1.0, meta: vec![] }).collect(),
        };
        let labels: BTreeMap<&str, u8> = [("a", 3), ("b", 2), ("c", 3)].into_iter().collect();
        let out = gate_associations(&rec, None, &mut |p| RelevanceLabel::new(labels[p])).unwrap();
        let ids: Vec<_> = out.candidates.iter().map(|c| c.product_id.as_str()).collect();
        assert_eq!(ids, ["a", "c"]);
        let out = gate_associations(&rec, None, &mut |_| Ok(RelevanceLabel::RELEVANT)).unwrap();
        assert!(out.candidates.is_empty());
    }
}
