//! Standard-grounded annotation: query grounding, candidate sampling from a
//! pluggable judge, reward-model scoring and label selection.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Directive, Prediction, Product, Query, RelevanceLabel, SourceStage, StandardsDoc, Tick};
use crate::error::{Error, Result};
use crate::memory::MemoryStore;
use crate::model::query::{parse_query, tokenize, WorldLexicons};
use crate::model::QueryStructure;
use crate::rules;
use crate::util::{rng_for, sigmoid, softplus};
use crate::world::oracle::{self, pair_facts, PairFacts, Relation};
use crate::world::tools::{ToolCall, ToolName, Tools};
use crate::world::{Split, World};

/// Memory precedents at or above this authority override the selected label.
pub const PRECEDENT_AUTHORITY: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Citation {
    pub tool: String,
    pub entity: String,
    pub snippet: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySummary {
    pub query_id: String,
    pub summary_text: String,
    pub evidence: Vec<Citation>,
    /// Structured reading after grounding; entity knowledge wins over the
    /// lexical parse.
    pub structure: QueryStructure,
    #[serde(default)]
    pub degraded: bool,
}

/// Web evidence summarized by concatenating ranked facts.
pub fn ground_query(q: &Query, tools: &dyn Tools, lex: &WorldLexicons) -> QuerySummary {
    let parsed = parse_query(&q.text, lex).normalized();
    let result = tools.call(&ToolCall::new(ToolName::WebSearch, q.text.clone(), 5));
    let (hits, degraded) = match result {
        Ok(r) => (r.hits, false),
        Err(_) => (Vec::new(), true),
    };
    let mut structure = parsed;
    let mut evidence = Vec::new();
    let mut facts = Vec::new();
    for h in &hits {
        let Some(entity) = &h.entity else { continue };
        if evidence.is_empty() {
            if let Some(c) = &h.category {
                structure = QueryStructure { category_intent: vec![c.clone()], brand: None, attributes: h.attributes.clone(), corrected_text: None };
            }
        }
        facts.push(h.snippet.clone());
        evidence.push(Citation { tool: ToolName::WebSearch.as_str().into(), entity: entity.clone(), snippet: h.snippet.clone() });
    }
    let summary_text = if facts.is_empty() { q.text.clone() } else { format!("{}: {}", q.text, facts.join(" ")) };
    QuerySummary { query_id: q.id.clone(), summary_text, evidence, structure, degraded: degraded || hits.is_empty() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateJudgment {
    pub label: RelevanceLabel,
    pub rationale: String,
    pub sample_index: usize,
}

/// Everything a judge may look at. `standards` and `directives` are
/// deliberately part of the request: this is the standard-aware side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub query_id: String,
    pub query_text: String,
    pub summary: String,
    pub structure: QueryStructure,
    pub product: Product,
    pub standards: StandardsDoc,
    pub directives: Vec<Directive>,
    pub now: Tick,
}

impl JudgeRequest {
    /// Flat prompt for text backends.
    pub fn prompt(&self) -> String {
        let clauses: Vec<String> = self.standards.clauses.iter().map(|c| format!("{}: {}", c.clause_id, c.text)).collect();
        let directives: Vec<String> = self.directives.iter().filter(|d| d.is_active(self.now)).map(|d| d.rule.human_text.clone()).collect();
        format!(
            "Standards v{}:\n{}\nDirectives:\n{}\nQuery: {}\nQuery summary: {}\nProduct: {} (category {}, brand {})\nAnswer with a label 0-3 and a rationale.",
            self.standards.version,
            clauses.join("\n"),
            directives.join("\n"),
            self.query_text,
            self.summary,
            self.product.title,
            self.product.category_path.join(" > "),
            self.product.brand.as_deref().unwrap_or("unknown"),
        )
    }
}

pub trait JudgePolicy: Send + Sync {
    fn judge(&self, req: &JudgeRequest, sample_index: usize) -> Result<CandidateJudgment>;
}

/// Label under the given standards after directives; the decisive clause id
/// comes along for rationales.
pub fn standard_view(req: &JudgeRequest) -> (RelevanceLabel, String) {
    let (label, tag) = oracle::standard_label(&req.standards, &req.structure, &req.product);
    let base = Prediction::one_hot(label, 0.0, SourceStage::Fine);
    let out = rules::apply_directives(&base, &req.directives, req.now, &req.structure, &req.product);
    match out.applied {
        Some(rule) if out.prediction.label != label => (out.prediction.label, format!("directive {rule}")),
        _ => (label, oracle::clause(tag).clause_id),
    }
}

/// Seeded judge: the standard view with probability `1 - epsilon`,
/// otherwise an adjacent label, the kind of slip made on borderline pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MockJudge {
    pub epsilon: f64,
    pub seed: u64,
}

impl JudgePolicy for MockJudge {
    fn judge(&self, req: &JudgeRequest, sample_index: usize) -> Result<CandidateJudgment> {
        let (label, cite) = standard_view(req);
        let idx = sample_index.to_string();
        let parts = ["judge", req.query_text.as_str(), req.product.id.as_str(), idx.as_str()];
        let mut rng = rng_for(self.seed, &parts);
        let label = if rng.gen::<f64>() < self.epsilon {
            let up = match label.value() {
                0 => true,
                3 => false,
                _ => rng.gen_bool(0.5),
            };
            RelevanceLabel::saturating(label.value() as i32 + if up { 1 } else { -1 })
        } else {
            label
        };
        Ok(CandidateJudgment { label, rationale: format!("per {cite}: judged {}", label.name()), sample_index })
    }
}

/// Wire format for remote judges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteJudgeRequest {
    pub prompt: String,
    pub sample_index: usize,
    pub request: JudgeRequest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteJudgeResponse {
    pub label: u8,
    #[serde(default)]
    pub rationale: String,
}

/// Client for a judge served over HTTP: POST `endpoint` with a
/// [`RemoteJudgeRequest`], expecting a [`RemoteJudgeResponse`].
pub struct RemoteJudge {
    endpoint: String,
    agent: ureq::Agent,
}

impl RemoteJudge {
    pub fn new(endpoint: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(std::time::Duration::from_secs(30))).build().into();
        Self { endpoint: endpoint.into(), agent }
    }
}

impl JudgePolicy for RemoteJudge {
    fn judge(&self, req: &JudgeRequest, sample_index: usize) -> Result<CandidateJudgment> {
        let body = RemoteJudgeRequest { prompt: req.prompt(), sample_index, request: req.clone() };
        let unavailable = |e: ureq::Error| Error::AnnotatorUnavailable(format!("{}: {e}", self.endpoint));
        let resp: RemoteJudgeResponse =
            self.agent.post(&self.endpoint).send_json(&body).map_err(unavailable)?.body_mut().read_json().map_err(unavailable)?;
        Ok(CandidateJudgment { label: RelevanceLabel::new(resp.label)?, rationale: resp.rationale, sample_index })
    }
}

pub fn generate_candidates(judge: &dyn JudgePolicy, req: &JudgeRequest, k: usize) -> Result<Vec<CandidateJudgment>> {
    if k == 0 {
        return Err(Error::InvalidK);
    }
    (0..k).map(|i| judge.judge(req, i)).collect()
}

// ---- reward model --------------------------------------------------------

pub const N_GRM_FEATURES: usize = 11;

/// Linear reward over agreement features; the first four weights are
/// per-label biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrmParams {
    pub weights: [f64; N_GRM_FEATURES],
    pub lambda: f64,
    pub margin: f64,
}

impl Default for GrmParams {
    /// Untrained prior: trust the published clauses.
    fn default() -> Self {
        let mut weights = [0.0; N_GRM_FEATURES];
        weights[4] = 2.0;
        weights[5] = 1.0;
        weights[6] = 2.0;
        Self { weights, lambda: 1.0, margin: 0.1 }
    }
}

impl GrmParams {
    pub fn validate(&self) -> Result<()> {
        if !self.weights.iter().all(|w| w.is_finite()) || !self.lambda.is_finite() || !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::InvalidConfig("GRM parameters must be finite with margin >= 0".into()));
        }
        Ok(())
    }
}

/// Label-independent context of one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrmContext {
    pub standard_label: RelevanceLabel,
    pub directive_label: Option<RelevanceLabel>,
    pub facts: PairFacts,
    pub heuristic: RelevanceLabel,
    pub vote_share: [f64; 4],
}

/// Token-overlap label, a weak prior independent of the standards.
pub fn heuristic_label(query_text: &str, title: &str) -> RelevanceLabel {
    let q: BTreeSet<String> = tokenize(query_text).into_iter().collect();
    if q.is_empty() {
        return RelevanceLabel::IRRELEVANT;
    }
    let t: BTreeSet<String> = tokenize(title).into_iter().collect();
    let frac = q.intersection(&t).count() as f64 / q.len() as f64;
    RelevanceLabel::saturating((3.0 * frac).round() as i32)
}

pub fn grm_context(req: &JudgeRequest, candidates: &[CandidateJudgment]) -> GrmContext {
    let (standard_label, _) = oracle::standard_label(&req.standards, &req.structure, &req.product);
    let base = Prediction::one_hot(standard_label, 0.0, SourceStage::Fine);
    let out = rules::apply_directives(&base, &req.directives, req.now, &req.structure, &req.product);
    let mut vote_share = [0.0; 4];
    for c in candidates {
        vote_share[c.label.index()] += 1.0 / candidates.len().max(1) as f64;
    }
    let text = req.structure.corrected_text.as_deref().unwrap_or(&req.query_text);
    GrmContext {
        standard_label,
        directive_label: out.applied.map(|_| out.prediction.label),
        facts: pair_facts(&req.structure, &req.product),
        heuristic: heuristic_label(text, &req.product.title),
        vote_share,
    }
}

pub fn grm_features(ctx: &GrmContext, label: RelevanceLabel) -> [f64; N_GRM_FEATURES] {
    let l = label.value() as f64;
    let mut f = [0.0; N_GRM_FEATURES];
    f[label.index()] = 1.0;
    f[4] = f64::from(label == ctx.standard_label);
    f[5] = -(l - ctx.standard_label.value() as f64).abs() / 3.0;
    f[6] = match ctx.directive_label {
        Some(d) => f64::from(label == d),
        None => 0.0,
    };
    let cat = match ctx.facts.category {
        Relation::Match => 1.0,
        Relation::Mismatch => 0.0,
        Relation::NoIntent => 0.5,
    };
    f[7] = 1.0 - (l / 3.0 - cat).abs();
    f[8] = -(l - ctx.heuristic.value() as f64).abs() / 3.0;
    f[9] = ctx.vote_share[label.index()];
    let conflict = ctx.facts.attr_conflicts > 0 || ctx.facts.brand == Relation::Mismatch;
    f[10] = if conflict { f64::from(label <= RelevanceLabel::WEAK) } else { f64::from(label >= RelevanceLabel::RELEVANT) };
    f
}

pub fn grm_raw(params: &GrmParams, f: &[f64; N_GRM_FEATURES]) -> f64 {
    params.weights.iter().zip(f).map(|(w, x)| w * x).sum()
}

/// `σ(r_φ)`, in (0, 1).
pub fn grm_score(params: &GrmParams, f: &[f64; N_GRM_FEATURES]) -> f64 {
    sigmoid(grm_raw(params, f))
}

/// `log(1 + exp(-(score_p - score_n - margin)))`.
pub fn pairwise_term(score_p: f64, score_n: f64, margin: f64) -> f64 {
    softplus(-(score_p - score_n - margin))
}

/// Argmax with ties to the earliest sample.
pub fn select_label(candidates: &[CandidateJudgment], scores: &[f64]) -> Result<usize> {
    if candidates.is_empty() || candidates.len() != scores.len() {
        return Err(Error::InvalidK);
    }
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub positive: [f64; N_GRM_FEATURES],
    pub negative: [f64; N_GRM_FEATURES],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CeItem {
    pub features: [f64; N_GRM_FEATURES],
    pub target: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GrmData {
    pub pairs: Vec<PreferencePair>,
    pub ce: Vec<CeItem>,
}

/// `L = L_CE + λ L_pairwise` (both means) and optionally its gradient
/// with respect to the weights.
pub fn grm_objective(w: &[f64; N_GRM_FEATURES], data: &GrmData, lambda: f64, margin: f64, grad: Option<&mut [f64; N_GRM_FEATURES]>) -> f64 {
    let p = GrmParams { weights: *w, lambda, margin };
    let mut g_ce = [0.0; N_GRM_FEATURES];
    let mut g_pw = [0.0; N_GRM_FEATURES];
    let mut ce = 0.0;
    let n_ce = data.ce.len().max(1) as f64;
    for it in &data.ce {
        let r = grm_raw(&p, &it.features);
        // BCE on logits: softplus(r) - y r
        ce += softplus(r) - it.target * r;
        let d = sigmoid(r) - it.target;
        for j in 0..N_GRM_FEATURES {
            g_ce[j] += d * it.features[j] / n_ce;
        }
    }
    let mut pw = 0.0;
    let n_pw = data.pairs.len().max(1) as f64;
    for pr in &data.pairs {
        let sp = grm_score(&p, &pr.positive);
        let sn = grm_score(&p, &pr.negative);
        let z = sp - sn - margin;
        pw += softplus(-z);
        let dz = -sigmoid(-z);
        for j in 0..N_GRM_FEATURES {
            g_pw[j] += dz * (sp * (1.0 - sp) * pr.positive[j] - sn * (1.0 - sn) * pr.negative[j]) / n_pw;
        }
    }
    if let Some(g) = grad {
        for j in 0..N_GRM_FEATURES {
            g[j] = g_ce[j] + lambda * g_pw[j];
        }
    }
    ce / n_ce + lambda * pw / n_pw
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrmTrainConfig {
    pub lambda: f64,
    pub margin: f64,
    pub iterations: usize,
    pub lr: f64,
}

impl Default for GrmTrainConfig {
    fn default() -> Self {
        Self { lambda: 1.0, margin: 0.1, iterations: 400, lr: 0.05 }
    }
}

/// Full-batch Adam from zero weights.
pub fn grm_train(data: &GrmData, cfg: &GrmTrainConfig) -> Result<GrmParams> {
    if data.pairs.is_empty() {
        return Err(Error::EmptySet);
    }
    if data.pairs.iter().all(|p| p.positive == p.negative) {
        return Err(Error::DegenerateData("every preference pair has identical sides".into()));
    }
    if !(cfg.margin >= 0.0) || !cfg.lambda.is_finite() {
        return Err(Error::InvalidConfig("margin must be >= 0 and lambda finite".into()));
    }
    let mut w = [0.0; N_GRM_FEATURES];
    let mut m = [0.0; N_GRM_FEATURES];
    let mut v = [0.0; N_GRM_FEATURES];
    for t in 1..=cfg.iterations {
        let mut g = [0.0; N_GRM_FEATURES];
        grm_objective(&w, data, cfg.lambda, cfg.margin, Some(&mut g));
        let c1 = 1.0 - 0.9f64.powi(t as i32);
        let c2 = 1.0 - 0.999f64.powi(t as i32);
        for j in 0..N_GRM_FEATURES {
            m[j] = 0.9 * m[j] + 0.1 * g[j];
            v[j] = 0.999 * v[j] + 0.001 * g[j] * g[j];
            w[j] -= cfg.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + 1e-8);
        }
    }
    let p = GrmParams { weights: w, lambda: cfg.lambda, margin: cfg.margin };
    p.validate()?;
    Ok(p)
}

/// Max relative error between the analytic gradient and central differences
/// over `n` randomly drawn weight coordinates.
pub fn grm_gradient_check(w: &[f64; N_GRM_FEATURES], data: &GrmData, lambda: f64, margin: f64, n: usize, seed: u64) -> f64 {
    let mut g = [0.0; N_GRM_FEATURES];
    grm_objective(w, data, lambda, margin, Some(&mut g));
    let mut rng = rng_for(seed, &["grm-gradcheck"]);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let j = rng.gen_range(0..N_GRM_FEATURES);
        let mut wp = *w;
        wp[j] += h;
        let mut wm = *w;
        wm[j] -= h;
        let fd = (grm_objective(&wp, data, lambda, margin, None) - grm_objective(&wm, data, lambda, margin, None)) / (2.0 * h);
        let denom = fd.abs().max(g[j].abs()).max(1e-8);
        worst = worst.max((fd - g[j]).abs() / denom);
    }
    worst
}

/// Training set from seeded world pairs: for each pair, the oracle label is
/// the positive and every other label a negative.
pub fn grm_training_data(world: &World, judge: &dyn JudgePolicy, n_pairs: usize, k: usize, split: Split, stream: &str) -> Result<GrmData> {
    let standards = world.published_standards();
    let mut data = GrmData::default();
    for (qid, pid) in sample_pairs(world, n_pairs, split, stream) {
        let wq = world.world_query(&qid)?;
        let product = world.product(&pid)?;
        let req = JudgeRequest {
            query_id: qid.clone(),
            query_text: wq.query.text.clone(),
            summary: wq.query.text.clone(),
            structure: world.intent_for(&wq.query),
            product: product.clone(),
            standards: standards.clone(),
            directives: Vec::new(),
            now: 0,
        };
        let cands = generate_candidates(judge, &req, k)?;
        let ctx = grm_context(&req, &cands);
        let truth = world.oracle_label_ids(&qid, &pid)?;
        let pos = grm_features(&ctx, truth);
        for l in RelevanceLabel::ALL {
            let f = grm_features(&ctx, l);
            data.ce.push(CeItem { features: f, target: f64::from(l == truth) });
            if l != truth {
                data.pairs.push(PreferencePair { positive: pos, negative: f });
            }
        }
    }
    Ok(data)
}

/// Seeded (query id, product id) pairs drawn like serving traffic: mostly
/// same-category products.
pub fn sample_pairs(world: &World, n: usize, split: Split, stream: &str) -> Vec<(String, String)> {
    let queries: Vec<_> = world.queries_in(split).collect();
    let mut rng = rng_for(world.seed(), &["pairs", stream]);
    let mut out = Vec::with_capacity(n);
    if queries.is_empty() {
        return out;
    }
    while out.len() < n {
        let wq = queries[rng.gen_range(0..queries.len())];
        let same: Vec<&Product> = wq.intent.category().map(|c| world.products_in_leaf(c).collect()).unwrap_or_default();
        let p = if !same.is_empty() && rng.gen_bool(0.7) {
            same[rng.gen_range(0..same.len())]
        } else {
            &world.products[rng.gen_range(0..world.products.len())]
        };
        out.push((wq.query.id.clone(), p.id.clone()));
    }
    out
}

// ---- the agent -----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationResult {
    pub label: RelevanceLabel,
    pub rationale: String,
    pub candidates: Vec<CandidateJudgment>,
    pub scores: Vec<f64>,
    pub selected: usize,
    pub summary: QuerySummary,
    /// Clause that decides the pair under the standards used.
    pub clause_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub directive: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precedent: Option<String>,
}

#[derive(Clone, Copy)]
pub struct AnnotateContext<'a> {
    pub standards: &'a StandardsDoc,
    pub directives: &'a [Directive],
    pub now: Tick,
    pub memory: Option<&'a MemoryStore>,
}

#[derive(Clone)]
pub struct Annotator {
    pub judge: Arc<dyn JudgePolicy>,
    pub grm: GrmParams,
    pub k: usize,
    pub lex: WorldLexicons,
}

impl Annotator {
    pub fn new(judge: Arc<dyn JudgePolicy>, grm: GrmParams, k: usize, lex: WorldLexicons) -> Self {
        Self { judge, grm, k, lex }
    }

    pub fn request(&self, summary: &QuerySummary, q: &Query, d: &Product, ctx: &AnnotateContext<'_>) -> JudgeRequest {
        JudgeRequest {
            query_id: q.id.clone(),
            query_text: q.text.clone(),
            summary: summary.summary_text.clone(),
            structure: summary.structure.clone(),
            product: d.clone(),
            standards: ctx.standards.clone(),
            directives: ctx.directives.to_vec(),
            now: ctx.now,
        }
    }

    /// ground, generate, score, select; then directives and expert
    /// precedents are enforced on the selected label.
    pub fn annotate(&self, tools: &dyn Tools, q: &Query, d: &Product, ctx: &AnnotateContext<'_>) -> Result<AnnotationResult> {
        let summary = ground_query(q, tools, &self.lex);
        self.annotate_grounded(summary, q, d, ctx)
    }

    pub fn annotate_grounded(&self, summary: QuerySummary, q: &Query, d: &Product, ctx: &AnnotateContext<'_>) -> Result<AnnotationResult> {
        let req = self.request(&summary, q, d, ctx);
        let candidates = generate_candidates(self.judge.as_ref(), &req, self.k)?;
        let gctx = grm_context(&req, &candidates);
        let scores: Vec<f64> = candidates.iter().map(|c| grm_score(&self.grm, &grm_features(&gctx, c.label))).collect();
        let selected = select_label(&candidates, &scores)?;
        let mut label = candidates[selected].label;
        let mut rationale = candidates[selected].rationale.clone();
        let (_, tag) = oracle::standard_label(ctx.standards, &summary.structure, d);
        let clause_id = oracle::clause(tag).clause_id;
        let out = rules::apply_directives(&Prediction::one_hot(label, 0.0, SourceStage::Fine), ctx.directives, ctx.now, &summary.structure, d);
        if out.prediction.label != label {
            label = out.prediction.label;
            rationale = format!("{rationale}; overridden by directive {}", out.applied.clone().unwrap_or_default());
        }
        let mut precedent = None;
        if let Some(mem) = ctx.memory {
            if let Some((e, l)) = mem.precedent_for(&q.text, &d.id) {
                if e.authority >= PRECEDENT_AUTHORITY {
                    if l != label {
                        rationale = format!("{rationale}; settled by precedent {}", e.id);
                    }
                    label = l;
                    precedent = Some(e.id.clone());
                }
            }
        }
        Ok(AnnotationResult { label, rationale, candidates, scores, selected, summary, clause_id, directive: out.applied, precedent })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cand(l: u8, i: usize) -> CandidateJudgment {
        CandidateJudgment { label: RelevanceLabel::new(l).unwrap(), rationale: String::new(), sample_index: i }
    }

    #[test]
    fn pairwise_values() {
        assert!((pairwise_term(0.4, 0.4, 0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((pairwise_term(1.5, 0.0, 0.5) - 0.313_261_687_518_222_8).abs() < 1e-12);
    }

    #[test]
    fn selection_rules() {
        assert_eq!(select_label(&[cand(2, 0)], &[0.1]).unwrap(), 0);
        assert_eq!(select_label(&[cand(0, 0), cand(1, 1), cand(2, 2)], &[0.2, 0.9, 0.4]).unwrap(), 1);
        assert_eq!(select_label(&[cand(0, 0), cand(1, 1), cand(2, 2)], &[0.7, 0.1, 0.7]).unwrap(), 0);
        assert!(select_label(&[], &[]).is_err());
    }

    #[test]
    fn score_bounds() {
        let p = GrmParams { weights: [0.0; N_GRM_FEATURES], lambda: 1.0, margin: 0.0 };
        assert_eq!(grm_score(&p, &[0.0; N_GRM_FEATURES]), 0.5);
        let p = GrmParams { weights: [1e6; N_GRM_FEATURES], lambda: 1.0, margin: 0.0 };
        let s = grm_score(&p, &[-1.0; N_GRM_FEATURES]);
        assert!(s >= 0.0 && s < 0.5);
    }

    #[test]
    fn degenerate_and_empty_data() {
        assert!(matches!(grm_train(&GrmData::default(), &GrmTrainConfig::default()), Err(Error::EmptySet)));
        let f = [1.0; N_GRM_FEATURES];
        let d = GrmData { pairs: vec![PreferencePair { positive: f, negative: f }], ce: vec![] };
        assert!(matches!(grm_train(&d, &GrmTrainConfig::default()), Err(Error::DegenerateData(_))));
    }

    proptest! {
        #[test]
        fn score_monotone_in_positive_features(
            w in prop::array::uniform11(-3.0f64..3.0),
            f in prop::array::uniform11(-1.0f64..1.0),
            j in 0usize..N_GRM_FEATURES,
            bump in 0.0f64..2.0,
        ) {
            let p = GrmParams { weights: w, lambda: 1.0, margin: 0.0 };
            let mut g = f;
            g[j] += bump;
            if w[j] >= 0.0 {
                prop_assert!(grm_score(&p, &g) >= grm_score(&p, &f));
            }
        }

        #[test]
        fn pairwise_nonnegative(a in -5.0f64..5.0, b in -5.0f64..5.0, m in 0.0f64..2.0) {
            prop_assert!(pairwise_term(a, b, m) >= 0.0);
        }
    }
}
