//! Failure attribution, supervision repair and pattern probing.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::domain::{Case, CaseProvenance, Prediction, Product, Query, RelevanceLabel};
use crate::error::{Error, Result};
use crate::model::corpus::{Corpus, Sample, SampleProvenance};
use crate::model::query::{parse_query, QueryStructure, WorldLexicons};
use crate::util::hash_parts;
use crate::world::oracle::{pair_facts, Relation, AUDIENCE};
use crate::world::{lexicon, render_intent, FeatureDefect, World};

/// Read access to the two product views and the query log.
pub trait Catalog: Sync {
    /// Product as the evaluation side sees it.
    fn eval_product(&self, id: &str) -> Result<&Product>;
    /// Product as serving features see it.
    fn model_product(&self, id: &str) -> Result<&Product>;
    fn products_in_leaf(&self, leaf: &str) -> Vec<&Product>;
    fn known_query(&self, id: &str) -> Option<&Query>;
}

impl Catalog for World {
    fn eval_product(&self, id: &str) -> Result<&Product> {
        self.product(id)
    }

    fn model_product(&self, id: &str) -> Result<&Product> {
        self.serving_product(id)
    }

    fn products_in_leaf(&self, leaf: &str) -> Vec<&Product> {
        World::products_in_leaf(self, leaf).collect()
    }

    fn known_query(&self, id: &str) -> Option<&Query> {
        self.query(id).ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RootCause {
    MissingAttribute,
    SemanticConfusion,
    HeadWordShift,
    FeatureDefect(FeatureDefect),
    Unattributed,
}

impl RootCause {
    pub fn as_str(&self) -> String {
        match self {
            RootCause::MissingAttribute => "missing_attribute".into(),
            RootCause::SemanticConfusion => "semantic_confusion".into(),
            RootCause::HeadWordShift => "head_word_shift".into(),
            RootCause::FeatureDefect(d) => format!("feature_defect:{}", d.as_str()),
            RootCause::Unattributed => "unattributed".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    FeatureSide,
    ModelSide,
}

/// Query-category by product-category cell a failure falls into.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FailurePattern {
    pub query_category: String,
    pub product_category: String,
}

impl FailurePattern {
    pub fn abstraction(&self) -> String {
        format!("{} -> {}", self.query_category, self.product_category)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseDiagnosis {
    pub case_id: String,
    pub side: Side,
    pub tags: Vec<(RootCause, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<FailurePattern>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisReport {
    pub cases: Vec<CaseDiagnosis>,
    /// Per-tag maximum confidence over cases.
    pub root_cause_tags: Vec<(RootCause, f64)>,
}

impl DiagnosisReport {
    pub fn patterns(&self) -> BTreeSet<FailurePattern> {
        self.cases.iter().filter(|c| c.side == Side::ModelSide).filter_map(|c| c.pattern.clone()).collect()
    }

    pub fn has_model_side_tag(&self) -> bool {
        self.cases.iter().any(|c| c.side == Side::ModelSide && c.tags.iter().any(|(t, _)| *t != RootCause::Unattributed))
    }
}

/// Stage 1 view comparison. The kind is read off the field that differs.
fn feature_defect(model: &Product, eval: &Product) -> Option<FeatureDefect> {
    if model.category_path != eval.category_path {
        Some(FeatureDefect::WrongCategory)
    } else if eval.brand.is_some() && model.brand.is_none() {
        Some(FeatureDefect::MissingBrand)
    } else if model.title != eval.title {
        Some(FeatureDefect::SeoCheat)
    } else {
        None
    }
}

fn model_tags(s: &QueryStructure, d: &Product, reference: RelevanceLabel, online: RelevanceLabel) -> Vec<(RootCause, f64)> {
    let f = pair_facts(s, d);
    let over = online.value() > reference.value();
    let mut tags = Vec::new();
    if f.category == Relation::Mismatch && over {
        let same_dept = s
            .category()
            .and_then(lexicon::leaf)
            .map(|l| d.category_path.first().map(String::as_str) == Some(l.dept))
            .unwrap_or(false);
        if f.attr_matched > 0 || f.brand == Relation::Match {
            tags.push((RootCause::HeadWordShift, 0.8));
        } else if same_dept {
            tags.push((RootCause::SemanticConfusion, 0.7));
        } else {
            tags.push((RootCause::SemanticConfusion, 0.4));
        }
    }
    if f.attr_conflicts > 0 && over {
        tags.push((RootCause::MissingAttribute, if f.category == Relation::Match { 0.8 } else { 0.5 }));
    }
    if tags.is_empty() {
        tags.push((RootCause::Unattributed, 0.0));
    }
    tags
}

/// Routes each case to the feature or model side and tags the model side.
/// Cases without a reference label are routed model side, unattributed.
pub fn diagnose(cases: &[Case], catalog: &dyn Catalog, lex: &WorldLexicons) -> Result<(Vec<Case>, Vec<Case>, DiagnosisReport)> {
    if cases.is_empty() {
        return Err(Error::EmptySample("diagnose needs at least one case"));
    }
    let mut c_feat = Vec::new();
    let mut c_model = Vec::new();
    let mut report = DiagnosisReport::default();
    for c in cases {
        let eval = catalog.eval_product(&c.product_id)?;
        let model = catalog.model_product(&c.product_id)?;
        if let Some(kind) = feature_defect(model, eval) {
            report.cases.push(CaseDiagnosis { case_id: c.id.clone(), side: Side::FeatureSide, tags: vec![(RootCause::FeatureDefect(kind), 1.0)], pattern: None });
            c_feat.push(c.clone());
            continue;
        }
        let s = c.query.structure.clone().unwrap_or_else(|| parse_query(&c.query.text, lex).normalized());
        let tags = match c.reference_label {
            Some(r) => model_tags(&s, eval, r, c.online_prediction.label),
            None => vec![(RootCause::Unattributed, 0.0)],
        };
        let pattern = s.category().map(|qc| FailurePattern { query_category: qc.to_string(), product_category: eval.leaf().to_string() });
        report.cases.push(CaseDiagnosis { case_id: c.id.clone(), side: Side::ModelSide, tags, pattern });
        c_model.push(c.clone());
    }
    let mut agg: BTreeMap<RootCause, f64> = BTreeMap::new();
    for cd in &report.cases {
        for (t, conf) in &cd.tags {
            let e = agg.entry(*t).or_insert(0.0);
            *e = e.max(*conf);
        }
    }
    report.root_cause_tags = agg.into_iter().collect();
    Ok((c_feat, c_model, report))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Correction {
    pub sample_id: String,
    pub old_label: RelevanceLabel,
    pub new_label: RelevanceLabel,
    pub cause: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetDelta {
    pub corrections: Vec<Correction>,
    pub additions: Vec<Sample>,
}

impl DatasetDelta {
    pub fn is_empty(&self) -> bool {
        self.corrections.is_empty() && self.additions.is_empty()
    }

    /// `D' = D ∪ ΔD`, corrections in place. Returns the number of additions
    /// dropped by deduplication. Replaying a delta is a no-op.
    pub fn apply(&self, corpus: &mut Corpus) -> Result<usize> {
        let index: BTreeMap<String, usize> = corpus.samples.iter().enumerate().map(|(i, s)| (s.id.clone(), i)).collect();
        for c in &self.corrections {
            let i = *index.get(&c.sample_id).ok_or_else(|| Error::UnknownEntity(format!("sample {}", c.sample_id)))?;
            corpus.samples[i].label = c.new_label;
        }
        Ok(corpus.merge(&self.additions))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    /// Synthesized pairs per diagnosed pattern.
    pub augment_per_pattern: usize,
    /// Upper bound on re-annotated samples per call.
    pub max_reannotations: usize,
    /// When this share of a query category's re-annotated pattern samples
    /// carried a wrong label, the whole category is re-annotated.
    pub widen_disagreement: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self { augment_per_pattern: 6, max_reannotations: 4000, widen_disagreement: 0.25 }
    }
}

/// Label source for refinement. Errors of kind `AnnotatorUnavailable` stop
/// augmentation; any error skips the pair at hand.
pub type Labeler<'a> = dyn FnMut(&Query, &Product) -> Result<RelevanceLabel> + 'a;

pub fn sample_query(s: &Sample, catalog: &dyn Catalog) -> Result<Query> {
    match catalog.known_query(&s.query_id) {
        Some(q) if q.text == s.query_text => Ok(q.clone()),
        _ => Query::new(s.query_id.clone(), s.query_text.clone(), "en"),
    }
}

fn sample_category(s: &Sample, lex: &WorldLexicons, memo: &mut BTreeMap<String, Option<String>>) -> Option<String> {
    memo.entry(s.query_text.clone()).or_insert_with(|| parse_query(&s.query_text, lex).normalized().category().map(str::to_string)).clone()
}

/// Corrects samples in the diagnosed cells, then adds annotated pairs
/// around each failing case. Settled case labels are added as well.
pub fn refine(
    c_model: &[Case],
    report: &DiagnosisReport,
    corpus: &Corpus,
    catalog: &dyn Catalog,
    lex: &WorldLexicons,
    labeler: &mut Labeler<'_>,
    cycle: u64,
    cfg: &RefineConfig,
) -> Result<DatasetDelta> {
    let covered: BTreeSet<&str> = report.cases.iter().filter(|c| c.side == Side::ModelSide).map(|c| c.case_id.as_str()).collect();
    if let Some(c) = c_model.iter().find(|c| !covered.contains(c.id.as_str())) {
        return Err(Error::InvalidConfig(format!("report does not cover case {}", c.id)));
    }
    let patterns = report.patterns();
    let mut delta = DatasetDelta::default();
    let mut memo = BTreeMap::new();
    let mut budget = cfg.max_reannotations;
    // per query category: (re-annotated, changed)
    let mut tally: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut visited = BTreeSet::new();
    for widen in [false, true] {
        let widened: BTreeSet<String> = if widen {
            tally
                .iter()
                .filter(|(_, (n, k))| cfg.widen_disagreement > 0.0 && *n > 0 && *k as f64 >= cfg.widen_disagreement * *n as f64)
                .map(|(q, _)| q.clone())
                .collect()
        } else {
            BTreeSet::new()
        };
        if widen && widened.is_empty() {
            break;
        }
        let mut found = Vec::new();
        for (i, s) in corpus.samples.iter().enumerate() {
            if budget == 0 {
                break;
            }
            if visited.contains(&i) {
                continue;
            }
            let Some(qc) = sample_category(s, lex, &mut memo) else { continue };
            let Ok(d) = catalog.eval_product(&s.product_id) else { continue };
            let cell = FailurePattern { query_category: qc, product_category: d.leaf().to_string() };
            let hit = if widen { widened.contains(&cell.query_category) } else { patterns.contains(&cell) };
            if !hit {
                continue;
            }
            visited.insert(i);
            budget -= 1;
            let q = sample_query(s, catalog)?;
            let Ok(label) = labeler(&q, d) else { continue };
            let changed = label != s.label;
            if !widen {
                let t = tally.entry(cell.query_category.clone()).or_default();
                t.0 += 1;
                t.1 += changed as usize;
            }
            if changed {
                found.push(Correction { sample_id: s.id.clone(), old_label: s.label, new_label: label, cause: cell.abstraction() });
            }
        }
        delta.corrections.extend(found);
    }
    let mut seen: BTreeSet<String> = corpus.samples.iter().map(|s| s.id.clone()).collect();
    let mut push = |delta: &mut DatasetDelta, s: Sample| {
        if seen.insert(s.id.clone()) {
            delta.additions.push(s);
        }
    };
    for c in c_model {
        if let Some(l) = c.reference_label {
            let s = Sample {
                id: format!("c{cycle}-{}", c.id),
                query_id: c.query.id.clone(),
                query_text: c.query.text.clone(),
                product_id: c.product_id.clone(),
                label: l,
                provenance: SampleProvenance::Correction,
                cycle,
            };
            push(&mut delta, s);
        }
    }
    'aug: for c in c_model {
        let Some(pattern) = report.cases.iter().find(|d| d.case_id == c.id).and_then(|d| d.pattern.clone()) else { continue };
        let mut pool = catalog.products_in_leaf(&pattern.product_category);
        pool.sort_by_key(|p| (hash_parts(&["augment", &c.query.text, &p.id]), p.id.clone()));
        for d in pool.into_iter().filter(|p| p.id != c.product_id).take(cfg.augment_per_pattern) {
            let label = match labeler(&c.query, d) {
                Ok(l) => l,
                Err(Error::AnnotatorUnavailable(_)) => break 'aug,
                Err(_) => continue,
            };
            let s = Sample {
                id: format!("r{cycle}-{}-{}-{}", c.query.id, d.id, label.value()),
                query_id: c.query.id.clone(),
                query_text: c.query.text.clone(),
                product_id: d.id.clone(),
                label,
                provenance: SampleProvenance::Refined,
                cycle,
            };
            push(&mut delta, s);
        }
    }
    Ok(delta)
}

// ---- probing ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    EntityDeletion,
    ModifierSwap,
    HeadWordSwap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    IndividualCase,
    UniversalIssue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Replicated,
    Rejected,
    Pending,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationResult {
    pub kind: Perturbation,
    pub query_text: String,
    pub still_fails: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptFinding {
    pub case_id: String,
    pub perturbations: Vec<PerturbationResult>,
    pub scope: Scope,
    /// Market-layer outcome for universal issues: does the translated
    /// query fail too.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub market_fails: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeHypothesis {
    pub abstraction: String,
    pub probes: Vec<String>,
    pub verdict: Verdict,
    pub round: usize,
}

pub const MAX_PROBE_ROUNDS: usize = 3;
pub const MIN_PROBES: usize = 3;
pub const MAX_PROBES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub probes_per_round: usize,
    /// Total probe executions across all hypotheses.
    pub budget: usize,
    pub max_hypotheses: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { probes_per_round: 4, budget: 120, max_hypotheses: 8 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub new_cases: Vec<Case>,
    pub concept: Vec<ConceptFinding>,
    pub hypotheses: Vec<ProbeHypothesis>,
    pub executed: usize,
}

/// How probes are executed and judged.
pub struct ProbeEnv<'a> {
    pub online: &'a dyn Fn(&Query, &Product) -> Result<Prediction>,
    pub reference: &'a dyn Fn(&Query, &Product) -> Result<RelevanceLabel>,
    pub catalog: &'a dyn Catalog,
    pub lex: &'a WorldLexicons,
    pub standards_version: u32,
}

fn perturbations(s: &QueryStructure) -> Vec<(Perturbation, QueryStructure)> {
    let mut out = Vec::new();
    if s.brand.is_some() {
        out.push((Perturbation::EntityDeletion, QueryStructure { brand: None, ..s.clone() }));
    }
    for k in s.attributes.keys() {
        let mut t = s.clone();
        t.attributes.remove(k);
        out.push((Perturbation::EntityDeletion, t));
    }
    let leaf = s.category().unwrap_or("");
    for (k, v) in &s.attributes {
        if k == AUDIENCE {
            continue;
        }
        if let Some(alt) = lexicon::values_for(leaf, k).into_iter().find(|x| x != v) {
            let mut t = s.clone();
            t.attributes.insert(k.clone(), alt.to_string());
            out.push((Perturbation::ModifierSwap, t));
        }
    }
    if let Some(spec) = lexicon::leaf(leaf) {
        if let Some(sib) = lexicon::LEAVES.iter().find(|l| l.dept == spec.dept && l.id != spec.id) {
            let mut t = s.clone();
            t.category_intent = vec![sib.id.to_string()];
            t.attributes.retain(|k, _| sib.attr_classes.contains(&k.as_str()) || k == AUDIENCE);
            out.push((Perturbation::HeadWordSwap, t));
        }
    }
    out
}

fn probe_query(id: String, text: String, spanish: bool) -> Result<Query> {
    Query::new(id, text, if spanish { "es" } else { "en" })
}

fn fails(env: &ProbeEnv<'_>, q: &Query, d: &Product) -> Result<(bool, Prediction, RelevanceLabel)> {
    let pred = (env.online)(q, d)?;
    let r = (env.reference)(q, d)?;
    Ok((pred.label != r, pred, r))
}

/// Concept perturbation per failing case, market re-probe of universal
/// issues, then bounded hypothesis rounds per failure pattern. Failures
/// replicated in the logic layer become new cases.
pub fn probe(report: &DiagnosisReport, cases: &[Case], env: &ProbeEnv<'_>, cfg: &ProbeConfig) -> Result<ProbeOutcome> {
    if !report.has_model_side_tag() {
        return Err(Error::InvalidConfig("probe needs a report with a model-side tag".into()));
    }
    if !(MIN_PROBES..=MAX_PROBES).contains(&cfg.probes_per_round) {
        return Err(Error::InvalidConfig(format!("probes per round must lie in {MIN_PROBES}..={MAX_PROBES}")));
    }
    let mut out = ProbeOutcome::default();
    let by_id: BTreeMap<&str, &Case> = cases.iter().map(|c| (c.id.as_str(), c)).collect();
    let mut universal_patterns: BTreeSet<FailurePattern> = BTreeSet::new();
    for cd in report.cases.iter().filter(|c| c.side == Side::ModelSide) {
        let (Some(c), Some(pattern)) = (by_id.get(cd.case_id.as_str()), &cd.pattern) else { continue };
        if cd.tags.iter().all(|(t, _)| *t == RootCause::Unattributed) {
            continue;
        }
        let d = env.catalog.eval_product(&c.product_id)?;
        let s = parse_query(&c.query.text, env.lex).normalized();
        let mut results = Vec::new();
        for (i, (kind, t)) in perturbations(&s).into_iter().enumerate() {
            if out.executed >= cfg.budget {
                break;
            }
            let Some(text) = render_intent(&t, false) else { continue };
            let q = probe_query(format!("{}-pt{i}", c.id), text.clone(), false)?;
            out.executed += 1;
            let (f, _, _) = fails(env, &q, d)?;
            results.push(PerturbationResult { kind, query_text: text, still_fails: f });
        }
        let modifier: Vec<&PerturbationResult> = results.iter().filter(|r| r.kind != Perturbation::HeadWordSwap).collect();
        let scope = if !modifier.is_empty() && modifier.iter().all(|r| !r.still_fails) { Scope::IndividualCase } else { Scope::UniversalIssue };
        let mut market_fails = None;
        if scope == Scope::UniversalIssue {
            universal_patterns.insert(pattern.clone());
            if out.executed < cfg.budget {
                if let Some(text) = render_intent(&s, true) {
                    let q = probe_query(format!("{}-es", c.id), text, true)?;
                    out.executed += 1;
                    market_fails = Some(fails(env, &q, d)?.0);
                }
            }
        }
        out.concept.push(ConceptFinding { case_id: c.id.clone(), perturbations: results, scope, market_fails });
    }

    for pattern in universal_patterns.into_iter().take(cfg.max_hypotheses) {
        let mut pool = env.catalog.products_in_leaf(&pattern.product_category);
        pool.sort_by(|a, b| a.id.cmp(&b.id));
        let Some(spec) = lexicon::leaf(&pattern.query_category) else { continue };
        let mut hyp = ProbeHypothesis { abstraction: pattern.abstraction(), probes: Vec::new(), verdict: Verdict::Pending, round: 0 };
        for round in 1..=MAX_PROBE_ROUNDS {
            if out.executed + cfg.probes_per_round > cfg.budget || pool.is_empty() {
                break;
            }
            hyp.round = round;
            let mut failures = Vec::new();
            for j in 0..cfg.probes_per_round {
                let salt = format!("{}#{round}#{j}", pattern.abstraction());
                let mut s = QueryStructure { category_intent: vec![spec.id.to_string()], ..Default::default() };
                let classes: Vec<&str> = spec.attr_classes.to_vec();
                let class = classes[(hash_parts(&["cls", &salt]) as usize) % classes.len()];
                let vals = lexicon::values_for(spec.id, class);
                if !vals.is_empty() && hash_parts(&["mod", &salt]) % 3 != 0 {
                    s.attributes.insert(class.to_string(), vals[(hash_parts(&["val", &salt]) as usize) % vals.len()].to_string());
                }
                let brands = lexicon::brands_for(spec.dept);
                if !brands.is_empty() && hash_parts(&["brand", &salt]) % 3 == 0 {
                    s.brand = Some(brands[(hash_parts(&["b", &salt]) as usize) % brands.len()].to_string());
                }
                let Some(text) = render_intent(&s, false) else { continue };
                let d = pool[(hash_parts(&["prod", &salt]) as usize) % pool.len()];
                let q = probe_query(format!("probe-{:016x}", hash_parts(&["q", &salt])), text.clone(), false)?;
                hyp.probes.push(text);
                out.executed += 1;
                let (f, pred, r) = fails(env, &q, d)?;
                if f {
                    failures.push(Case {
                        id: format!("pc-{:016x}", hash_parts(&["case", &salt, &d.id])),
                        query: q,
                        product_id: d.id.clone(),
                        reference_label: Some(r),
                        online_prediction: pred,
                        provenance: CaseProvenance::Probe,
                        standards_version: env.standards_version,
                    });
                }
            }
            if failures.len() >= 2 {
                hyp.verdict = Verdict::Replicated;
                out.new_cases.extend(failures);
                break;
            }
            if failures.is_empty() {
                hyp.verdict = Verdict::Rejected;
                break;
            }
        }
        out.hypotheses.push(hyp);
    }
    Ok(out)
}
