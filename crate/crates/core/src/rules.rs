//! Runtime directives: inclusion, exclusion and scoping rules, their
//! applicability test, label adjustment and the Up/Down/Neutral harness.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Directive, Prediction, Product, RelevanceLabel, SourceStage, Tick};
use crate::error::{Error, Result};
use crate::model::query::parse_query;
use crate::model::QueryStructure;
use crate::util::rng_for;
use crate::world::lexicon;
use crate::world::{Split, World};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Inclusion,
    Exclusion,
    Scoping,
}

/// Conjunctive field pattern. `category` matches a leaf or its department.
/// An empty pattern matches everything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pattern {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub brand: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attributes: BTreeMap<String, String>,
}

impl Pattern {
    pub fn is_empty(&self) -> bool {
        self.category.is_none() && self.brand.is_none() && self.attributes.is_empty()
    }

    pub fn category(c: &str) -> Self {
        Self { category: Some(c.to_string()), ..Default::default() }
    }

    pub fn brand(b: &str) -> Self {
        Self { brand: Some(b.to_string()), ..Default::default() }
    }

    fn leaf_in(leaf: &str, cat: &str) -> bool {
        leaf == cat || lexicon::leaf(leaf).map(|l| l.dept == cat).unwrap_or(false)
    }

    pub fn matches_query(&self, s: &QueryStructure) -> bool {
        if let Some(c) = &self.category {
            if !s.category_intent.iter().any(|l| Self::leaf_in(l, c)) {
                return false;
            }
        }
        if let Some(b) = &self.brand {
            if s.brand.as_ref() != Some(b) {
                return false;
            }
        }
        self.attributes.iter().all(|(k, v)| s.attributes.get(k) == Some(v))
    }

    pub fn matches_product(&self, p: &Product) -> bool {
        if let Some(c) = &self.category {
            if !p.category_path.iter().any(|x| x == c) {
                return false;
            }
        }
        if let Some(b) = &self.brand {
            if p.brand.as_ref() != Some(b) {
                return false;
            }
        }
        self.attributes.iter().all(|(k, v)| p.attributes.get(k) == Some(v))
    }

    fn describe(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(c) = &self.category {
            out.push(format!("{prefix}.category={c}"));
        }
        if let Some(b) = &self.brand {
            out.push(format!("{prefix}.brand={b}"));
        }
        for (k, v) in &self.attributes {
            out.push(format!("{prefix}.{k}={v}"));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "label", rename_all = "snake_case")]
pub enum RuleAction {
    Assign(RelevanceLabel),
    Floor(RelevanceLabel),
    Ceiling(RelevanceLabel),
}

impl RuleAction {
    pub fn apply(self, base: RelevanceLabel) -> RelevanceLabel {
        match self {
            RuleAction::Assign(l) => l,
            RuleAction::Floor(l) => base.max(l),
            RuleAction::Ceiling(l) => base.min(l),
        }
    }
}

/// A structured rule. For scoping rules `product_match` describes the
/// allowed scope and the rule fires on products outside it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rule {
    pub id: String,
    pub primitive: Primitive,
    pub query_scope: Pattern,
    pub product_match: Pattern,
    pub action: RuleAction,
    #[serde(default)]
    pub human_text: String,
}

impl Rule {
    pub fn exclusion(id: &str, query_scope: Pattern, product_match: Pattern, text: &str) -> Self {
        Self {
            id: id.into(),
            primitive: Primitive::Exclusion,
            query_scope,
            product_match,
            action: RuleAction::Assign(RelevanceLabel::IRRELEVANT),
            human_text: text.into(),
        }
    }

    pub fn inclusion(id: &str, query_scope: Pattern, product_match: Pattern, text: &str) -> Self {
        Self {
            id: id.into(),
            primitive: Primitive::Inclusion,
            query_scope,
            product_match,
            action: RuleAction::Floor(RelevanceLabel::RELEVANT),
            human_text: text.into(),
        }
    }

    pub fn scoping(id: &str, query_scope: Pattern, scope: Pattern, text: &str) -> Self {
        Self {
            id: id.into(),
            primitive: Primitive::Scoping,
            query_scope,
            product_match: scope,
            action: RuleAction::Assign(RelevanceLabel::IRRELEVANT),
            human_text: text.into(),
        }
    }

    /// Primitive/action consistency.
    pub fn validate(&self) -> Result<()> {
        let ok = match (self.primitive, self.action) {
            (Primitive::Exclusion, RuleAction::Assign(l)) | (Primitive::Scoping, RuleAction::Assign(l)) => l == RelevanceLabel::IRRELEVANT,
            (Primitive::Inclusion, RuleAction::Floor(l)) => l >= RelevanceLabel::RELEVANT,
            _ => false,
        };
        if self.id.trim().is_empty() {
            return Err(Error::InvalidConfig("rule id must be non-empty".into()));
        }
        if self.query_scope.is_empty() || self.product_match.is_empty() {
            return Err(Error::InvalidConfig(format!("rule {}: unscoped patterns would fire on every pair", self.id)));
        }
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("rule {}: action inconsistent with {:?}", self.id, self.primitive)))
        }
    }

    /// Product-side predicate.
    pub fn product_fires(&self, d: &Product) -> bool {
        match self.primitive {
            Primitive::Scoping => !self.product_match.matches_product(d),
            _ => self.product_match.matches_product(d),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Applies,
    ObjectMismatch,
    ScenarioMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Applicability {
    pub verdict: Verdict,
    pub matched_clauses: Vec<String>,
}

pub fn applies(rule: &Rule, s: &QueryStructure, d: &Product) -> Applicability {
    if !rule.query_scope.matches_query(s) {
        return Applicability { verdict: Verdict::ScenarioMismatch, matched_clauses: Vec::new() };
    }
    let mut matched = rule.query_scope.describe("query");
    if !rule.product_fires(d) {
        return Applicability { verdict: Verdict::ObjectMismatch, matched_clauses: matched };
    }
    let prefix = if rule.primitive == Primitive::Scoping { "outside_scope" } else { "product" };
    matched.extend(rule.product_match.describe(prefix));
    Applicability { verdict: Verdict::Applies, matched_clauses: matched }
}

pub const RULE_SMOOTHING: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleOutcome {
    pub prediction: Prediction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub applied: Option<String>,
    pub matched_clauses: Vec<String>,
    /// Several rules applied at the top priority; the lowest id won.
    pub same_priority_conflict: bool,
}

/// Applies the highest-priority applicable rule. `rules` are (priority,
/// rule) pairs in any order.
pub fn apply_rules(base: &Prediction, rules: &[(i32, &Rule)], s: &QueryStructure, d: &Product) -> RuleOutcome {
    let mut sorted: Vec<&(i32, &Rule)> = rules.iter().collect();
    sorted.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)));
    let mut winner: Option<(i32, &Rule, Applicability)> = None;
    let mut conflict = false;
    for (prio, rule) in sorted {
        if let Some((wp, _, _)) = &winner {
            if *prio < *wp {
                break;
            }
        }
        let a = applies(rule, s, d);
        if a.verdict == Verdict::Applies {
            if winner.is_some() {
                conflict = true;
            } else {
                winner = Some((*prio, rule, a));
            }
        }
    }
    match winner {
        None => RuleOutcome { prediction: base.clone(), applied: None, matched_clauses: Vec::new(), same_priority_conflict: false },
        Some((_, rule, a)) => {
            let label = rule.action.apply(base.label);
            let prediction = if label == base.label {
                base.clone()
            } else {
                Prediction::one_hot(label, RULE_SMOOTHING, SourceStage::RuleAdjusted)
            };
            RuleOutcome { prediction, applied: Some(rule.id.clone()), matched_clauses: a.matched_clauses, same_priority_conflict: conflict }
        }
    }
}

pub fn apply_directives(base: &Prediction, directives: &[Directive], now: Tick, s: &QueryStructure, d: &Product) -> RuleOutcome {
    let active: Vec<(i32, &Rule)> = directives.iter().filter(|x| x.is_active(now)).map(|x| (x.priority, &x.rule)).collect();
    apply_rules(base, &active, s, d)
}

/// Enforces "at most one active directive per (scope, priority)".
pub fn check_directive_conflict(existing: &[Directive], new: &Directive, now: Tick) -> Result<()> {
    new.rule.validate()?;
    for d in existing.iter().filter(|d| d.is_active(now)) {
        if d.id == new.id {
            return Err(Error::Conflict(format!("directive {} already exists", d.id)));
        }
        if d.priority == new.priority && d.rule.query_scope == new.rule.query_scope && d.rule.product_match == new.rule.product_match {
            return Err(Error::Conflict(format!("directive {} already active for this scope and priority", d.id)));
        }
    }
    Ok(())
}

// ---- contrastive evaluation sets ----------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Up,
    Down,
    Neutral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleItem {
    pub scenario: Scenario,
    pub query_id: String,
    pub structure: QueryStructure,
    pub product: Product,
    pub rule: Rule,
    pub base_label: RelevanceLabel,
    pub expected_label: RelevanceLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neutral_kind: Option<Verdict>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioCounts {
    pub up: usize,
    pub down: usize,
    pub neutral: usize,
}

impl Default for ScenarioCounts {
    fn default() -> Self {
        Self { up: 200, down: 200, neutral: 1000 }
    }
}

fn other_brand<R: Rng>(rng: &mut R, dept: &str, not: Option<&str>) -> Option<&'static str> {
    let bs: Vec<&'static str> = lexicon::brands_for(dept).iter().copied().filter(|b| Some(*b) != not).collect();
    bs.choose(rng).copied()
}

/// Builds an Up/Down/Neutral set over query/product pairs of one split.
/// Base labels come from the oracle, so the interpreter is exact.
pub fn generate_contrastive_set(world: &World, counts: ScenarioCounts, split: Split, stream: &str) -> Result<Vec<RuleItem>> {
    let mut rng = rng_for(world.seed(), &["contrastive", stream]);
    let mut pool: Vec<(String, QueryStructure, &Product, RelevanceLabel)> = Vec::new();
    let queries: Vec<_> = world.queries_in(split).filter(|q| q.entity.is_none()).collect();
    for wq in &queries {
        let s = parse_query(&wq.query.text, world.lexicons()).normalized();
        let Some(leaf) = s.category().map(str::to_string) else { continue };
        let mut prng = rng_for(world.seed(), &["contrastive-pool", stream, &wq.query.id]);
        let same: Vec<&Product> = world.products_in_leaf(&leaf).collect();
        for _ in 0..12 {
            let p = if prng.gen_bool(0.6) && !same.is_empty() {
                same[prng.gen_range(0..same.len())]
            } else {
                &world.products[prng.gen_range(0..world.products.len())]
            };
            let label = world.oracle.label(&wq.intent, p).0;
            pool.push((wq.query.id.clone(), s.clone(), p, label));
        }
    }
    pool.shuffle(&mut rng);
    let mut seen: BTreeSet<(String, String, Scenario)> = BTreeSet::new();
    let mut items = Vec::new();
    let mut n = [0usize; 3];
    let want = [counts.up, counts.down, counts.neutral];
    let leaves: Vec<&str> = lexicon::LEAVES.iter().map(|l| l.id).collect();
    let mut rid = 0usize;
    for round in 0..4 {
        for (qid, s, p, base) in &pool {
            let qleaf = s.category().unwrap().to_string();
            let dept = lexicon::leaf(&qleaf).map(|l| l.dept).unwrap_or("");
            rid += 1;
            let id = format!("r{rid:06}");
            // Up: inclusion lifts a low label
            if n[0] < want[0] && *base < RelevanceLabel::RELEVANT && seen.insert((qid.clone(), p.id.clone(), Scenario::Up)) {
                let pm = if rng.gen_bool(0.5) || p.brand.is_none() { Pattern::category(p.leaf()) } else { Pattern::brand(p.brand.as_deref().unwrap()) };
                let rule = Rule::inclusion(&id, Pattern::category(&qleaf), pm, "show these products for this query");
                items.push(RuleItem {
                    scenario: Scenario::Up,
                    query_id: qid.clone(),
                    structure: s.clone(),
                    product: (*p).clone(),
                    expected_label: rule.action.apply(*base),
                    rule,
                    base_label: *base,
                    neutral_kind: None,
                });
                n[0] += 1;
                continue;
            }
            // Down: exclusion or scoping removes a positive label
            if n[1] < want[1] && *base > RelevanceLabel::IRRELEVANT && seen.insert((qid.clone(), p.id.clone(), Scenario::Down)) {
                let rule = if rng.gen_bool(0.5) {
                    let pm = match &p.brand {
                        Some(b) if rng.gen_bool(0.5) => Pattern::brand(b),
                        _ => Pattern::category(p.leaf()),
                    };
                    Rule::exclusion(&id, Pattern::category(&qleaf), pm, "these products cannot be shown")
                } else {
                    match other_brand(&mut rng, dept, p.brand.as_deref()) {
                        Some(b) => Rule::scoping(&id, Pattern::category(&qleaf), Pattern::brand(b), "only this brand may be shown"),
                        None => Rule::exclusion(&id, Pattern::category(&qleaf), Pattern::category(p.leaf()), "these products cannot be shown"),
                    }
                };
                items.push(RuleItem {
                    scenario: Scenario::Down,
                    query_id: qid.clone(),
                    structure: s.clone(),
                    product: (*p).clone(),
                    expected_label: rule.action.apply(*base),
                    rule,
                    base_label: *base,
                    neutral_kind: None,
                });
                n[1] += 1;
                continue;
            }
            if n[2] < want[2] && seen.insert((qid.clone(), format!("{}#{round}", p.id), Scenario::Neutral)) {
                let kind = if rng.gen_bool(0.5) { Verdict::ObjectMismatch } else { Verdict::ScenarioMismatch };
                let prim = [Primitive::Inclusion, Primitive::Exclusion, Primitive::Scoping][rng.gen_range(0..3)];
                let rule = match kind {
                    Verdict::ObjectMismatch => {
                        // same query scope, a product pattern the item misses
                        let miss = loop {
                            let l = leaves[rng.gen_range(0..leaves.len())];
                            if l != p.leaf() {
                                break l;
                            }
                        };
                        match prim {
                            Primitive::Inclusion => Rule::inclusion(&id, Pattern::category(&qleaf), Pattern::category(miss), "show these products"),
                            Primitive::Exclusion => match other_brand(&mut rng, p.category_path[0].as_str(), p.brand.as_deref()) {
                                Some(b) if rng.gen_bool(0.5) => Rule::exclusion(&id, Pattern::category(&qleaf), Pattern::brand(b), "this brand cannot be shown"),
                                _ => Rule::exclusion(&id, Pattern::category(&qleaf), Pattern::category(miss), "these products cannot be shown"),
                            },
                            Primitive::Scoping => Rule::scoping(&id, Pattern::category(&qleaf), Pattern::category(p.leaf()), "only this category may be shown"),
                        }
                    }
                    _ => {
                        // transplanted from an unrelated query; the product side
                        // often still matches, which is what trips naive models
                        let other = loop {
                            let l = leaves[rng.gen_range(0..leaves.len())];
                            if !Pattern::category(l).matches_query(s) {
                                break l;
                            }
                        };
                        match prim {
                            Primitive::Inclusion => Rule::inclusion(&id, Pattern::category(other), Pattern::category(p.leaf()), "show these products"),
                            Primitive::Exclusion => Rule::exclusion(&id, Pattern::category(other), Pattern::category(p.leaf()), "these products cannot be shown"),
                            Primitive::Scoping => Rule::scoping(&id, Pattern::category(other), Pattern::category(other), "only this category may be shown"),
                        }
                    }
                };
                if applies(&rule, s, p).verdict == Verdict::Applies {
                    continue;
                }
                let verdict = applies(&rule, s, p).verdict;
                items.push(RuleItem {
                    scenario: Scenario::Neutral,
                    query_id: qid.clone(),
                    structure: s.clone(),
                    product: (*p).clone(),
                    rule,
                    base_label: *base,
                    expected_label: *base,
                    neutral_kind: Some(verdict),
                });
                n[2] += 1;
            }
        }
        if n == want {
            break;
        }
    }
    if n != want {
        return Err(Error::InsufficientWorld(format!("constructed {n:?} of requested {want:?} items")));
    }
    items.sort_by_key(|i| i.scenario);
    Ok(items)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IfMetrics {
    pub acc_total: f64,
    pub acc_up: f64,
    pub acc_down: f64,
    pub acc_neutral: f64,
}

pub fn evaluate_instruction_following<F>(scorer: F, set: &[RuleItem]) -> Result<IfMetrics>
where
    F: Fn(&RuleItem) -> RelevanceLabel,
{
    if set.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut hit = [0usize; 3];
    let mut tot = [0usize; 3];
    for it in set {
        let k = it.scenario as usize;
        tot[k] += 1;
        if scorer(it) == it.expected_label {
            hit[k] += 1;
        }
    }
    let acc = |k: usize| if tot[k] == 0 { 0.0 } else { hit[k] as f64 / tot[k] as f64 };
    Ok(IfMetrics {
        acc_total: hit.iter().sum::<usize>() as f64 / set.len() as f64,
        acc_up: acc(0),
        acc_down: acc(1),
        acc_neutral: acc(2),
    })
}

/// The deterministic interpreter path.
pub fn interpreter_scorer(it: &RuleItem) -> RelevanceLabel {
    let base = Prediction::one_hot(it.base_label, 0.0, SourceStage::Fine);
    apply_rules(&base, &[(0, &it.rule)], &it.structure, &it.product).prediction.label
}

/// Applies the rule's action whenever a rule is present.
pub fn always_obey_scorer(it: &RuleItem) -> RelevanceLabel {
    it.rule.action.apply(it.base_label)
}

/// Softmax classifier over rule-match features; the smallest model that
/// shows rule hypersensitivity when trained on positives only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleClassifier {
    pub weights: Vec<[f64; 4]>,
}

const N_RULE_FEATS: usize = 1 + 4 + 12 + 3 + 3;

fn prim_idx(p: Primitive) -> usize {
    match p {
        Primitive::Inclusion => 0,
        Primitive::Exclusion => 1,
        Primitive::Scoping => 2,
    }
}

pub fn rule_features(it: &RuleItem) -> Vec<usize> {
    let pi = prim_idx(it.rule.primitive);
    let b = it.base_label.index();
    let mut f = vec![0, 1 + b, 5 + pi * 4 + b];
    if it.rule.query_scope.matches_query(&it.structure) {
        f.push(17 + pi);
    }
    if it.rule.product_fires(&it.product) {
        f.push(20 + pi);
    }
    f
}

impl RuleClassifier {
    pub fn train(items: &[RuleItem], iterations: usize, lr: f64) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::EmptySet);
        }
        let feats: Vec<Vec<usize>> = items.iter().map(rule_features).collect();
        let mut w = vec![[0.0; 4]; N_RULE_FEATS];
        let (mut m, mut v) = (vec![[0.0; 4]; N_RULE_FEATS], vec![[0.0; 4]; N_RULE_FEATS]);
        let n = items.len() as f64;
        for t in 1..=iterations {
            let mut g = vec![[0.0; 4]; N_RULE_FEATS];
            for (f, it) in feats.iter().zip(items) {
                let p = softmax(&logits(&w, f));
                for k in 0..4 {
                    let d = (p[k] - if k == it.expected_label.index() { 1.0 } else { 0.0 }) / n;
                    for &j in f {
                        g[j][k] += d;
                    }
                }
            }
            let c1 = 1.0 - 0.9f64.powi(t as i32);
            let c2 = 1.0 - 0.999f64.powi(t as i32);
            for j in 0..N_RULE_FEATS {
                for k in 0..4 {
                    m[j][k] = 0.9 * m[j][k] + 0.1 * g[j][k];
                    v[j][k] = 0.999 * v[j][k] + 0.001 * g[j][k] * g[j][k];
                    w[j][k] -= lr * (m[j][k] / c1) / ((v[j][k] / c2).sqrt() + 1e-8);
                }
            }
        }
        Ok(Self { weights: w })
    }

    pub fn predict(&self, it: &RuleItem) -> RelevanceLabel {
        let o = logits(&self.weights, &rule_features(it));
        Prediction::from_scores(softmax(&o), SourceStage::RuleAdjusted).label
    }
}

fn logits(w: &[[f64; 4]], f: &[usize]) -> [f64; 4] {
    let mut o = [0.0; 4];
    for &j in f {
        for k in 0..4 {
            o[k] += w[j][k];
        }
    }
    o
}

fn softmax(o: &[f64; 4]) -> [f64; 4] {
    let m = o.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p = [0.0; 4];
    let mut z = 0.0;
    for k in 0..4 {
        p[k] = (o[k] - m).exp();
        z += p[k];
    }
    p.map(|x| x / z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::query::WorldLexicons;

    fn product(leaf: &str, dept: &str, brand: Option<&str>) -> Product {
        Product {
            id: "p1".into(),
            title: "t".into(),
            category_path: vec![dept.into(), leaf.into()],
            brand: brand.map(Into::into),
            attributes: BTreeMap::new(),
            visual_tags: vec![],
        }
    }

    fn parse(t: &str) -> QueryStructure {
        parse_query(t, &WorldLexicons::default())
    }

    #[test]
    fn applicability_examples() {
        let nike_ban = Rule::exclusion("r1", Pattern::category("shoes"), Pattern::brand("nike"), "Nike shoes cannot be shown");
        let adidas = product("basketball_shoes", "shoes", Some("adidas"));
        let s = parse("basketball shoes");
        assert_eq!(applies(&nike_ban, &s, &adidas).verdict, Verdict::ObjectMismatch);
        let base = Prediction::one_hot(RelevanceLabel::STRONG, 0.1, SourceStage::Fine);
        assert_eq!(apply_rules(&base, &[(1, &nike_ban)], &s, &adidas).prediction, base);

        let sets = Rule::exclusion("r2", Pattern::category("clothing_sets"), Pattern::category("clothing_sets"), "x");
        assert_eq!(applies(&sets, &parse("headphones"), &product("headphones", "electronics", None)).verdict, Verdict::ScenarioMismatch);

        let tanks = Rule::exclusion(
            "r3",
            Pattern::category("womens_blouses"),
            Pattern::category("womens_tanks_camis"),
            "blouse queries cannot show women's tanks and camis",
        );
        let cami = product("womens_tanks_camis", "clothing", None);
        let s = parse("blusas de mujer sexy");
        assert_eq!(applies(&tanks, &s, &cami).verdict, Verdict::Applies);
        let out = apply_rules(&Prediction::one_hot(RelevanceLabel::RELEVANT, 0.1, SourceStage::Fine), &[(1, &tanks)], &s, &cami);
        assert_eq!(out.prediction.label, RelevanceLabel::IRRELEVANT);
        assert_eq!(out.prediction.source_stage, SourceStage::RuleAdjusted);
    }

    #[test]
    fn inclusion_is_a_floor() {
        let r = Rule::inclusion("r", Pattern::default(), Pattern::default(), "");
        let s = parse("sandals");
        let p = product("sandals", "shoes", None);
        let base = Prediction::one_hot(RelevanceLabel::STRONG, 0.1, SourceStage::Fine);
        assert_eq!(apply_rules(&base, &[(0, &r)], &s, &p).prediction.label, RelevanceLabel::STRONG);
        let base = Prediction::one_hot(RelevanceLabel::IRRELEVANT, 0.1, SourceStage::Fine);
        assert_eq!(apply_rules(&base, &[(0, &r)], &s, &p).prediction.label, RelevanceLabel::RELEVANT);
    }

    #[test]
    fn same_priority_tie_breaks_by_id() {
        let a = Rule::inclusion("a", Pattern::default(), Pattern::default(), "");
        let b = Rule::exclusion("b", Pattern::default(), Pattern::default(), "");
        let s = parse("sandals");
        let p = product("sandals", "shoes", None);
        let base = Prediction::one_hot(RelevanceLabel::WEAK, 0.1, SourceStage::Fine);
        let out = apply_rules(&base, &[(1, &b), (1, &a)], &s, &p);
        assert_eq!(out.applied.as_deref(), Some("a"));
        assert!(out.same_priority_conflict);
        let out = apply_rules(&base, &[(1, &a), (2, &b)], &s, &p);
        assert_eq!(out.applied.as_deref(), Some("b"));
        assert!(!out.same_priority_conflict);
    }

    #[test]
    fn validate_rejects_inconsistent_actions() {
        let mut r = Rule::exclusion("x", Pattern::default(), Pattern::default(), "");
        r.action = RuleAction::Floor(RelevanceLabel::RELEVANT);
        assert!(r.validate().is_err());
        let mut r = Rule::inclusion("x", Pattern::default(), Pattern::default(), "");
        r.action = RuleAction::Floor(RelevanceLabel::WEAK);
        assert!(r.validate().is_err());
    }
}
