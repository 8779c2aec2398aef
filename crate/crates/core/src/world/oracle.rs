//! Rule-table relevance standard.
//!
//! The same evaluator backs the hidden ground truth (all clauses) and the
//! published standards (the subset agents can read). A label is the label of
//! the first clause, in [`ClauseTag::PRECEDENCE`] order, that is both active
//! and fires on the pair.

use serde::{Deserialize, Serialize};

use crate::domain::{Clause, ClauseTag, Product, RelevanceLabel, StandardsDoc};
use crate::model::QueryStructure;

pub const AUDIENCE: &str = "audience";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Relation {
    Match,
    Mismatch,
    NoIntent,
}

/// Observable facts about a (query intent, product) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PairFacts {
    pub category: Relation,
    pub brand: Relation,
    /// Query asks for a brand the product does not declare.
    pub brand_unverified: bool,
    pub attr_conflicts: usize,
    pub attr_missing: usize,
    pub attr_matched: usize,
    pub kids_product: bool,
    pub query_has_audience: bool,
}

pub fn pair_facts(intent: &QueryStructure, product: &Product) -> PairFacts {
    let category = if intent.category_intent.is_empty() {
        Relation::NoIntent
    } else if intent.category_intent.iter().any(|c| c == product.leaf()) {
        Relation::Match
    } else {
        Relation::Mismatch
    };
    let (brand, brand_unverified) = match (&intent.brand, &product.brand) {
        (None, _) => (Relation::NoIntent, false),
        (Some(q), Some(p)) if q == p => (Relation::Match, false),
        (Some(_), Some(_)) => (Relation::Mismatch, false),
        (Some(_), None) => (Relation::NoIntent, true),
    };
    let mut conflicts = 0;
    let mut missing = 0;
    let mut matched = 0;
    for (k, v) in &intent.attributes {
        match product.attributes.get(k) {
            Some(pv) if pv == v => matched += 1,
            Some(_) => conflicts += 1,
            // an item without an audience tag is an adult item
            None if k == AUDIENCE => conflicts += 1,
            None => missing += 1,
        }
    }
    PairFacts {
        category,
        brand,
        brand_unverified,
        attr_conflicts: conflicts,
        attr_missing: missing,
        attr_matched: matched,
        kids_product: product.attributes.get(AUDIENCE).map(String::as_str) == Some("kids"),
        query_has_audience: intent.attributes.contains_key(AUDIENCE),
    }
}

pub fn fires(tag: ClauseTag, f: &PairFacts) -> bool {
    match tag {
        ClauseTag::CategoryMismatch => f.category == Relation::Mismatch,
        ClauseTag::BrandConflict => f.brand == Relation::Mismatch,
        ClauseTag::AttributeConflict => f.attr_conflicts > 0,
        ClauseTag::KidsItemForAdultQuery => f.kids_product && !f.query_has_audience,
        ClauseTag::AttributeUnverified => f.attr_missing > 0 || f.brand_unverified,
        ClauseTag::FullMatch => true,
    }
}

/// Label under the active clause set plus the clause that decided it.
pub fn evaluate(active: &[ClauseTag], facts: &PairFacts) -> (RelevanceLabel, ClauseTag) {
    for tag in ClauseTag::PRECEDENCE {
        if active.contains(&tag) && fires(tag, facts) {
            return (tag.label(), tag);
        }
    }
    (RelevanceLabel::STRONG, ClauseTag::FullMatch)
}

pub fn standard_label(doc: &StandardsDoc, intent: &QueryStructure, product: &Product) -> (RelevanceLabel, ClauseTag) {
    evaluate(&doc.tags(), &pair_facts(intent, product))
}

pub fn clause_text(tag: ClauseTag) -> &'static str {
    match tag {
        ClauseTag::CategoryMismatch => {
            "If the product does not belong to the category the query asks for, it is irrelevant (0)."
        }
        ClauseTag::BrandConflict => "If the query names a brand and the product is from a different brand, it is weakly relevant (1).",
        ClauseTag::AttributeConflict => {
            "If the product contradicts an attribute the query asks for (color, material, style, audience), it is weakly relevant (1)."
        }
        ClauseTag::KidsItemForAdultQuery => {
            "Children's items shown for queries without an audience intent are only weakly relevant (1)."
        }
        ClauseTag::AttributeUnverified => {
            "If the category matches but a requested brand or attribute cannot be verified on the product, it is relevant (2)."
        }
        ClauseTag::FullMatch => "If category, brand and every requested attribute match, the product is strongly relevant (3).",
    }
}

pub fn clause(tag: ClauseTag) -> Clause {
    Clause { clause_id: format!("S.{}", tag.as_str()), text: clause_text(tag).into(), tag }
}

/// Ground-truth standard: published clauses plus clauses the published
/// document does not (yet) contain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleStandard {
    pub rules: Vec<ClauseTag>,
    pub hidden_clauses: Vec<Clause>,
}

impl OracleStandard {
    pub fn default_world() -> Self {
        Self {
            rules: ClauseTag::PRECEDENCE.to_vec(),
            hidden_clauses: vec![clause(ClauseTag::KidsItemForAdultQuery)],
        }
    }

    /// Initial published document: every rule except the hidden ones.
    pub fn published(&self) -> StandardsDoc {
        let hidden: Vec<ClauseTag> = self.hidden_clauses.iter().map(|c| c.tag).collect();
        let clauses = self.rules.iter().filter(|t| !hidden.contains(t)).map(|t| clause(*t)).collect();
        StandardsDoc { version: 1, clauses }
    }

    pub fn label(&self, intent: &QueryStructure, product: &Product) -> (RelevanceLabel, ClauseTag) {
        evaluate(&self.rules, &pair_facts(intent, product))
    }

    /// True when the decisive clause is one the published document lacks.
    pub fn hidden_decides(&self, intent: &QueryStructure, product: &Product) -> bool {
        let (_, tag) = self.label(intent, product);
        self.hidden_clauses.iter().any(|c| c.tag == tag)
    }
}
