//! Feature hashing shared by every head.
//!
//! Queries and products share one namespace (`t:` tokens, `c:` leaf, `d:`
//! department, `b:` brand, `a:` attribute) so an exact-title product and its
//! query start close together before any training.

use crate::domain::Product;
use crate::model::query::tokenize;
use crate::model::QueryStructure;
use crate::util::fnv1a;
use crate::world::lexicon;
use crate::world::oracle::{pair_facts, Relation};

fn bucket(feature: &str, buckets: usize) -> usize {
    (fnv1a(feature.as_bytes()) % buckets as u64) as usize
}

fn structure_features(s: &QueryStructure, out: &mut Vec<String>) {
    for c in &s.category_intent {
        out.push(format!("c:{c}"));
        if let Some(l) = lexicon::leaf(c) {
            out.push(format!("d:{}", l.dept));
        }
    }
    if let Some(b) = &s.brand {
        out.push(format!("b:{b}"));
    }
    for (k, v) in &s.attributes {
        out.push(format!("a:{k}={v}"));
    }
}

pub fn query_feature_names(text: &str, language: &str, s: &QueryStructure) -> Vec<String> {
    let mut out: Vec<String> = tokenize(text).into_iter().map(|t| format!("t:{t}")).collect();
    structure_features(s, &mut out);
    if !out.is_empty() && language != "en" {
        out.push(format!("lang:{language}"));
    }
    out
}

pub fn product_feature_names(p: &Product) -> Vec<String> {
    let mut out: Vec<String> = tokenize(&p.title).into_iter().map(|t| format!("t:{t}")).collect();
    if let Some(leaf) = p.category_path.last() {
        out.push(format!("c:{leaf}"));
    }
    if let Some(dept) = p.category_path.first() {
        if p.category_path.len() > 1 {
            out.push(format!("d:{dept}"));
        }
    }
    if let Some(b) = &p.brand {
        out.push(format!("b:{b}"));
    }
    for (k, v) in &p.attributes {
        out.push(format!("a:{k}={v}"));
    }
    out
}

fn rel(r: Relation) -> &'static str {
    match r {
        Relation::Match => "m",
        Relation::Mismatch => "x",
        Relation::NoIntent => "n",
    }
}

/// Pair-level relation features for the fine head.
pub fn cross_feature_names(s: &QueryStructure, p: &Product) -> Vec<String> {
    let f = pair_facts(s, p);
    let qleaf = s.category().unwrap_or("-");
    let pleaf = p.leaf();
    let sig = format!(
        "{}{}{}c{}m{}k{}{}",
        rel(f.category),
        rel(f.brand),
        if f.brand_unverified { "u" } else { "" },
        f.attr_conflicts.min(2),
        f.attr_missing.min(2),
        u8::from(f.kids_product),
        u8::from(f.query_has_audience),
    );
    let same_dept = match (lexicon::leaf(qleaf), p.category_path.first()) {
        (Some(l), Some(d)) => l.dept == d,
        _ => false,
    };
    vec![
        "x:bias".to_string(),
        format!("x:cat={}", rel(f.category)),
        format!("x:brand={}{}", rel(f.brand), if f.brand_unverified { "u" } else { "" }),
        format!("x:conf={}", f.attr_conflicts.min(2)),
        format!("x:miss={}", f.attr_missing.min(2)),
        format!("x:match={}", f.attr_matched.min(3)),
        format!("x:kids={}{}", u8::from(f.kids_product), u8::from(f.query_has_audience)),
        format!("x:dept={}", u8::from(same_dept)),
        format!("x:sig={sig}"),
        format!("x:leaf={qleaf}|sig={sig}"),
        format!("x:leaf={qleaf}|pleaf={pleaf}"),
    ]
}

pub fn hash_all(names: &[String], buckets: usize) -> Vec<usize> {
    names.iter().map(|n| bucket(n, buckets)).collect()
}
