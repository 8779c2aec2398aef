//! Query understanding: typo correction and lexicon-based structure parsing.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::domain::CategoryId;
use crate::model::corpus::{Sample, SampleProvenance};
use crate::world::lexicon::{self, ATTR_CLASSES, DEPARTMENTS, LEAVES};

/// Structured reading of a query.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QueryStructure {
    #[serde(default)]
    pub category_intent: Vec<CategoryId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub brand: Option<String>,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrected_text: Option<String>,
}

impl QueryStructure {
    pub fn is_empty(&self) -> bool {
        self.category_intent.is_empty() && self.brand.is_none() && self.attributes.is_empty()
    }

    pub fn category(&self) -> Option<&str> {
        self.category_intent.first().map(String::as_str)
    }

    /// Same structure with the correction dropped, for keying.
    pub fn normalized(&self) -> QueryStructure {
        QueryStructure { corrected_text: None, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LexEntry {
    Category(CategoryId),
    Brand(String),
    Attribute { class: String, value: String },
}

/// Phrase lexicon for longest-match parsing, covering every language tag in
/// the world.
#[derive(Debug, Clone)]
pub struct Lexicon {
    phrases: BTreeMap<Vec<String>, LexEntry>,
    max_len: usize,
    words: BTreeSet<String>,
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| c.is_whitespace() || c == ',' || c == '.' || c == '&')
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

impl Lexicon {
    /// Lexicon for the built-in catalog vocabulary.
    pub fn catalog() -> Self {
        let mut lx = Lexicon { phrases: BTreeMap::new(), max_len: 1, words: BTreeSet::new() };
        for leaf in LEAVES {
            lx.insert(leaf.term_en, LexEntry::Category(leaf.id.to_string()));
            lx.insert(leaf.term_es, LexEntry::Category(leaf.id.to_string()));
            lx.insert(leaf.title_term, LexEntry::Category(leaf.id.to_string()));
        }
        for (_, brands) in DEPARTMENTS {
            for b in *brands {
                lx.insert(b, LexEntry::Brand(b.to_string()));
            }
        }
        for class in ATTR_CLASSES {
            for (en, es) in class.values {
                let e = LexEntry::Attribute { class: class.name.into(), value: en.to_string() };
                lx.insert(en, e.clone());
                lx.insert(es, e);
            }
        }
        lx
    }

    fn insert(&mut self, phrase: &str, entry: LexEntry) {
        let toks = tokenize(phrase);
        if toks.is_empty() {
            return;
        }
        self.max_len = self.max_len.max(toks.len());
        self.words.extend(toks.iter().cloned());
        self.phrases.entry(toks).or_insert(entry);
    }

    pub fn contains_word(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn lookup(&self, phrase: &[String]) -> Option<&LexEntry> {
        self.phrases.get(phrase)
    }

    /// Greedy longest-match segmentation into structure.
    pub fn extract(&self, text: &str) -> QueryStructure {
        let toks = tokenize(text);
        let mut s = QueryStructure::default();
        let mut i = 0;
        while i < toks.len() {
            let mut matched = 0;
            for len in (1..=self.max_len.min(toks.len() - i)).rev() {
                if let Some(entry) = self.phrases.get(&toks[i..i + len]) {
                    match entry {
                        LexEntry::Category(c) => {
                            if !s.category_intent.contains(c) {
                                s.category_intent.push(c.clone());
                            }
                        }
                        LexEntry::Brand(b) => {
                            s.brand.get_or_insert_with(|| b.clone());
                        }
                        LexEntry::Attribute { class, value } => {
                            s.attributes.entry(class.clone()).or_insert_with(|| value.clone());
                        }
                    }
                    matched = len;
                    break;
                }
            }
            i += matched.max(1);
        }
        s
    }
}

impl Default for Lexicon {
    fn default() -> Self {
        Self::catalog()
    }
}

/// Lexicons plus the mined typo table.
#[derive(Debug, Clone, Default)]
pub struct WorldLexicons {
    pub lexicon: Lexicon,
    pub typo_table: BTreeMap<String, String>,
}

/// Corrects via the typo table first, then extracts structure from the
/// corrected form. Unknown words are ignored.
pub fn parse_query(text: &str, lex: &WorldLexicons) -> QueryStructure {
    let key = text.trim().to_lowercase();
    match lex.typo_table.get(&key) {
        Some(corrected) => {
            let mut s = lex.lexicon.extract(corrected);
            s.corrected_text = Some(corrected.clone());
            s
        }
        None => lex.lexicon.extract(&key),
    }
}

/// Adds, for each sample whose query has a known correction, a copy with the
/// corrected query text and unchanged product supervision.
pub fn augment_corrections(corpus: &[Sample], typo_table: &BTreeMap<String, String>) -> Vec<Sample> {
    let mut out = corpus.to_vec();
    let existing: BTreeSet<String> = corpus.iter().map(|s| s.id.clone()).collect();
    for s in corpus {
        if let Some(corrected) = typo_table.get(&s.query_text.to_lowercase()) {
            let id = format!("{}+qc", s.id);
            if existing.contains(&id) {
                continue;
            }
            out.push(Sample {
                id,
                query_text: corrected.clone(),
                provenance: SampleProvenance::Correction,
                ..s.clone()
            });
        }
    }
    out
}

/// Category ids known to the lexicon.
pub fn known_category(id: &str) -> bool {
    lexicon::leaf(id).is_some()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::RelevanceLabel;

    #[test]
    fn longest_match_parse() {
        let lx = WorldLexicons::default();
        let s = parse_query("nike basketball shoes", &lx);
        assert_eq!(s.brand.as_deref(), Some("nike"));
        assert_eq!(s.category_intent, vec!["basketball_shoes".to_string()]);
        let s = parse_query("blusas de mujer sexy", &lx);
        assert_eq!(s.category(), Some("womens_blouses"));
        assert_eq!(s.attributes.get("style").map(String::as_str), Some("sexy"));
        let s = parse_query("nike high-top basketball shoes", &lx);
        assert_eq!(s.attributes.get("style").map(String::as_str), Some("high-top"));
    }

    #[test]
    fn no_hit_gives_empty_structure() {
        let lx = WorldLexicons::default();
        let s = parse_query("lorax costume", &lx);
        assert!(s.is_empty());
        assert!(s.corrected_text.is_none());
    }

    #[test]
    fn typo_table_applies_first() {
        let mut lx = WorldLexicons::default();
        lx.typo_table.insert("nikke basketbal shoes".into(), "nike basketball shoes".into());
        let s = parse_query("nikke basketbal shoes", &lx);
        assert_eq!(s.corrected_text.as_deref(), Some("nike basketball shoes"));
        assert_eq!(s.brand.as_deref(), Some("nike"));
        assert_eq!(s.category(), Some("basketball_shoes"));
    }

    fn sample(id: &str, q: &str, p: &str) -> Sample {
        Sample {
            id: id.into(),
            query_id: format!("q-{q}"),
            query_text: q.into(),
            product_id: p.into(),
            label: RelevanceLabel::STRONG,
            provenance: SampleProvenance::Initial,
            cycle: 0,
        }
    }

    #[test]
    fn augmentation_counts() {
        let corpus = vec![
            sample("s1", "nikke shoes", "p1"),
            sample("s2", "nikke shoes", "p2"),
            sample("s3", "nikke shoes", "p3"),
            sample("s4", "sandals", "p4"),
        ];
        let mut typos = BTreeMap::new();
        assert_eq!(augment_corrections(&corpus, &typos), corpus);
        typos.insert("nikke shoes".to_string(), "nike shoes".to_string());
        let aug = augment_corrections(&corpus, &typos);
        assert_eq!(aug.len(), corpus.len() + 3);
        assert!(aug[4..].iter().all(|s| s.query_text == "nike shoes" && s.label == RelevanceLabel::STRONG));
        assert_eq!(aug[4].product_id, "p1");
    }
}
