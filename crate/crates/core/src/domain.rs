//! Core value types: labels, entities, standards, predictions and cases.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::QueryStructure;
use crate::rules::Rule;

pub type QueryId = String;
pub type ProductId = String;
pub type CategoryId = String;
pub type CaseId = String;

/// Logical clock: one tick per iteration cycle.
pub type Tick = u64;

/// Four-level relevance judgment, 0 (irrelevant) to 3 (strongly relevant).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct RelevanceLabel(u8);

impl RelevanceLabel {
    pub const IRRELEVANT: Self = Self(0);
    pub const WEAK: Self = Self(1);
    pub const RELEVANT: Self = Self(2);
    pub const STRONG: Self = Self(3);
    pub const ALL: [Self; 4] = [Self(0), Self(1), Self(2), Self(3)];

    pub fn new(value: u8) -> Result<Self> {
        if value <= 3 {
            Ok(Self(value))
        } else {
            Err(Error::InvalidLabel(value))
        }
    }

    /// Clamping constructor for arithmetic on labels.
    pub fn saturating(value: i32) -> Self {
        Self(value.clamp(0, 3) as u8)
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        match self.0 {
            0 => "Irrelevant",
            1 => "Weakly Relevant",
            2 => "Relevant",
            _ => "Strongly Relevant",
        }
    }
}

impl TryFrom<u8> for RelevanceLabel {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        Self::new(v)
    }
}

impl From<RelevanceLabel> for u8 {
    fn from(l: RelevanceLabel) -> u8 {
        l.0
    }
}

impl fmt::Display for RelevanceLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: QueryId,
    pub text: String,
    pub language: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structure: Option<QueryStructure>,
}

impl Query {
    pub fn new(id: impl Into<String>, text: impl Into<String>, language: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::InvalidQuery("query text is empty".into()));
        }
        Ok(Self { id: id.into(), text, language: language.into(), structure: None })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Product {
    pub id: ProductId,
    pub title: String,
    /// Department first, leaf category last.
    pub category_path: Vec<CategoryId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub brand: Option<String>,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
    /// Stand-in for image content; used by visual retrieval.
    #[serde(default)]
    pub visual_tags: Vec<String>,
}

impl Product {
    pub fn leaf(&self) -> &str {
        self.category_path.last().map(String::as_str).unwrap_or("")
    }
}

/// Machine-readable predicate behind a standards clause.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClauseTag {
    CategoryMismatch,
    BrandConflict,
    AttributeConflict,
    KidsItemForAdultQuery,
    AttributeUnverified,
    FullMatch,
}

impl ClauseTag {
    /// Evaluation order of the rule table; earlier tags take precedence.
    pub const PRECEDENCE: [ClauseTag; 6] = [
        ClauseTag::CategoryMismatch,
        ClauseTag::BrandConflict,
        ClauseTag::AttributeConflict,
        ClauseTag::KidsItemForAdultQuery,
        ClauseTag::AttributeUnverified,
        ClauseTag::FullMatch,
    ];

    pub fn label(self) -> RelevanceLabel {
        match self {
            ClauseTag::CategoryMismatch => RelevanceLabel::IRRELEVANT,
            ClauseTag::BrandConflict | ClauseTag::AttributeConflict | ClauseTag::KidsItemForAdultQuery => {
                RelevanceLabel::WEAK
            }
            ClauseTag::AttributeUnverified => RelevanceLabel::RELEVANT,
            ClauseTag::FullMatch => RelevanceLabel::STRONG,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClauseTag::CategoryMismatch => "category_mismatch",
            ClauseTag::BrandConflict => "brand_conflict",
            ClauseTag::AttributeConflict => "attribute_conflict",
            ClauseTag::KidsItemForAdultQuery => "kids_item_for_adult_query",
            ClauseTag::AttributeUnverified => "attribute_unverified",
            ClauseTag::FullMatch => "full_match",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clause {
    pub clause_id: String,
    pub text: String,
    pub tag: ClauseTag,
}

/// Published relevance standards. Versions only ever increase.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StandardsDoc {
    pub version: u32,
    pub clauses: Vec<Clause>,
}

impl StandardsDoc {
    pub fn new(version: u32, clauses: Vec<Clause>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for c in &clauses {
            if !seen.insert(c.clause_id.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate clause id {}", c.clause_id)));
            }
        }
        Ok(Self { version, clauses })
    }

    pub fn has_tag(&self, tag: ClauseTag) -> bool {
        self.clauses.iter().any(|c| c.tag == tag)
    }

    pub fn clause_for(&self, tag: ClauseTag) -> Option<&Clause> {
        self.clauses.iter().find(|c| c.tag == tag)
    }

    pub fn tags(&self) -> Vec<ClauseTag> {
        self.clauses.iter().map(|c| c.tag).collect()
    }

    /// Successor version with one more clause.
    pub fn amended(&self, clause: Clause) -> Result<Self> {
        let mut clauses = self.clauses.clone();
        clauses.push(clause);
        Self::new(self.version + 1, clauses)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub from: Tick,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub until: Option<Tick>,
}

impl TimeWindow {
    pub fn open_from(from: Tick) -> Self {
        Self { from, until: None }
    }

    pub fn contains(&self, t: Tick) -> bool {
        t >= self.from && self.until.is_none_or(|u| t < u)
    }
}

/// High-priority runtime intervention wrapping a [`Rule`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Directive {
    pub id: String,
    pub rule: Rule,
    pub priority: i32,
    pub active_window: TimeWindow,
}

impl Directive {
    pub fn is_active(&self, t: Tick) -> bool {
        self.active_window.contains(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceStage {
    Retrieval,
    Coarse,
    Fine,
    Cached,
    RuleAdjusted,
}

/// Model output for one pair. `score_vector` is a distribution over the four
/// labels and `label` is its argmax, ties going to the lower label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: RelevanceLabel,
    pub score_vector: [f64; 4],
    pub source_stage: SourceStage,
    /// Set when the argmax was decided by the lower-label tie rule.
    #[serde(default)]
    pub tie_broken: bool,
}

impl Prediction {
    /// Normalizes non-negative scores and derives the label.
    pub fn from_scores(scores: [f64; 4], source_stage: SourceStage) -> Self {
        let clean = scores.map(|s| if s.is_finite() && s > 0.0 { s } else { 0.0 });
        let total: f64 = clean.iter().sum();
        let score_vector = if total > 0.0 { clean.map(|s| s / total) } else { [0.25; 4] };
        let (label, tie_broken) = argmax_low(&score_vector);
        Self { label, score_vector, source_stage, tie_broken }
    }

    /// Label-smoothed one-hot distribution: `1 - smoothing` on `label`.
    pub fn one_hot(label: RelevanceLabel, smoothing: f64, source_stage: SourceStage) -> Self {
        let off = smoothing / 3.0;
        let mut v = [off; 4];
        v[label.index()] = 1.0 - smoothing;
        Self::from_scores(v, source_stage)
    }

    pub fn expected_label(&self) -> f64 {
        self.score_vector.iter().enumerate().map(|(i, p)| i as f64 * p).sum()
    }
}

fn argmax_low(v: &[f64; 4]) -> (RelevanceLabel, bool) {
    let mut best = 0usize;
    let mut tie = false;
    for i in 1..4 {
        if v[i] > v[best] {
            best = i;
            tie = false;
        } else if v[i] == v[best] {
            tie = true;
        }
    }
    // a tie only matters if it involves the winning value
    let tie = tie && v.iter().filter(|&&x| x == v[best]).count() > 1;
    (RelevanceLabel(best as u8), tie)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaseProvenance {
    UserReport,
    Dialectic,
    Probe,
    Evaluation,
}

/// A (query, product, reference) triple with the online prediction it was
/// observed under. The reference is frozen at the standards version the
/// case was created under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Case {
    pub id: CaseId,
    pub query: Query,
    pub product_id: ProductId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_label: Option<RelevanceLabel>,
    pub online_prediction: Prediction,
    pub provenance: CaseProvenance,
    pub standards_version: u32,
}

pub fn is_bad_case(prediction: &Prediction, reference: RelevanceLabel) -> bool {
    prediction.label != reference
}

/// Mean bad-case indicator over cases carrying reference labels.
pub fn bad_case_rate(cases: &[Case]) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::EmptySample("bad_case_rate over zero cases"));
    }
    let mut bad = 0usize;
    for c in cases {
        let reference = c
            .reference_label
            .ok_or_else(|| Error::InvalidConfig(format!("case {} has no reference label", c.id)))?;
        if is_bad_case(&c.online_prediction, reference) {
            bad += 1;
        }
    }
    Ok(bad as f64 / cases.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(l: u8) -> Prediction {
        Prediction::one_hot(RelevanceLabel::new(l).unwrap(), 0.1, SourceStage::Fine)
    }

    fn case(p: u8, r: u8) -> Case {
        Case {
            id: format!("c{p}{r}"),
            query: Query::new("q", "shoes", "en").unwrap(),
            product_id: "p".into(),
            reference_label: Some(RelevanceLabel::new(r).unwrap()),
            online_prediction: pred(p),
            provenance: CaseProvenance::Evaluation,
            standards_version: 1,
        }
    }

    #[test]
    fn bad_case_predicate() {
        assert!(!is_bad_case(&pred(2), RelevanceLabel::RELEVANT));
        assert!(is_bad_case(&pred(0), RelevanceLabel::STRONG));
        assert!(is_bad_case(&pred(1), RelevanceLabel::RELEVANT));
    }

    #[test]
    fn rate_counts_and_edges() {
        let cs = vec![case(1, 1), case(2, 2), case(3, 3), case(0, 3)];
        assert_eq!(bad_case_rate(&cs).unwrap(), 0.25);
        assert_eq!(bad_case_rate(&cs[..3]).unwrap(), 0.0);
        assert!(matches!(bad_case_rate(&[]), Err(Error::EmptySample(_))));
    }

    #[test]
    fn label_bounds() {
        assert!(RelevanceLabel::new(4).is_err());
        assert_eq!(RelevanceLabel::saturating(7), RelevanceLabel::STRONG);
        let l: RelevanceLabel = serde_json::from_str("2").unwrap();
        assert_eq!(l, RelevanceLabel::RELEVANT);
        assert!(serde_json::from_str::<RelevanceLabel>("9").is_err());
    }

    #[test]
    fn prediction_ties_go_low() {
        let p = Prediction::from_scores([0.1, 0.4, 0.4, 0.1], SourceStage::Fine);
        assert_eq!(p.label, RelevanceLabel::WEAK);
        assert!(p.tie_broken);
        let p = Prediction::from_scores([0.0, 0.0, 0.0, 0.0], SourceStage::Fine);
        assert_eq!(p.label, RelevanceLabel::IRRELEVANT);
        assert!((p.score_vector.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let p = Prediction::from_scores([1.0, 2.0, 3.0, 0.5], SourceStage::Coarse);
        assert_eq!(p.label, RelevanceLabel::RELEVANT);
        assert!(!p.tie_broken);
    }
}
