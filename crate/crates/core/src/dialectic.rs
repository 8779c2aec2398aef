//! Bounded User/Annotator negotiation and three-way outcome routing.
//!
//! A round is one user turn followed by one annotator turn. The user side
//! never receives the standards: [`UserView`] has no field for them.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::annotator::{standard_view, AnnotateContext, Annotator};
use crate::domain::{Case, CaseProvenance, ClauseTag, Prediction, Product, Query, RelevanceLabel};
use crate::error::{Error, Result};
use crate::util::unit_draw;
use crate::world::oracle::{self, fires, pair_facts};
use crate::world::tools::Tools;
use crate::world::World;

pub const MAX_ROUNDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    User,
    Annotator,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Argument {
    /// A published clause backing the position.
    ClauseCitation { clause_id: String },
    /// An observable property of the pair.
    Fact { tag: ClauseTag, text: String },
    Precedent { memory_id: String },
    Intuition { text: String },
    Concession,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub round: usize,
    pub speaker: Speaker,
    pub position: RelevanceLabel,
    pub argument: Argument,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutcomeKind {
    Consensus { label: RelevanceLabel, justified_by_s: bool },
    NoConsensus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusOutcome {
    pub kind: OutcomeKind,
    pub consensus_label: Option<RelevanceLabel>,
    /// Fact that moved the annotator, when one did.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decisive_fact: Option<ClauseTag>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialecticTranscript {
    pub case_id: String,
    pub turns: Vec<Turn>,
    pub round_count: usize,
    pub outcome: ConsensusOutcome,
}

impl DialecticTranscript {
    /// Structural invariants: bounded rounds, strict alternation starting
    /// with the user, two turns per round.
    pub fn well_formed(&self) -> bool {
        self.round_count <= MAX_ROUNDS
            && self.turns.len() == 2 * self.round_count
            && self.turns.iter().enumerate().all(|(i, t)| {
                t.round == i / 2 + 1 && t.speaker == if i % 2 == 0 { Speaker::User } else { Speaker::Annotator }
            })
            && match self.outcome.kind {
                OutcomeKind::Consensus { label, .. } => self.outcome.consensus_label == Some(label),
                OutcomeKind::NoConsensus => self.outcome.consensus_label.is_none(),
            }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteKind {
    StandardEvolution,
    ModelError,
    Exempt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutedAction {
    pub kind: RouteKind,
    /// Set for no-consensus outcomes sent to human review.
    pub low_confidence: bool,
}

pub fn route_outcome(outcome: &ConsensusOutcome, online: &Prediction) -> RoutedAction {
    match outcome.kind {
        OutcomeKind::NoConsensus => RoutedAction { kind: RouteKind::StandardEvolution, low_confidence: true },
        OutcomeKind::Consensus { justified_by_s: false, .. } => RoutedAction { kind: RouteKind::StandardEvolution, low_confidence: false },
        OutcomeKind::Consensus { label, justified_by_s: true } if label != online.label => {
            RoutedAction { kind: RouteKind::ModelError, low_confidence: false }
        }
        OutcomeKind::Consensus { .. } => RoutedAction { kind: RouteKind::Exempt, low_confidence: false },
    }
}

/// What the user agent sees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserView {
    pub query: Query,
    pub product: Product,
}

pub trait UserPolicy: Send + Sync {
    fn open(&self, view: &UserView) -> Result<(RelevanceLabel, Argument)>;
    fn reply(&self, view: &UserView, mine: RelevanceLabel, other: &Turn) -> Result<(RelevanceLabel, Argument)>;
}

pub trait AnnotatorPolicy {
    fn open(&self, q: &Query, d: &Product) -> Result<(RelevanceLabel, Argument)>;
    fn reply(&self, q: &Query, d: &Product, mine: RelevanceLabel, other: &Turn) -> Result<(RelevanceLabel, Argument)>;
    /// Label derivable from the published clauses and active directives.
    fn standard_label(&self, q: &Query, d: &Product) -> RelevanceLabel;
}

/// Shopper proxy: judges by the world's ground truth with seeded slips.
/// Transient slips are dropped when the annotator cites a rule; persistent
/// ones are held.
#[derive(Clone)]
pub struct MockUser {
    pub world: Arc<World>,
    pub noise: f64,
    pub persistent_share: f64,
    pub seed: u64,
}

impl MockUser {
    pub fn new(world: Arc<World>, noise: f64, seed: u64) -> Self {
        Self { world, noise, persistent_share: 0.5, seed }
    }

    fn truth(&self, v: &UserView) -> Result<(RelevanceLabel, ClauseTag)> {
        let p = self.world.product(&v.product.id).map_err(|e| Error::PolicyFailure(e.to_string()))?;
        Ok(self.world.oracle.label(&self.world.intent_for(&v.query), p))
    }

    /// (position, slipped, persistent)
    fn belief(&self, v: &UserView) -> Result<(RelevanceLabel, bool, bool)> {
        let (truth, _) = self.truth(v)?;
        let parts = [v.query.text.as_str(), v.product.id.as_str()];
        let u = unit_draw(self.seed, &[&["user-slip"][..], &parts[..]].concat());
        if u >= self.noise {
            return Ok((truth, false, false));
        }
        let up = match truth.value() {
            0 => true,
            3 => false,
            _ => unit_draw(self.seed, &[&["user-dir"][..], &parts[..]].concat()) < 0.5,
        };
        let persistent = unit_draw(self.seed, &[&["user-persist"][..], &parts[..]].concat()) < self.persistent_share;
        Ok((RelevanceLabel::saturating(truth.value() as i32 + if up { 1 } else { -1 }), true, persistent))
    }
}

impl UserPolicy for MockUser {
    fn open(&self, view: &UserView) -> Result<(RelevanceLabel, Argument)> {
        let (l, _, _) = self.belief(view)?;
        Ok((l, Argument::Intuition { text: format!("as a shopper I would rate this {}", l.name()) }))
    }

    fn reply(&self, view: &UserView, mine: RelevanceLabel, other: &Turn) -> Result<(RelevanceLabel, Argument)> {
        if other.position == mine {
            return Ok((mine, Argument::Concession));
        }
        let (belief, slipped, persistent) = self.belief(view)?;
        if slipped {
            let cited = matches!(other.argument, Argument::ClauseCitation { .. } | Argument::Precedent { .. });
            if cited && !persistent {
                return Ok((other.position, Argument::Concession));
            }
            return Ok((belief, Argument::Intuition { text: "this still does not look right to me".into() }));
        }
        let (_, tag) = self.truth(view)?;
        Ok((belief, Argument::Fact { tag, text: oracle::clause_text(tag).to_string() }))
    }
}

/// Annotator side backed by the annotation agent.
pub struct AnnotatorAgent<'a> {
    pub annotator: &'a Annotator,
    pub tools: &'a dyn Tools,
    pub ctx: AnnotateContext<'a>,
}

impl AnnotatorAgent<'_> {
    fn precedent(&self, q: &Query, d: &Product) -> Option<(String, RelevanceLabel)> {
        let mem = self.ctx.memory?;
        mem.precedent_for(&q.text, &d.id)
            .filter(|(e, _)| e.authority >= crate::annotator::PRECEDENT_AUTHORITY)
            .map(|(e, l)| (e.id.clone(), l))
    }
}

impl AnnotatorPolicy for AnnotatorAgent<'_> {
    fn open(&self, q: &Query, d: &Product) -> Result<(RelevanceLabel, Argument)> {
        let r = self.annotator.annotate(self.tools, q, d, &self.ctx).map_err(|e| Error::PolicyFailure(e.to_string()))?;
        let arg = match r.precedent {
            Some(memory_id) => Argument::Precedent { memory_id },
            None => Argument::ClauseCitation { clause_id: r.clause_id },
        };
        Ok((r.label, arg))
    }

    fn reply(&self, q: &Query, d: &Product, mine: RelevanceLabel, other: &Turn) -> Result<(RelevanceLabel, Argument)> {
        if let Some((memory_id, l)) = self.precedent(q, d) {
            return Ok((l, Argument::Precedent { memory_id }));
        }
        if other.position == mine {
            return Ok((mine, Argument::Concession));
        }
        let summary = crate::annotator::ground_query(q, self.tools, &self.annotator.lex);
        if let Argument::Fact { tag, .. } = &other.argument {
            if fires(*tag, &pair_facts(&summary.structure, d)) && tag.label() == other.position {
                return Ok((other.position, Argument::Fact { tag: *tag, text: "verified on the product".into() }));
            }
        }
        let (_, tag) = oracle::standard_label(self.ctx.standards, &summary.structure, d);
        Ok((mine, Argument::ClauseCitation { clause_id: oracle::clause(tag).clause_id }))
    }

    fn standard_label(&self, q: &Query, d: &Product) -> RelevanceLabel {
        let summary = crate::annotator::ground_query(q, self.tools, &self.annotator.lex);
        let req = self.annotator.request(&summary, q, d, &self.ctx);
        standard_view(&req).0
    }
}

/// Runs the negotiation for one pair.
pub fn negotiate(
    case_id: &str,
    user: &dyn UserPolicy,
    annotator: &dyn AnnotatorPolicy,
    q: &Query,
    d: &Product,
    max_rounds: usize,
) -> Result<DialecticTranscript> {
    if max_rounds == 0 || max_rounds > MAX_ROUNDS {
        return Err(Error::InvalidConfig(format!("max_rounds must be in 1..={MAX_ROUNDS}")));
    }
    let view = UserView { query: q.clone(), product: d.clone() };
    let mut turns: Vec<Turn> = Vec::new();
    let (mut u, ua) = user.open(&view)?;
    turns.push(Turn { round: 1, speaker: Speaker::User, position: u, argument: ua });
    let (mut a, aa) = annotator.open(q, d)?;
    turns.push(Turn { round: 1, speaker: Speaker::Annotator, position: a, argument: aa });
    let mut round = 1;
    while u != a && round < max_rounds {
        round += 1;
        let last_a = turns.last().cloned().expect("annotator turn present");
        let (nu, arg) = user.reply(&view, u, &last_a)?;
        u = nu;
        turns.push(Turn { round, speaker: Speaker::User, position: u, argument: arg });
        let last_u = turns.last().cloned().expect("user turn present");
        let (na, arg) = annotator.reply(q, d, a, &last_u)?;
        a = na;
        turns.push(Turn { round, speaker: Speaker::Annotator, position: a, argument: arg });
    }
    let decisive_fact = turns.iter().rev().find_map(|t| match (&t.speaker, &t.argument) {
        (Speaker::Annotator, Argument::Fact { tag, .. }) => Some(*tag),
        _ => None,
    });
    let outcome = if u == a {
        let justified = annotator.standard_label(q, d) == u;
        ConsensusOutcome { kind: OutcomeKind::Consensus { label: u, justified_by_s: justified }, consensus_label: Some(u), decisive_fact }
    } else {
        ConsensusOutcome { kind: OutcomeKind::NoConsensus, consensus_label: None, decisive_fact }
    };
    Ok(DialecticTranscript { case_id: case_id.to_string(), turns, round_count: round, outcome })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialecticRecord {
    pub case: Case,
    pub transcript: DialecticTranscript,
    pub route: RoutedAction,
}

/// One negotiation per candidate; a policy failure drops only that
/// candidate and is reported in the second list.
pub fn run_dialectic(
    q: &Query,
    candidates: &[(Product, Prediction)],
    user: &dyn UserPolicy,
    annotator: &dyn AnnotatorPolicy,
    standards_version: u32,
    case_prefix: &str,
    max_rounds: usize,
) -> (Vec<DialecticRecord>, Vec<(String, Error)>) {
    let mut done = Vec::new();
    let mut failed = Vec::new();
    for (i, (d, online)) in candidates.iter().enumerate() {
        let case_id = format!("{case_prefix}-{i:03}");
        match negotiate(&case_id, user, annotator, q, d, max_rounds) {
            Ok(transcript) => {
                let route = route_outcome(&transcript.outcome, online);
                let case = Case {
                    id: case_id,
                    query: q.clone(),
                    product_id: d.id.clone(),
                    reference_label: transcript.outcome.consensus_label,
                    online_prediction: online.clone(),
                    provenance: CaseProvenance::Dialectic,
                    standards_version,
                };
                done.push(DialecticRecord { case, transcript, route });
            }
            Err(e) => failed.push((case_id, e)),
        }
    }
    (done, failed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiningMetrics {
    /// None when nothing was emitted.
    pub precision: Option<f64>,
    pub recall: f64,
    pub emitted: usize,
    pub true_positives: usize,
    pub reference: usize,
}

/// Precision and recall of model-error emissions against a reference set
/// of bad-case keys.
pub fn mining_metrics<K: Ord + Clone>(emitted: &[(K, RouteKind)], reference: &BTreeSet<K>) -> Result<MiningMetrics> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    let model: BTreeSet<K> = emitted.iter().filter(|(_, r)| *r == RouteKind::ModelError).map(|(k, _)| k.clone()).collect();
    let tp = model.intersection(reference).count();
    Ok(MiningMetrics {
        precision: if model.is_empty() { None } else { Some(tp as f64 / model.len() as f64) },
        recall: tp as f64 / reference.len() as f64,
        emitted: model.len(),
        true_positives: tp,
        reference: reference.len(),
    })
}
