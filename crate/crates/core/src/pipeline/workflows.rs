//! Operator workflows: case reports, adjudication, directives, proposals.
//! Every mutation runs on a clone and is committed before it becomes
//! visible, like a cycle.

use serde::{Deserialize, Serialize};

use super::{BreakerState, CaseRecord, CaseStatus, CycleReport, Engine, Proposal, ProposalStatus};
use crate::deep_search::{deep_search, gate_associations, AssociationRecord, DeepSearchConfig, ScriptedPlanner};
use crate::dialectic::{
    negotiate, route_outcome, AnnotatorAgent, AnnotatorPolicy, ConsensusOutcome, DialecticRecord, DialecticTranscript, OutcomeKind, RouteKind,
};
use crate::domain::{Case, CaseProvenance, Directive, Product, Query, RelevanceLabel};
use crate::optimizer::{diagnose, refine, DatasetDelta, DiagnosisReport};
use crate::error::{Error, Result};
use crate::rules;
use crate::util::hash_parts;
use crate::world::oracle;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSubmission {
    pub query: String,
    pub product_id: String,
    #[serde(default)]
    pub complaint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<String>,
    /// Hold the case for a human even when the agents agree.
    #[serde(default)]
    pub request_human: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanVerdict {
    pub label: RelevanceLabel,
    pub justification: String,
}

/// Result of an offline diagnose/refine pass over a batch of cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeOutput {
    pub feature_side: Vec<String>,
    pub report: DiagnosisReport,
    pub delta: DatasetDelta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub cycle: u64,
    pub tick: u64,
    pub model_version: u64,
    pub standards_version: u32,
    pub corpus_size: usize,
    pub breaker: BreakerState,
    pub cases_total: usize,
    pub cases_awaiting_human: usize,
    pub open_proposals: usize,
    pub active_directives: usize,
    pub memory_entries: usize,
    /// (cycle, bad rate before, bad rate after)
    pub bad_rate_trend: Vec<(u64, f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_report: Option<CycleReport>,
}

impl Engine {
    /// Applies `f` to a clone, bumps the logical clock, commits, swaps.
    fn mutate<R>(&mut self, f: impl FnOnce(&mut Engine) -> Result<R>) -> Result<R> {
        let mut next = self.clone();
        next.state.tick += 1;
        let out = f(&mut next)?;
        next.persist()?;
        *self = next;
        Ok(out)
    }

    pub fn case(&self, id: &str) -> Result<&CaseRecord> {
        self.cases.iter().find(|c| c.case.id == id).ok_or_else(|| Error::UnknownEntity(format!("case {id}")))
    }

    pub fn transcript(&self, id: &str) -> Result<&DialecticTranscript> {
        self.case(id)?.transcript.as_ref().ok_or_else(|| Error::UnknownEntity(format!("transcript for case {id}")))
    }

    /// Resolves free query text to a world query when one matches.
    pub fn resolve_query(&self, text: &str, language: Option<&str>) -> Result<Query> {
        if let Some(wq) = self.world.find_query_by_text(text) {
            return Ok(wq.query.clone());
        }
        let t = text.trim().to_lowercase();
        Query::new(format!("uq-{:012x}", hash_parts(&["user-query", &t]) & 0xffff_ffff_ffff), t, language.unwrap_or("en"))
    }

    /// Creates a case, runs the negotiation and routes the outcome.
    pub fn submit_case(&mut self, sub: CaseSubmission) -> Result<CaseRecord> {
        self.mutate(|e| {
            let q = e.resolve_query(&sub.query, sub.language.as_deref())?;
            let d = e.world.product(&sub.product_id)?.clone();
            let online = e.score(&q, &d.id)?;
            let id = e.next_case_id("case-");
            let annotator = e.annotator();
            let user = e.user();
            let transcript = {
                let agent = AnnotatorAgent { annotator: &annotator, tools: e.world.as_ref(), ctx: e.annotate_ctx() };
                negotiate(&id, &user, &agent, &q, &d, e.config.max_rounds)?
            };
            let route = route_outcome(&transcript.outcome, &online);
            let case = Case {
                id,
                query: q,
                product_id: d.id.clone(),
                reference_label: transcript.outcome.consensus_label,
                online_prediction: online,
                provenance: CaseProvenance::UserReport,
                standards_version: e.standards.version,
            };
            let complaint = if sub.complaint.is_empty() { None } else { Some(sub.complaint.clone()) };
            let rec = e.record_dialectic(DialecticRecord { case, transcript, route }, complaint, sub.request_human)?;
            if rec.status == CaseStatus::Resolved && route.kind == RouteKind::ModelError {
                e.state.pending_model_cases.push(rec.case.id.clone());
            }
            e.cases.push(rec.clone());
            Ok(rec)
        })
    }

    /// Human verdict on an awaiting case: overrides the agents, re-routes,
    /// and is distilled with expert authority.
    pub fn adjudicate(&mut self, case_id: &str, verdict: HumanVerdict) -> Result<CaseRecord> {
        self.mutate(|e| {
            let i = e.cases.iter().position(|c| c.case.id == case_id).ok_or_else(|| Error::UnknownEntity(format!("case {case_id}")))?;
            if e.cases[i].status != CaseStatus::AwaitingHuman {
                return Err(Error::CaseNotAwaiting(case_id.to_string()));
            }
            let q = e.cases[i].case.query.clone();
            let d = e.world.product(&e.cases[i].case.product_id)?.clone();
            let justified = {
                let annotator = e.annotator();
                let agent = AnnotatorAgent { annotator: &annotator, tools: e.world.as_ref(), ctx: e.annotate_ctx() };
                agent.standard_label(&q, &d) == verdict.label
            };
            let outcome = ConsensusOutcome {
                kind: OutcomeKind::Consensus { label: verdict.label, justified_by_s: justified },
                consensus_label: Some(verdict.label),
                decisive_fact: e.cases[i].transcript.as_ref().and_then(|t| t.outcome.decisive_fact),
            };
            let route = route_outcome(&outcome, &e.cases[i].case.online_prediction);
            {
                let rec = &mut e.cases[i];
                rec.case.reference_label = Some(verdict.label);
                rec.route = Some(route);
                rec.status = CaseStatus::Resolved;
                rec.discovered = verdict.label != rec.case.online_prediction.label;
                rec.resolution = format!("adjudicated {}: {}", verdict.label.name(), verdict.justification);
                rec.verdict = Some(verdict.clone());
            }
            let rec = e.cases[i].clone();
            e.distill_case(&rec, true)?;
            match route.kind {
                RouteKind::ModelError => e.state.pending_model_cases.push(rec.case.id.clone()),
                RouteKind::StandardEvolution => {
                    if let Some(pid) = e.propose(&rec) {
                        e.cases[i].resolution = format!("{}; proposal {pid}", e.cases[i].resolution);
                    }
                }
                RouteKind::Exempt => {}
            }
            Ok(e.cases[i].clone())
        })
    }

    pub fn add_directive(&mut self, d: Directive) -> Result<()> {
        self.mutate(|e| {
            rules::check_directive_conflict(&e.directives, &d, e.state.tick)?;
            e.directives.push(d);
            Ok(())
        })
    }

    pub fn remove_directive(&mut self, id: &str) -> Result<Directive> {
        self.mutate(|e| {
            let i = e.directives.iter().position(|d| d.id == id).ok_or_else(|| Error::UnknownEntity(format!("directive {id}")))?;
            Ok(e.directives.remove(i))
        })
    }

    pub(super) fn approve_proposal_inner(&mut self, id: &str) -> Result<Proposal> {
        let tick = self.state.tick;
        let p = self.proposals.iter_mut().find(|p| p.id == id).ok_or_else(|| Error::UnknownEntity(format!("proposal {id}")))?;
        if p.status != ProposalStatus::Open {
            return Err(Error::Conflict(format!("proposal {id} already decided")));
        }
        if self.standards.has_tag(p.tag) {
            return Err(Error::Conflict(format!("standards already carry {}", p.tag.as_str())));
        }
        self.standards = self.standards.amended(oracle::clause(p.tag))?;
        p.status = ProposalStatus::Approved { at: tick };
        Ok(p.clone())
    }

    pub(super) fn reject_proposal_inner(&mut self, id: &str, reason: &str) -> Result<Proposal> {
        let tick = self.state.tick;
        let p = self.proposals.iter_mut().find(|p| p.id == id).ok_or_else(|| Error::UnknownEntity(format!("proposal {id}")))?;
        if p.status != ProposalStatus::Open {
            return Err(Error::Conflict(format!("proposal {id} already decided")));
        }
        p.status = ProposalStatus::Rejected { at: tick, reason: reason.to_string() };
        Ok(p.clone())
    }

    /// Adds the proposed clause to the standards (version bump).
    pub fn approve_proposal(&mut self, id: &str) -> Result<Proposal> {
        self.mutate(|e| e.approve_proposal_inner(id))
    }

    pub fn reject_proposal(&mut self, id: &str, reason: &str) -> Result<Proposal> {
        self.mutate(|e| e.reject_proposal_inner(id, reason))
    }

    pub fn release_breaker(&mut self) -> Result<BreakerState> {
        self.mutate(|e| {
            e.state.breaker = BreakerState::default();
            Ok(e.state.breaker)
        })
    }

    /// Diagnoses and refines against the current corpus without applying
    /// anything.
    pub fn optimize_cases(&self, cases: &[Case]) -> Result<OptimizeOutput> {
        let lex = self.world.lexicons().clone();
        let (c_feat, c_model, report) = diagnose(cases, self.world.as_ref(), &lex)?;
        let annotator = self.annotator();
        let ctx = self.annotate_ctx();
        let world = self.world.clone();
        let mut labeler = |q: &Query, d: &Product| -> Result<RelevanceLabel> { Ok(annotator.annotate(world.as_ref(), q, d, &ctx)?.label) };
        let delta = refine(&c_model, &report, &self.corpus, world.as_ref(), &lex, &mut labeler, self.state.cycle + 1, &self.config.refine)?;
        Ok(OptimizeOutput { feature_side: c_feat.iter().map(|c| c.id.clone()).collect(), report, delta })
    }

    /// Nearline association build: deep search per query, gated by the
    /// annotator, stored for request-time pool augmentation.
    pub fn build_associations(&mut self, queries: &[Query], budget: usize) -> Result<Vec<AssociationRecord>> {
        self.mutate(|e| {
            let planner = ScriptedPlanner { lex: e.world.lexicons().clone() };
            let cfg = DeepSearchConfig { budget, ..Default::default() };
            let annotator = e.annotator();
            let mut out = Vec::with_capacity(queries.len());
            for q in queries {
                let (_, raw) = deep_search(q, &planner, e.world.as_ref(), &cfg);
                let gated = {
                    let ctx = e.annotate_ctx();
                    let world = e.world.clone();
                    let mut annotate = |pid: &str| -> Result<RelevanceLabel> { Ok(annotator.annotate(world.as_ref(), q, world.product(pid)?, &ctx)?.label) };
                    gate_associations(&raw, Some(&e.memory), &mut annotate)?
                };
                e.associations.insert(gated.clone());
                out.push(gated);
            }
            Ok(out)
        })
    }

    pub fn metrics(&self) -> Metrics {
        let now = self.state.tick;
        Metrics {
            cycle: self.state.cycle,
            tick: now,
            model_version: self.state.model_version,
            standards_version: self.standards.version,
            corpus_size: self.corpus.len(),
            breaker: self.state.breaker,
            cases_total: self.cases.len(),
            cases_awaiting_human: self.cases.iter().filter(|c| c.status == CaseStatus::AwaitingHuman).count(),
            open_proposals: self.proposals.iter().filter(|p| p.status == ProposalStatus::Open).count(),
            active_directives: self.directives.iter().filter(|d| d.is_active(now)).count(),
            memory_entries: self.memory.len(),
            bad_rate_trend: self.reports.iter().map(|r| (r.cycle_id, r.bad_rate_before, r.bad_rate_after)).collect(),
            last_report: self.reports.last().cloned(),
        }
    }
}
