//! Closed-loop iteration engine: sample, annotate, mine, repair, retrain,
//! guard, deploy. Also hosts the case, directive and proposal workflows the
//! service exposes.

pub mod store;
mod workflows;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use workflows::{CaseSubmission, HumanVerdict, Metrics, OptimizeOutput};

use crate::annotator::{grm_train, grm_training_data, AnnotateContext, Annotator, GrmParams, GrmTrainConfig, MockJudge};
use crate::deep_search::AssociationStore;
use crate::dialectic::{
    mining_metrics, run_dialectic, AnnotatorAgent, Argument, DialecticRecord, DialecticTranscript, MiningMetrics, MockUser, OutcomeKind,
    RouteKind, RoutedAction, Speaker,
};
use crate::domain::{Case, CaseProvenance, ClauseTag, Directive, Prediction, Product, Query, QueryId, RelevanceLabel, StandardsDoc, Tick};
use crate::error::{Error, Result};
use crate::memory::{distill, MemoryStore, Resolution};
use crate::model::corpus::{Corpus, Sample, SampleProvenance};
use crate::model::{train_multitask, EmbeddingIndex, LabeledPair, Model, ModelCheckpoint, TrainConfig};
use crate::optimizer::{self, diagnose, probe, refine, ProbeConfig, ProbeEnv, RefineConfig};
use crate::par::{self, ExecMode};
use crate::records;
use crate::serving::{consistency_stats, serve, ConsistencyStat, FineCounter, ServeContext, ServingConfig, ServingLog, ServingView};
use crate::util::rng_for;
use crate::world::oracle;
use crate::world::{generate_world, EvalPair, Split, World, WorldConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuardConfig {
    /// Largest tolerated absolute drop in golden-set accuracy.
    pub max_regression: f64,
    /// Consecutive skips that trip the breaker.
    pub breaker_limit: usize,
}

impl Default for GuardConfig {
    fn default() -> Self {
        Self { max_regression: 0.02, breaker_limit: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub world: WorldConfig,
    /// Queries drawn from training traffic per cycle (before dedup).
    pub traffic_queries: usize,
    pub serving: ServingConfig,
    pub judge_epsilon: f64,
    pub annotator_k: usize,
    pub train_grm: bool,
    pub grm_pairs: usize,
    pub user_noise: f64,
    pub max_rounds: usize,
    pub train: TrainConfig,
    pub guard: GuardConfig,
    pub golden_per_query: usize,
    pub refine: RefineConfig,
    pub probe: ProbeConfig,
    pub enable_probe: bool,
    /// Simulated standards owner: approves proposals that restate a clause
    /// of the ground-truth standard and rejects the rest.
    pub auto_approve_proposals: bool,
    /// Test hook: abort the cycle at the named stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail_at_stage: Option<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            traffic_queries: 60,
            serving: ServingConfig::default(),
            judge_epsilon: 0.1,
            annotator_k: 4,
            train_grm: true,
            grm_pairs: 300,
            user_noise: 0.1,
            max_rounds: crate::dialectic::MAX_ROUNDS,
            train: TrainConfig::default(),
            guard: GuardConfig::default(),
            golden_per_query: 3,
            refine: RefineConfig::default(),
            probe: ProbeConfig::default(),
            enable_probe: true,
            auto_approve_proposals: true,
            fail_at_stage: None,
        }
    }
}

pub const STAGES: &[&str] = &["sample", "annotate", "dialectic", "optimize", "update", "train", "guard", "evaluate"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Promoted,
    SkippedAnomaly,
    BreakerTripped,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BreakerState {
    pub consecutive_skips: usize,
    pub tripped: bool,
}

/// Picks the best candidate (lowest index on ties) and applies the anomaly
/// guard and circuit breaker. Returns the decision and the promoted index.
pub fn select_checkpoint(candidates: &[f64], incumbent: Option<f64>, breaker: &mut BreakerState, guard: &GuardConfig) -> Result<(Decision, Option<usize>)> {
    if candidates.is_empty() {
        return Err(Error::EmptySet);
    }
    if breaker.tripped {
        return Ok((Decision::BreakerTripped, None));
    }
    let mut best = 0;
    for (i, a) in candidates.iter().enumerate() {
        if *a > candidates[best] {
            best = i;
        }
    }
    if let Some(inc) = incumbent {
        if candidates[best] < inc - guard.max_regression {
            breaker.consecutive_skips += 1;
            if breaker.consecutive_skips >= guard.breaker_limit {
                breaker.tripped = true;
                return Ok((Decision::BreakerTripped, None));
            }
            return Ok((Decision::SkippedAnomaly, None));
        }
    }
    breaker.consecutive_skips = 0;
    Ok((Decision::Promoted, Some(best)))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EngineState {
    pub cycle: u64,
    pub tick: Tick,
    /// Version of the deployed checkpoint.
    pub model_version: u64,
    /// Highest checkpoint version trained so far.
    pub trained_version: u64,
    pub incumbent_accuracy: f64,
    pub breaker: BreakerState,
    pub next_case: u64,
    pub next_proposal: u64,
    /// Model-error cases reported between cycles, repaired in the next one.
    pub pending_model_cases: Vec<String>,
    pub world_digest: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseStatus {
    Resolved,
    AwaitingHuman,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case: Case,
    pub status: CaseStatus,
    pub cycle: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub complaint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<DialecticTranscript>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub route: Option<RoutedAction>,
    pub resolution: String,
    #[serde(default)]
    pub citations: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<HumanVerdict>,
    /// Consensus reached and it disagrees with the online prediction.
    pub discovered: bool,
    /// Deployed model's prediction at the end of the case's cycle.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_prediction: Option<RelevanceLabel>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state")]
pub enum ProposalStatus {
    Open,
    Approved { at: Tick },
    Rejected { at: Tick, reason: String },
}

/// Standard-refinement suggestion awaiting review.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proposal {
    pub id: String,
    pub tag: ClauseTag,
    pub clause_draft: String,
    pub proposed_label: RelevanceLabel,
    pub supporting_cases: Vec<String>,
    pub status: ProposalStatus,
    pub created_at: Tick,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub query_id: QueryId,
    pub product_id: String,
    pub predicted: RelevanceLabel,
    pub reference: RelevanceLabel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrawlRecord {
    pub query_id: QueryId,
    pub product_id: String,
    pub online: RelevanceLabel,
    pub annotated: RelevanceLabel,
    /// Ground truth, kept for mining audits only.
    pub oracle: RelevanceLabel,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteCounts {
    pub model_error: usize,
    pub standard_evolution: usize,
    pub exempt: usize,
    pub no_consensus: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub cycle_id: u64,
    pub crawled: usize,
    pub discovered: usize,
    pub discovery_rate: f64,
    pub resolved: usize,
    /// None when nothing was discovered.
    pub resolution_rate: Option<f64>,
    pub d_full_prev: usize,
    pub d_inc: usize,
    pub dedup_count: usize,
    pub d_full: usize,
    pub corrections: usize,
    pub routes: RouteCounts,
    pub feature_side_cases: usize,
    pub probe_cases: usize,
    pub proposals_opened: usize,
    pub proposals_approved: usize,
    pub standards_version: u32,
    pub fine_calls: usize,
    pub candidate_version: u64,
    pub candidate_accuracy: f64,
    pub incumbent_accuracy: f64,
    pub decision: Decision,
    pub deployed_version: u64,
    pub bad_rate_before: f64,
    pub bad_rate_after: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mining: Option<MiningMetrics>,
}

/// Everything a run owns. Cloning is how cycles get rollback: work happens
/// on a clone that replaces the original only after a successful commit.
#[derive(Clone)]
pub struct Engine {
    pub world: Arc<World>,
    pub config: PipelineConfig,
    pub state: EngineState,
    pub corpus: Corpus,
    pub standards: StandardsDoc,
    pub directives: Vec<Directive>,
    pub proposals: Vec<Proposal>,
    pub cases: Vec<CaseRecord>,
    pub memory: MemoryStore,
    pub grm: GrmParams,
    pub reports: Vec<CycleReport>,
    pub serving_logs: Vec<ServingLog>,
    pub consistency: BTreeMap<QueryId, ConsistencyStat>,
    pub associations: AssociationStore,
    pub golden: Vec<EvalPair>,
    pub exec: ExecMode,
    model: Model,
    index: Arc<EmbeddingIndex>,
    dir: Option<PathBuf>,
}

/// Oracle-labeled pairs from training queries used by the checkpoint guard.
pub fn golden_set(world: &World, per_query: usize) -> Vec<EvalPair> {
    let mut out = Vec::new();
    for wq in world.queries_in(Split::Train) {
        let mut rng = rng_for(world.seed(), &["golden", &wq.query.id]);
        let same: Vec<&Product> = wq.intent.category().map(|l| world.products_in_leaf(l).collect()).unwrap_or_default();
        let mut chosen: BTreeSet<&str> = BTreeSet::new();
        for i in 0..per_query {
            let p = if i % 3 != 2 && !same.is_empty() { same[rng.gen_range(0..same.len())] } else { &world.products[rng.gen_range(0..world.products.len())] };
            if chosen.insert(p.id.as_str()) {
                let label = world.oracle.label(&wq.intent, p).0;
                out.push(EvalPair { query_id: wq.query.id.clone(), product_id: p.id.clone(), label });
            }
        }
    }
    out
}

impl Engine {
    /// Fresh run: world, initial corpus, reward model and first checkpoint.
    pub fn init(config: PipelineConfig, dir: Option<&Path>, exec: ExecMode) -> Result<Self> {
        config.world.validate()?;
        let world = Arc::new(generate_world(&config.world)?);
        let judge = MockJudge { epsilon: config.judge_epsilon, seed: world.seed() };
        let grm = if config.train_grm {
            let data = grm_training_data(&world, &judge, config.grm_pairs, config.annotator_k, Split::Train, "grm")?;
            grm_train(&data, &GrmTrainConfig::default())?
        } else {
            GrmParams::default()
        };
        let corpus = Corpus::new(world.initial_corpus.clone());
        let pairs = labeled_pairs(&world, &corpus.samples)?;
        let ckpt = train_multitask(&pairs, world.lexicons(), &config.train, 1)?;
        let model = Model::new(ckpt, world.lexicons().clone());
        let index = Arc::new(model.build_index(&world.serving_products, exec));
        let golden = golden_set(&world, config.golden_per_query);
        let standards = world.published_standards();
        let mut e = Self {
            state: EngineState { model_version: 1, trained_version: 1, world_digest: world.digest()?, ..Default::default() },
            world,
            config,
            corpus,
            standards,
            directives: Vec::new(),
            proposals: Vec::new(),
            cases: Vec::new(),
            memory: MemoryStore::in_memory(),
            grm,
            reports: Vec::new(),
            serving_logs: Vec::new(),
            consistency: BTreeMap::new(),
            associations: AssociationStore::default(),
            golden,
            exec,
            model,
            index,
            dir: dir.map(Path::to_path_buf),
        };
        e.state.incumbent_accuracy = e.golden_accuracy(&e.model)?;
        let eval = e.evaluate_heldout(&e.model)?;
        if let Some(d) = e.dir.clone() {
            store::commit(&d, |s| {
                e.write_all(s)?;
                records::write_jsonl(&s.join(store::eval_file(0)), &eval)
            })?;
        }
        Ok(e)
    }

    /// Loads a persisted run. The world is regenerated from its config and
    /// checked against the recorded digest.
    pub fn open(dir: &Path, exec: ExecMode) -> Result<Self> {
        store::recover(dir)?;
        let config: PipelineConfig = records::read_json(&dir.join(store::CONFIG))?;
        let state: EngineState = records::read_json(&dir.join(store::STATE))?;
        let world = Arc::new(generate_world(&config.world)?);
        if world.digest()? != state.world_digest {
            return Err(Error::CorruptRecord { path: dir.join(store::CONFIG).display().to_string(), reason: "world digest mismatch".into() });
        }
        let ckpt = ModelCheckpoint::load(&dir.join(store::MODEL))?;
        let model = Model::new(ckpt, world.lexicons().clone());
        let index = Arc::new(model.build_index(&world.serving_products, exec));
        Ok(Self {
            corpus: Corpus::new(records::read_jsonl(&dir.join(store::CORPUS))?),
            standards: records::read_json(&dir.join(store::STANDARDS))?,
            directives: records::read_jsonl_or_empty(&dir.join(store::DIRECTIVES))?,
            proposals: records::read_jsonl_or_empty(&dir.join(store::PROPOSALS))?,
            cases: records::read_jsonl_or_empty(&dir.join(store::CASES))?,
            memory: MemoryStore::load_detached(&dir.join(store::MEMORY_DIR))?,
            grm: records::read_json(&dir.join(store::GRM))?,
            reports: records::read_jsonl_or_empty(&dir.join(store::REPORTS))?,
            serving_logs: records::read_jsonl_or_empty(&dir.join(store::SERVING_LOGS))?,
            consistency: records::read_jsonl_or_empty::<ConsistencyStat>(&dir.join(store::CONSISTENCY))?
                .into_iter()
                .map(|s| (s.query_id.clone(), s))
                .collect(),
            associations: AssociationStore::load(&dir.join(store::ASSOCIATIONS))?,
            golden: records::read_jsonl(&dir.join(store::GOLDEN))?,
            world,
            config,
            state,
            exec,
            model,
            index,
            dir: Some(dir.to_path_buf()),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn index(&self) -> &EmbeddingIndex {
        &self.index
    }

    pub fn annotator(&self) -> Annotator {
        let judge = MockJudge { epsilon: self.config.judge_epsilon, seed: self.world.seed() };
        Annotator::new(Arc::new(judge), self.grm.clone(), self.config.annotator_k, self.world.lexicons().clone())
    }

    pub fn user(&self) -> MockUser {
        MockUser::new(self.world.clone(), self.config.user_noise, self.world.seed())
    }

    fn write_all(&self, s: &Path) -> Result<()> {
        records::write_json(&s.join(store::CONFIG), &self.config)?;
        records::write_json(&s.join(store::STATE), &self.state)?;
        records::write_jsonl(&s.join(store::CORPUS), &self.corpus.samples)?;
        records::write_json(&s.join(store::STANDARDS), &self.standards)?;
        records::write_jsonl(&s.join(store::DIRECTIVES), &self.directives)?;
        records::write_jsonl(&s.join(store::PROPOSALS), &self.proposals)?;
        records::write_jsonl(&s.join(store::CASES), &self.cases)?;
        self.memory.save_to(&s.join(store::MEMORY_DIR))?;
        records::write_json(&s.join(store::GRM), &self.grm)?;
        records::write_jsonl(&s.join(store::REPORTS), &self.reports)?;
        records::write_jsonl(&s.join(store::SERVING_LOGS), &self.serving_logs)?;
        records::write_jsonl(&s.join(store::CONSISTENCY), self.consistency.values())?;
        self.associations.save(&s.join(store::ASSOCIATIONS))?;
        records::write_jsonl(&s.join(store::GOLDEN), &self.golden)?;
        self.model.checkpoint().save(&s.join(store::MODEL))
    }

    /// Persists the whole state (no-op without a directory).
    pub fn persist(&self) -> Result<()> {
        match &self.dir {
            Some(d) => store::commit(d, |s| self.write_all(s)),
            None => Ok(()),
        }
    }

    fn stage(&self, name: &'static str) -> Result<()> {
        if self.config.fail_at_stage.as_deref() == Some(name) {
            return Err(Error::StageFailed { stage: name, reason: "injected failure".into() });
        }
        Ok(())
    }

    fn set_model(&mut self, ckpt: ModelCheckpoint) {
        self.model = Model::new(ckpt, self.world.lexicons().clone());
        self.index = Arc::new(self.model.build_index(&self.world.serving_products, self.exec));
    }

    /// Accuracy of `model` on the golden set.
    pub fn golden_accuracy(&self, model: &Model) -> Result<f64> {
        if self.golden.is_empty() {
            return Err(Error::EmptySample("golden set is empty"));
        }
        let hits = par::try_map(self.exec, &self.golden, |g| -> Result<bool> {
            let q = self.world.query(&g.query_id)?;
            Ok(model.fine_base(q, self.world.serving_product(&g.product_id)?).label == g.label)
        })?;
        Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
    }

    /// Online predictions on the held-out split.
    pub fn evaluate_heldout(&self, model: &Model) -> Result<Vec<EvalRecord>> {
        let now = self.state.tick;
        par::try_map(self.exec, &self.world.heldout, |e| -> Result<EvalRecord> {
            let q = self.world.query(&e.query_id)?;
            let d = self.world.serving_product(&e.product_id)?;
            let p = model.fine_score(q, d, &self.standards, &self.directives, now);
            Ok(EvalRecord { query_id: e.query_id.clone(), product_id: e.product_id.clone(), predicted: p.label, reference: e.label })
        })
    }

    /// Current online prediction for a pair, directives included.
    pub fn score(&self, q: &Query, product_id: &str) -> Result<Prediction> {
        let d = self.world.serving_product(product_id)?;
        Ok(self.model.fine_score(q, d, &self.standards, &self.directives, self.state.tick))
    }

    pub fn held_out_bad_rate(records: &[EvalRecord]) -> Result<f64> {
        if records.is_empty() {
            return Err(Error::EmptySample("bad rate over zero pairs"));
        }
        Ok(records.iter().filter(|r| r.predicted != r.reference).count() as f64 / records.len() as f64)
    }

    /// One full cycle. Nothing is kept unless every stage and the commit
    /// succeed.
    pub fn run_cycle(&mut self) -> Result<CycleReport> {
        let mut next = self.clone();
        let (report, artifacts) = next.cycle_inner()?;
        if let Some(d) = &self.dir {
            store::commit(d, |s| {
                next.write_all(s)?;
                for (rel, bytes) in &artifacts {
                    let p = s.join(rel);
                    if let Some(parent) = p.parent() {
                        std::fs::create_dir_all(parent)?;
                    }
                    std::fs::write(p, bytes)?;
                }
                Ok(())
            })?;
        }
        *self = next;
        Ok(report)
    }

    fn annotate_ctx(&self) -> AnnotateContext<'_> {
        AnnotateContext { standards: &self.standards, directives: &self.directives, now: self.state.tick, memory: Some(&self.memory) }
    }

    fn annotate_pairs(&self, annotator: &Annotator, pairs: &[(Query, String)]) -> Result<Vec<RelevanceLabel>> {
        let ctx = self.annotate_ctx();
        par::try_map(self.exec, pairs, |(q, pid)| -> Result<RelevanceLabel> {
            let d = self.world.product(pid)?;
            Ok(annotator.annotate(self.world.as_ref(), q, d, &ctx)?.label)
        })
    }

    fn next_case_id(&mut self, prefix: &str) -> String {
        self.state.next_case += 1;
        format!("{prefix}{:06}", self.state.next_case)
    }

    /// Opens or extends a proposal for a standard-evolution outcome.
    fn propose(&mut self, rec: &CaseRecord) -> Option<String> {
        let t = rec.transcript.as_ref()?;
        let tag = t.outcome.decisive_fact.or_else(|| {
            t.turns.iter().rev().find_map(|turn| match (&turn.speaker, &turn.argument) {
                (Speaker::User, Argument::Fact { tag, .. }) => Some(*tag),
                _ => None,
            })
        })?;
        if self.standards.has_tag(tag) {
            return None;
        }
        if let Some(p) = self.proposals.iter_mut().find(|p| p.tag == tag && p.status == ProposalStatus::Open) {
            if !p.supporting_cases.contains(&rec.case.id) {
                p.supporting_cases.push(rec.case.id.clone());
            }
            return Some(p.id.clone());
        }
        self.state.next_proposal += 1;
        let id = format!("prop-{:04}", self.state.next_proposal);
        self.proposals.push(Proposal {
            id: id.clone(),
            tag,
            clause_draft: oracle::clause_text(tag).to_string(),
            proposed_label: tag.label(),
            supporting_cases: vec![rec.case.id.clone()],
            status: ProposalStatus::Open,
            created_at: self.state.tick,
        });
        Some(id)
    }

    /// Case record for a finished negotiation, with its memory distillation.
    fn record_dialectic(&mut self, r: DialecticRecord, complaint: Option<String>, force_human: bool) -> Result<CaseRecord> {
        let citations: Vec<String> = r
            .transcript
            .turns
            .iter()
            .filter_map(|t| match &t.argument {
                Argument::ClauseCitation { clause_id } => Some(clause_id.clone()),
                Argument::Precedent { memory_id } => Some(memory_id.clone()),
                _ => None,
            })
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let no_consensus = matches!(r.transcript.outcome.kind, OutcomeKind::NoConsensus);
        let awaiting = no_consensus || force_human;
        let resolution = match (r.route.kind, awaiting) {
            (_, true) if no_consensus => "escalated to human review: no consensus".to_string(),
            (_, true) => "escalated to human review on request".to_string(),
            (RouteKind::Exempt, _) => format!("working as intended per {}", citations.join(", ")),
            (RouteKind::ModelError, _) => "queued for model update".to_string(),
            (RouteKind::StandardEvolution, _) => "standard refinement suggested".to_string(),
        };
        let discovered = r.case.reference_label.is_some_and(|l| l != r.case.online_prediction.label);
        let mut rec = CaseRecord {
            case: r.case,
            status: if awaiting { CaseStatus::AwaitingHuman } else { CaseStatus::Resolved },
            cycle: self.state.cycle,
            complaint,
            transcript: Some(r.transcript),
            route: Some(r.route),
            resolution,
            citations,
            verdict: None,
            discovered,
            post_prediction: None,
        };
        if r.route.kind == RouteKind::StandardEvolution {
            if let Some(pid) = self.propose(&rec) {
                rec.resolution = format!("{}; proposal {pid}", rec.resolution);
            }
        }
        if !awaiting {
            self.distill_case(&rec, false)?;
        }
        Ok(rec)
    }

    fn distill_case(&mut self, rec: &CaseRecord, human: bool) -> Result<()> {
        let draft = rec.transcript.as_ref().and_then(|t| t.outcome.decisive_fact).map(|t| oracle::clause_text(t).to_string());
        let res = Resolution {
            case_id: rec.case.id.clone(),
            query_text: rec.case.query.text.clone(),
            product_id: rec.case.product_id.clone(),
            route: rec.route.map(|r| r.kind),
            settled_label: rec.case.reference_label,
            citations: rec.citations.clone(),
            clause_draft: draft,
            human,
            at: self.state.tick,
        };
        for e in distill(&res)? {
            self.memory.write_entry(e)?;
        }
        Ok(())
    }

    /// Simulated reviewer pass over open proposals.
    fn review_proposals(&mut self) -> Result<usize> {
        let mut approved = 0;
        let hidden: Vec<ClauseTag> = self.world.oracle.hidden_clauses.iter().map(|c| c.tag).collect();
        let open: Vec<String> = self.proposals.iter().filter(|p| p.status == ProposalStatus::Open).map(|p| p.id.clone()).collect();
        for id in open {
            let tag = self.proposals.iter().find(|p| p.id == id).map(|p| p.tag).ok_or(Error::EmptySet)?;
            if hidden.contains(&tag) {
                self.approve_proposal_inner(&id)?;
                approved += 1;
            } else {
                self.reject_proposal_inner(&id, "not adopted by the standards owner")?;
            }
        }
        Ok(approved)
    }

    fn cycle_inner(&mut self) -> Result<(CycleReport, Vec<(PathBuf, Vec<u8>)>)> {
        let t = self.state.cycle + 1;
        self.state.cycle = t;
        self.state.tick += 1;
        let mut artifacts: Vec<(PathBuf, Vec<u8>)> = Vec::new();
        let before = Self::held_out_bad_rate(&self.evaluate_heldout(&self.model)?)?;
        let standards_at_start = self.standards.version;

        // sample and serve
        self.stage("sample")?;
        let mut seen = BTreeSet::new();
        let queries: Vec<Query> = self
            .world
            .sample_queries(Split::Train, self.config.traffic_queries, &format!("cycle-{t}"))
            .into_iter()
            .filter(|wq| seen.insert(wq.query.id.clone()))
            .map(|wq| wq.query.clone())
            .collect();
        let counter = FineCounter::default();
        let served = {
            let lookup = ServingView(&self.world);
            let ctx = ServeContext {
                model: &self.model,
                index: &self.index,
                products: &lookup,
                standards: &self.standards,
                directives: &self.directives,
                now: self.state.tick,
                stats: &self.consistency,
                cache: None,
                associations: Some(&self.associations),
                window_id: t,
                mode: self.exec,
            };
            par::try_map(self.exec, &queries, |q| serve(q, &ctx, &self.config.serving, &counter))?
        };
        let logs: Vec<ServingLog> = served.iter().flat_map(|r| r.logs.iter().cloned()).collect();
        let mut crawl_pairs: Vec<(Query, String)> = Vec::new();
        let mut online: Vec<Prediction> = Vec::new();
        for (q, r) in queries.iter().zip(&served) {
            for it in &r.items {
                crawl_pairs.push((q.clone(), it.product_id.clone()));
                online.push(it.prediction.clone());
            }
        }

        // annotate
        self.stage("annotate")?;
        let annotator = self.annotator();
        let mut annotated = self.annotate_pairs(&annotator, &crawl_pairs)?;

        // dialectic on disagreements
        self.stage("dialectic")?;
        let mut records: Vec<DialecticRecord> = Vec::new();
        {
            let user = self.user();
            let agent = AnnotatorAgent { annotator: &annotator, tools: self.world.as_ref(), ctx: self.annotate_ctx() };
            let mut i = 0;
            while i < crawl_pairs.len() {
                let q = &crawl_pairs[i].0;
                let mut cands = Vec::new();
                let mut j = i;
                while j < crawl_pairs.len() && crawl_pairs[j].0.id == q.id {
                    if annotated[j] != online[j].label {
                        cands.push((self.world.product(&crawl_pairs[j].1)?.clone(), online[j].clone()));
                    }
                    j += 1;
                }
                if !cands.is_empty() {
                    let prefix = format!("c{t:04}-{}", q.id);
                    let (done, failed) = run_dialectic(q, &cands, &user, &agent, self.standards.version, &prefix, self.config.max_rounds);
                    if let Some((id, e)) = failed.into_iter().next() {
                        return Err(Error::StageFailed { stage: "dialectic", reason: format!("{id}: {e}") });
                    }
                    records.extend(done);
                }
                i = j;
            }
        }
        let mut routes = RouteCounts::default();
        let mut emitted = Vec::new();
        let mut consensus: BTreeMap<(String, String), RelevanceLabel> = BTreeMap::new();
        let mut cycle_cases: Vec<String> = Vec::new();
        let proposals_before = self.proposals.len();
        for r in records {
            match (&r.transcript.outcome.kind, r.route.kind) {
                (OutcomeKind::NoConsensus, _) => routes.no_consensus += 1,
                (_, RouteKind::ModelError) => routes.model_error += 1,
                (_, RouteKind::StandardEvolution) => routes.standard_evolution += 1,
                (_, RouteKind::Exempt) => routes.exempt += 1,
            }
            emitted.push(((r.case.query.id.clone(), r.case.product_id.clone()), r.route.kind));
            if let Some(l) = r.case.reference_label {
                consensus.insert((r.case.query.id.clone(), r.case.product_id.clone()), l);
            }
            let rec = self.record_dialectic(r, None, false)?;
            cycle_cases.push(rec.case.id.clone());
            self.cases.push(rec);
        }
        let proposals_opened = self.proposals.len() - proposals_before;
        let proposals_approved = if self.config.auto_approve_proposals { self.review_proposals()? } else { 0 };
        if self.standards.version != standards_at_start {
            annotated = self.annotate_pairs(&annotator, &crawl_pairs)?;
        }

        // supervision from the crawl: re-annotated pairs correct in place
        self.stage("update")?;
        let d_full_prev = self.corpus.len();
        let mut by_pair: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
        for (i, s) in self.corpus.samples.iter().enumerate() {
            by_pair.entry((s.query_text.to_lowercase(), s.product_id.clone())).or_default().push(i);
        }
        let mut corrections = 0;
        let mut additions: Vec<Sample> = Vec::new();
        for (k, (q, pid)) in crawl_pairs.iter().enumerate() {
            let settled = consensus.get(&(q.id.clone(), pid.clone())).copied();
            let label = settled.unwrap_or(annotated[k]);
            match by_pair.get(&(q.text.to_lowercase(), pid.clone())) {
                Some(idx) => {
                    for &i in idx {
                        if self.corpus.samples[i].label != label {
                            self.corpus.samples[i].label = label;
                            corrections += 1;
                        }
                    }
                }
                None => additions.push(Sample {
                    id: format!("s{t}-{}-{pid}", q.id),
                    query_id: q.id.clone(),
                    query_text: q.text.clone(),
                    product_id: pid.clone(),
                    label,
                    provenance: if settled.is_some() { SampleProvenance::Correction } else { SampleProvenance::Sampled },
                    cycle: t,
                }),
            }
        }
        let mut d_inc = additions.len();
        let mut dedup_count = self.corpus.merge(&additions);

        // optimizer on model-side failures
        self.stage("optimize")?;
        let mut model_cases: Vec<Case> = Vec::new();
        let pending: BTreeSet<String> = std::mem::take(&mut self.state.pending_model_cases).into_iter().collect();
        for rec in &self.cases {
            let this_cycle = rec.cycle == t && rec.case.provenance == CaseProvenance::Dialectic && cycle_cases.contains(&rec.case.id);
            let is_model = rec.route.map(|r| r.kind) == Some(RouteKind::ModelError) && rec.status == CaseStatus::Resolved;
            if is_model && (this_cycle || pending.contains(&rec.case.id)) {
                model_cases.push(rec.case.clone());
            }
        }
        let mut feature_side_cases = 0;
        let mut probe_cases = 0;
        if !model_cases.is_empty() {
            let lex = self.world.lexicons().clone();
            let (c_feat, c_model, report) = diagnose(&model_cases, self.world.as_ref(), &lex)?;
            feature_side_cases = c_feat.len();
            let ctx = self.annotate_ctx();
            let world = self.world.clone();
            let mut labeler = |q: &Query, d: &Product| -> Result<RelevanceLabel> { Ok(annotator.annotate(world.as_ref(), q, d, &ctx)?.label) };
            let delta = refine(&c_model, &report, &self.corpus, world.as_ref(), &lex, &mut labeler, t, &self.config.refine)?;
            let mut probe_out = None;
            if self.config.enable_probe && report.has_model_side_tag() {
                let model = &self.model;
                let online_fn = |q: &Query, d: &Product| -> Result<Prediction> {
                    Ok(model.fine_score(q, world.serving_product(&d.id)?, ctx.standards, ctx.directives, ctx.now))
                };
                let reference_fn = |q: &Query, d: &Product| -> Result<RelevanceLabel> { Ok(annotator.annotate(world.as_ref(), q, d, &ctx)?.label) };
                let env = ProbeEnv { online: &online_fn, reference: &reference_fn, catalog: world.as_ref(), lex: &lex, standards_version: self.standards.version };
                probe_out = Some(probe(&report, &c_model, &env, &self.config.probe)?);
            }
            let mut probe_samples = Vec::new();
            let mut probe_records = Vec::new();
            if let Some(p) = &probe_out {
                for c in &p.new_cases {
                    let Some(l) = c.reference_label else { continue };
                    probe_samples.push(Sample {
                        id: format!("p{t}-{}", c.id),
                        query_id: c.query.id.clone(),
                        query_text: c.query.text.clone(),
                        product_id: c.product_id.clone(),
                        label: l,
                        provenance: SampleProvenance::Probe,
                        cycle: t,
                    });
                    probe_records.push(CaseRecord {
                        case: c.clone(),
                        status: CaseStatus::Resolved,
                        cycle: t,
                        complaint: None,
                        transcript: None,
                        route: Some(RoutedAction { kind: RouteKind::ModelError, low_confidence: false }),
                        resolution: "replicated by probing".into(),
                        citations: Vec::new(),
                        verdict: None,
                        discovered: false,
                        post_prediction: None,
                    });
                }
            }
            corrections += delta.corrections.len();
            d_inc += delta.additions.len();
            dedup_count += delta.apply(&mut self.corpus)?;
            d_inc += probe_samples.len();
            dedup_count += self.corpus.merge(&probe_samples);
            probe_cases = probe_records.len();
            self.cases.extend(probe_records);
            let dir = store::cycle_dir(t);
            artifacts.push((dir.join("diagnosis.json"), records::to_line(&report)?.into_bytes()));
            artifacts.push((dir.join("delta.json"), records::to_line(&delta)?.into_bytes()));
            if let Some(p) = &probe_out {
                artifacts.push((dir.join("probe.json"), records::to_line(p)?.into_bytes()));
            }
        }

        // train and guard
        self.stage("train")?;
        let pairs = labeled_pairs(&self.world, &self.corpus.samples)?;
        self.state.trained_version += 1;
        let candidate_version = self.state.trained_version;
        let ckpt = train_multitask(&pairs, self.world.lexicons(), &self.config.train, candidate_version)?;
        let candidate = Model::new(ckpt.clone(), self.world.lexicons().clone());
        self.stage("guard")?;
        let candidate_accuracy = self.golden_accuracy(&candidate)?;
        let incumbent_accuracy = self.state.incumbent_accuracy;
        let (decision, _) = select_checkpoint(&[candidate_accuracy], Some(incumbent_accuracy), &mut self.state.breaker, &self.config.guard)?;
        if decision == Decision::Promoted {
            self.set_model(ckpt);
            self.state.model_version = candidate_version;
            self.state.incumbent_accuracy = candidate_accuracy;
        }

        // evaluate the deployed model
        self.stage("evaluate")?;
        let eval = self.evaluate_heldout(&self.model)?;
        let after = Self::held_out_bad_rate(&eval)?;
        artifacts.push((store::eval_file(t), records::encode(&eval)?.into_bytes()));
        let mut discovered = 0;
        let mut resolved = 0;
        let world = self.world.clone();
        let model = self.model.clone();
        for rec in self.cases.iter_mut().filter(|r| r.cycle == t && r.case.provenance == CaseProvenance::Dialectic) {
            if !rec.discovered {
                continue;
            }
            discovered += 1;
            let p = model.fine_score(&rec.case.query, world.serving_product(&rec.case.product_id)?, &self.standards, &self.directives, self.state.tick);
            rec.post_prediction = Some(p.label);
            if Some(p.label) == rec.case.reference_label {
                resolved += 1;
            }
        }
        let mut crawl = Vec::with_capacity(crawl_pairs.len());
        for (k, (q, pid)) in crawl_pairs.iter().enumerate() {
            crawl.push(CrawlRecord {
                query_id: q.id.clone(),
                product_id: pid.clone(),
                online: online[k].label,
                annotated: annotated[k],
                oracle: self.world.oracle_label_ids(&q.id, pid)?,
            });
        }
        let truly_bad: BTreeSet<(String, String)> =
            crawl.iter().filter(|c| c.online != c.oracle).map(|c| (c.query_id.clone(), c.product_id.clone())).collect();
        let mining = mining_metrics(&emitted, &truly_bad).ok();
        artifacts.push((store::crawl_file(t), records::encode(&crawl)?.into_bytes()));
        self.consistency = consistency_stats(&logs, self.config.serving.min_support, t);
        self.serving_logs = logs;
        let report = CycleReport {
            cycle_id: t,
            crawled: crawl.len(),
            discovered,
            discovery_rate: if crawl.is_empty() { 0.0 } else { discovered as f64 / crawl.len() as f64 },
            resolved,
            resolution_rate: if discovered == 0 { None } else { Some(resolved as f64 / discovered as f64) },
            d_full_prev,
            d_inc,
            dedup_count,
            d_full: self.corpus.len(),
            corrections,
            routes,
            feature_side_cases,
            probe_cases,
            proposals_opened,
            proposals_approved,
            standards_version: self.standards.version,
            fine_calls: counter.get(),
            candidate_version,
            candidate_accuracy,
            incumbent_accuracy,
            decision,
            deployed_version: self.state.model_version,
            bad_rate_before: before,
            bad_rate_after: after,
            mining,
        };
        self.reports.push(report.clone());
        Ok((report, artifacts))
    }
}

/// Training pairs over the serving view of each sampled product.
pub fn labeled_pairs(world: &World, samples: &[Sample]) -> Result<Vec<LabeledPair>> {
    samples
        .iter()
        .map(|s| {
            Ok(LabeledPair {
                query: optimizer::sample_query(s, world)?,
                product: world.serving_product(&s.product_id)?.clone(),
                label: s.label,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn guard_rules() {
        let g = GuardConfig::default();
        let mut b = BreakerState::default();
        assert_eq!(select_checkpoint(&[0.9], Some(0.8), &mut b, &g).unwrap(), (Decision::Promoted, Some(0)));
        assert_eq!(select_checkpoint(&[0.75], Some(0.8), &mut b, &g).unwrap().0, Decision::SkippedAnomaly);
        assert_eq!(select_checkpoint(&[0.75], Some(0.8), &mut b, &g).unwrap().0, Decision::SkippedAnomaly);
        assert_eq!(select_checkpoint(&[0.75], Some(0.8), &mut b, &g).unwrap().0, Decision::BreakerTripped);
        assert!(b.tripped);
        assert_eq!(select_checkpoint(&[0.99], Some(0.8), &mut b, &g).unwrap().0, Decision::BreakerTripped);
        assert!(select_checkpoint(&[], None, &mut b, &g).is_err());
        let mut b = BreakerState::default();
        assert_eq!(select_checkpoint(&[0.79], Some(0.8), &mut b, &g).unwrap().0, Decision::Promoted);
        assert_eq!(select_checkpoint(&[0.5, 0.7, 0.7], None, &mut b, &g).unwrap(), (Decision::Promoted, Some(1)));
    }
}
