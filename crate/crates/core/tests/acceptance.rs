//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Recounts read the persisted record files as plain JSON so they
//! share no code with the engine's own bookkeeping.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use relevance_core::annotator::{grm_gradient_check, grm_objective, grm_training_data, pairwise_term, AnnotateContext, GrmData, MockJudge, N_GRM_FEATURES};
use relevance_core::deep_search::{augment_pool, deep_search, DeepSearchConfig, ScriptedPlanner};
use relevance_core::dialectic::{negotiate, route_outcome, AnnotatorAgent, ConsensusOutcome, OutcomeKind, RouteKind, Speaker, UserPolicy, UserView};
use relevance_core::domain::{Case, CaseProvenance, Prediction, Query, RelevanceLabel, SourceStage};
use relevance_core::model::net::{batch_objective, Batch, Params, TaskWeights};
use relevance_core::model::train::{featurize, fixed_batch, gradient_check, train_multitask};
use relevance_core::model::Model;
use relevance_core::par::ExecMode;
use relevance_core::pipeline::{labeled_pairs, Engine, PipelineConfig};
use relevance_core::records::digest_dir;
use relevance_core::rules::{evaluate_instruction_following, generate_contrastive_set, interpreter_scorer, RuleClassifier, Scenario, ScenarioCounts};
use relevance_core::serving::{consistency_stats, serve, CacheHit, FineCounter, RelevanceCache, ServeContext, ServingConfig, ServingView};
use relevance_core::world::{generate_world, oracle, Split, World, WorldConfig};

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;

fn world(n_products: usize, n_queries: usize) -> World {
    generate_world(&WorldConfig { n_products, n_queries, ..Default::default() }).expect("world")
}

// ---- closed loop -----------------------------------------------------------

struct LoopRun {
    engine: Engine,
    secs: f64,
}

fn closed_loop(dir: &Path) -> Result<LoopRun, relevance_core::Error> {
    let t0 = Instant::now();
    let mut e = Engine::init(PipelineConfig::default(), Some(dir), ExecMode::Parallel)?;
    for _ in 0..5 {
        e.run_cycle()?;
    }
    Ok(LoopRun { engine: e, secs: t0.elapsed().as_secs_f64() })
}

fn closed_loop_repair(run: &LoopRun) -> Outcome {
    let r = &run.engine.reports;
    let (c1_before, c1_after, c5) = (r[0].bad_rate_before, r[0].bad_rate_after, r[4].bad_rate_after);
    let trend: Vec<String> = r.iter().map(|x| format!("{:.4}", x.bad_rate_after)).collect();
    let ok = c5 <= 0.5 * c1_after && c5 <= 0.5 * c1_before && run.secs < 300.0;
    Ok((ok, format!("cycle-1 before {c1_before:.4} after {c1_after:.4}; per-cycle after [{}]; cycle-5 {c5:.4}; {:.1}s", trend.join(", "), run.secs)))
}

// ---- injected pattern --------------------------------------------------------

fn leaf_of(w: &World, query_id: &str) -> Option<String> {
    w.world_query(query_id).ok()?.intent.category().map(str::to_string)
}

fn slice_rates(e: &Engine, model: &Model, leaf: &str) -> Result<(f64, f64), relevance_core::Error> {
    let recs = e.evaluate_heldout(model)?;
    let (mut pat, mut free) = ((0usize, 0usize), (0usize, 0usize));
    for r in &recs {
        let bad = usize::from(r.predicted != r.reference);
        if leaf_of(&e.world, &r.query_id).as_deref() == Some(leaf) {
            pat = (pat.0 + bad, pat.1 + 1);
        } else {
            free = (free.0 + bad, free.1 + 1);
        }
    }
    Ok((pat.0 as f64 / pat.1.max(1) as f64, free.0 as f64 / free.1.max(1) as f64))
}

fn injected_pattern() -> Outcome {
    let cfg = PipelineConfig { world: WorldConfig { noise_rate: 0.0, ..Default::default() }, ..Default::default() };
    let mut e = Engine::init(cfg, None, ExecMode::Parallel)?;
    // the leaf with the most held-out pairs carries the pattern
    let mut per_leaf: BTreeMap<String, usize> = BTreeMap::new();
    for h in &e.world.heldout {
        if let Some(l) = leaf_of(&e.world, &h.query_id) {
            *per_leaf.entry(l).or_default() += 1;
        }
    }
    let leaf = per_leaf.iter().max_by_key(|(l, n)| (**n, std::cmp::Reverse((*l).clone()))).map(|(l, _)| l.clone()).ok_or("no held-out pairs")?;
    let mut flipped = 0;
    for s in e.corpus.samples.iter_mut() {
        if leaf_of(&e.world, &s.query_id).as_deref() == Some(leaf.as_str()) {
            s.label = RelevanceLabel::new((s.label.value() + 2) % 4)?;
            flipped += 1;
        }
    }
    let lex = e.world.lexicons().clone();
    let train = |e: &Engine, v: u64| -> Result<Model, relevance_core::Error> {
        let pairs = labeled_pairs(&e.world, &e.corpus.samples)?;
        Ok(Model::new(train_multitask(&pairs, &lex, &e.config.train, v)?, lex.clone()))
    };
    let m0 = train(&e, 2)?;
    let (pat0, free0) = slice_rates(&e, &m0, &leaf)?;

    // cases: traffic pairs of the pattern leaf where the model disagrees with the annotator
    let annotator = e.annotator();
    let ctx = AnnotateContext { standards: &e.standards, directives: &[], now: 0, memory: None };
    let mut cases = Vec::new();
    for wq in e.world.sample_queries(Split::Train, 40, "injected") {
        if wq.intent.category() != Some(leaf.as_str()) {
            continue;
        }
        for d in e.world.products_in_leaf(&leaf).take(8) {
            let online = m0.fine_base(&wq.query, e.world.serving_product(&d.id)?);
            let reference = annotator.annotate(e.world.as_ref(), &wq.query, d, &ctx)?.label;
            if online.label != reference && !cases.iter().any(|c: &Case| c.query.id == wq.query.id && c.product_id == d.id) {
                cases.push(Case {
                    id: format!("inj-{:03}", cases.len()),
                    query: wq.query.clone(),
                    product_id: d.id.clone(),
                    reference_label: Some(reference),
                    online_prediction: online,
                    provenance: CaseProvenance::Dialectic,
                    standards_version: e.standards.version,
                });
            }
        }
        if cases.len() >= 20 {
            break;
        }
    }
    if cases.is_empty() {
        return Ok((false, format!("pattern on {leaf} produced no observable cases")));
    }
    let out = e.optimize_cases(&cases)?;
    out.delta.apply(&mut e.corpus)?;
    let m1 = train(&e, 3)?;
    let (pat1, free1) = slice_rates(&e, &m1, &leaf)?;
    let ok = pat1 <= 0.5 * pat0 && pat0 > 0.0 && free1 - free0 < 0.02;
    Ok((
        ok,
        format!(
            "{leaf}: {flipped} samples shifted, {} cases, {} corrections; pattern slice {pat0:.4} -> {pat1:.4}, pattern-free {free0:.4} -> {free1:.4}",
            cases.len(),
            out.delta.corrections.len()
        ),
    ))
}

// ---- losses -------------------------------------------------------------------

fn grm_data(w: &World, seed: u64) -> Result<GrmData, relevance_core::Error> {
    grm_training_data(w, &MockJudge { epsilon: 0.1, seed }, 60, 4, Split::Train, &format!("gc-{seed}"))
}

fn random_weights(seed: u64) -> [f64; N_GRM_FEATURES] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::array::from_fn(|_| rng.gen_range(-1.0..1.0))
}

fn gradient_checks() -> Outcome {
    let w = world(300, 40);
    let cfg = relevance_core::model::train::TrainConfig::default();
    let pairs = labeled_pairs(&w, &w.initial_corpus)?;
    let ex = featurize(&pairs, w.lexicons(), &cfg.dims);
    let batch = fixed_batch(&ex, 32);
    let (mut mt, mut grm) = (0.0f64, 0.0f64);
    for seed in 0..5u64 {
        let p = Params::init(&cfg.dims, seed);
        mt = mt.max(gradient_check(&p, &cfg.dims, &ex, &batch, &TaskWeights::default(), 10, seed));
        let data = grm_data(&w, seed)?;
        grm = grm.max(grm_gradient_check(&random_weights(seed), &data, 1.0, 0.1, 10, seed));
    }
    Ok((mt <= 1e-4 && grm <= 1e-4, format!("max relative error multi-task {mt:.2e}, GRM {grm:.2e} (10 params x 5 seeds)")))
}

fn analytic_values() -> Outcome {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let sn: f64 = rng.gen_range(0.0..1.0);
        let m: f64 = rng.gen_range(0.0..1.0);
        worst = worst.max((pairwise_term(sn + m, sn, m) - std::f64::consts::LN_2).abs());
    }
    let w = world(300, 40);
    let data = grm_data(&w, 1)?;
    let wts = random_weights(1);
    let (mut g0, mut g1) = ([0.0; N_GRM_FEATURES], [0.0; N_GRM_FEATURES]);
    let l0 = grm_objective(&wts, &data, 0.0, 0.1, Some(&mut g0));
    let ce_only = GrmData { pairs: Vec::new(), ce: data.ce.clone() };
    let l1 = grm_objective(&wts, &ce_only, 0.0, 0.1, Some(&mut g1));
    let grm_iso = l0 == l1 && g0 == g1;

    let cfg = relevance_core::model::train::TrainConfig::default();
    let ex = featurize(&labeled_pairs(&w, &w.initial_corpus)?, w.lexicons(), &cfg.dims);
    let batch = fixed_batch(&ex, 32);
    let p = Params::init(&cfg.dims, 5);
    let fine_only = TaskWeights { retrieval: 0.0, coarse: 0.0, fine: 1.0 };
    let mut ga = Params::zeros(&cfg.dims);
    let la = batch_objective(&p, &cfg.dims, &ex, &batch, &fine_only, Some(&mut ga));
    let mut gb = Params::zeros(&cfg.dims);
    let fine_batch = Batch { fine: batch.fine.clone(), retrieval: Vec::new(), coarse: Vec::new() };
    let lb = batch_objective(&p, &cfg.dims, &ex, &fine_batch, &fine_only, Some(&mut gb));
    let mt_iso = la.total == la.fine && la.total == lb.total && ga.blocks().iter().zip(gb.blocks().iter()).all(|(a, b)| a.1 == b.1);
    Ok((
        worst <= 1e-12 && grm_iso && mt_iso,
        format!("max |pairwise - ln 2| at delta = margin {worst:.1e}; lambda=0 GRM isolation {grm_iso}; zero task weights isolation {mt_iso}"),
    ))
}

// ---- dialectic --------------------------------------------------------------------

fn expected_route(o: &ConsensusOutcome, online: RelevanceLabel) -> RouteKind {
    match o.kind {
        OutcomeKind::NoConsensus => RouteKind::StandardEvolution,
        OutcomeKind::Consensus { justified_by_s: false, .. } => RouteKind::StandardEvolution,
        OutcomeKind::Consensus { label, .. } if label != online => RouteKind::ModelError,
        OutcomeKind::Consensus { .. } => RouteKind::Exempt,
    }
}

fn dialectic_protocol() -> Outcome {
    let cfg = PipelineConfig { world: WorldConfig { n_products: 500, n_queries: 60, ..Default::default() }, user_noise: 0.5, ..Default::default() };
    let e = Engine::init(cfg, None, ExecMode::Parallel)?;
    let w = e.world.clone();
    let annotator = e.annotator();
    let mut amended = e.standards.clone();
    for c in &w.oracle.hidden_clauses {
        amended = amended.amended(oracle::clause(c.tag))?;
    }
    let published = AnnotatorAgent { annotator: &annotator, tools: w.as_ref(), ctx: AnnotateContext { standards: &e.standards, directives: &[], now: 0, memory: None } };
    let revised = AnnotatorAgent { annotator: &annotator, tools: w.as_ref(), ctx: AnnotateContext { standards: &amended, directives: &[], now: 0, memory: None } };
    let user = e.user();
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let (mut bounded, mut partition, mut blind) = (0, 0, 0);
    let mut buckets: BTreeMap<RouteKind, usize> = BTreeMap::new();
    let mut max_rounds = 0;
    for i in 0..1000 {
        let wq = &w.queries[rng.gen_range(0..w.queries.len())];
        let d = match wq.intent.category().filter(|_| rng.gen_bool(0.5)) {
            Some(leaf) => {
                let same: Vec<_> = w.products_in_leaf(leaf).collect();
                same[rng.gen_range(0..same.len())]
            }
            None => &w.products[rng.gen_range(0..w.products.len())],
        };
        let online = RelevanceLabel::new(rng.gen_range(0..4))?;
        let agent = if rng.gen_bool(0.5) { &published } else { &revised };
        let t = negotiate(&format!("d{i}"), &user, agent, &wq.query, d, 5)?;
        max_rounds = max_rounds.max(t.round_count);
        bounded += usize::from(t.round_count <= 5 && t.turns.len() <= 10 && t.well_formed());
        let r = route_outcome(&t.outcome, &Prediction::one_hot(online, 0.0, SourceStage::Fine));
        partition += usize::from(r.kind == expected_route(&t.outcome, online) && r.low_confidence == matches!(t.outcome.kind, OutcomeKind::NoConsensus));
        *buckets.entry(r.kind).or_default() += 1;
        // the user's turns are reproducible from what it was shown, and
        // its opening does not move when the standards do
        let view = UserView { query: wq.query.clone(), product: d.clone() };
        let mut replay = user.open(&view)? == (t.turns[0].position, t.turns[0].argument.clone());
        for k in (2..t.turns.len()).step_by(2) {
            debug_assert_eq!(t.turns[k].speaker, Speaker::User);
            replay &= user.reply(&view, t.turns[k - 2].position, &t.turns[k - 1])? == (t.turns[k].position, t.turns[k].argument.clone());
        }
        let other = if std::ptr::eq(agent, &published) { &revised } else { &published };
        let t2 = negotiate(&format!("d{i}"), &user, other, &wq.query, d, 5)?;
        blind += usize::from(replay && t2.turns[0] == t.turns[0]);
    }
    let total: usize = buckets.values().sum();
    let ok = bounded == 1000 && partition == 1000 && blind == 1000 && total == 1000;
    Ok((ok, format!("1000 cases: bounded {bounded}, routed per rule {partition}, user S-blind {blind}; max rounds {max_rounds}; routes {buckets:?}")))
}

// ---- instruction robustness ----------------------------------------------------------

fn instruction_robustness() -> Outcome {
    let w = world(2000, 200);
    let counts = ScenarioCounts::default();
    let test = generate_contrastive_set(&w, counts, Split::Heldout, "if-test")?;
    let interp = evaluate_instruction_following(interpreter_scorer, &test)?;
    let train = generate_contrastive_set(&w, counts, Split::Train, "if-train")?;
    let positives: Vec<_> = train.iter().filter(|i| i.scenario != Scenario::Neutral).cloned().collect();
    let contrastive = RuleClassifier::train(&train, 300, 0.1)?;
    let pos_only = RuleClassifier::train(&positives, 300, 0.1)?;
    let mc = evaluate_instruction_following(|i| contrastive.predict(i), &test)?;
    let mp = evaluate_instruction_following(|i| pos_only.predict(i), &test)?;
    let n = |s| test.iter().filter(|i| i.scenario == s).count();
    let interp_ok = interp.acc_up == 1.0 && interp.acc_down == 1.0 && interp.acc_neutral == 1.0;
    let ok = interp_ok && mc.acc_neutral - mp.acc_neutral >= 0.3 && mc.acc_up >= 0.85 && mc.acc_down >= 0.85;
    Ok((
        ok,
        format!(
            "{}/{}/{} items; interpreter ACC {:.3}/{:.3}/{:.3}; contrastive up {:.3} down {:.3} neutral {:.3}; positives-only neutral {:.3}",
            n(Scenario::Up),
            n(Scenario::Down),
            n(Scenario::Neutral),
            interp.acc_up,
            interp.acc_down,
            interp.acc_neutral,
            mc.acc_up,
            mc.acc_down,
            mc.acc_neutral,
            mp.acc_neutral
        ),
    ))
}

// ---- cache --------------------------------------------------------------------------

/// Online-order sweep: every query first looks up all products against
/// entries written by earlier queries, then writes its own fine labels.
/// General queries go first so generalized keys exist when specific ones
/// arrive. Returns (inferred zeros, false zeros).
fn cache_sweep(defect_rate: f64) -> Result<(usize, usize), relevance_core::Error> {
    let cfg = PipelineConfig { world: WorldConfig { n_products: 500, defect_rate, ..Default::default() }, ..Default::default() };
    let e = Engine::init(cfg, None, ExecMode::Parallel)?;
    let (w, m) = (&e.world, e.model());
    let cache = RelevanceCache::new();
    let mut order: Vec<_> = w.queries.iter().map(|wq| (m.structure(&wq.query), wq)).collect();
    order.sort_by_key(|(s, wq)| (s.attributes.len() + usize::from(s.brand.is_some()), wq.query.id.clone()));
    let (mut inferred, mut wrong) = (0, 0);
    for (s, wq) in &order {
        for d in &w.serving_products {
            if let Some((_, CacheHit::HypernymZero)) = cache.lookup(s, d, m.version()) {
                inferred += 1;
                wrong += usize::from(w.oracle_label(&wq.query, w.product(&d.id)?)? != RelevanceLabel::IRRELEVANT);
            }
        }
        for d in &w.serving_products {
            cache.insert(s, d, m.fine_base(&wq.query, d).label, m.version(), 0);
        }
    }
    Ok((inferred, wrong))
}

fn cache_soundness() -> Outcome {
    let (inferred, wrong) = cache_sweep(0.0)?;
    let (d_inf, d_wrong) = cache_sweep(WorldConfig::default().defect_rate)?;
    Ok((
        inferred > 0 && wrong == 0,
        format!("500 products: {inferred} hypernym zeros, {wrong} false; info: defect world {d_inf} zeros, {d_wrong} false"),
    ))
}

// ---- routing --------------------------------------------------------------------------

fn routing_economics(e: &Engine) -> Outcome {
    let queries: Vec<Query> = {
        let mut seen = BTreeSet::new();
        e.world.sample_queries(Split::Train, 400, "replay").into_iter().filter(|q| seen.insert(q.query.id.clone())).map(|q| q.query.clone()).collect()
    };
    let lookup = ServingView(&e.world);
    let empty = BTreeMap::new();
    let base_cfg = ServingConfig { tau: 0.95, min_support: 20, routing: false, ..Default::default() };
    let run = |stats: &BTreeMap<_, _>, cfg: &ServingConfig, window: u64| {
        let ctx = ServeContext {
            model: e.model(),
            index: e.index(),
            products: &lookup,
            standards: &e.standards,
            directives: &e.directives,
            now: e.state.tick,
            stats,
            cache: None,
            associations: None,
            window_id: window,
            mode: ExecMode::Parallel,
        };
        let c = FineCounter::default();
        let out: Result<Vec<_>, _> = queries.iter().map(|q| serve(q, &ctx, cfg, &c)).collect();
        out.map(|o| (o, c.get()))
    };
    let (full, full_calls) = run(&empty, &base_cfg, 1)?;
    let logs: Vec<_> = full.iter().flat_map(|r| r.logs.iter().cloned()).collect();
    let stats = consistency_stats(&logs, 20, 1);
    let (routed, routed_calls) = run(&stats, &ServingConfig { routing: true, ..base_cfg.clone() }, 2)?;
    let (mut n, mut differ) = (0usize, 0usize);
    for (a, b) in full.iter().zip(&routed) {
        for (x, y) in a.items.iter().zip(&b.items) {
            n += 1;
            differ += usize::from(x.product_id != y.product_id || x.prediction.label != y.prediction.label);
        }
    }
    let drop = 1.0 - routed_calls as f64 / full_calls as f64;
    let dis = differ as f64 / n as f64;
    Ok((
        drop >= 0.15 && dis <= 0.01,
        format!("{} queries: fine calls {full_calls} -> {routed_calls} ({:.1}% drop), disagreement {:.2}% over {n} items", queries.len(), 100.0 * drop, 100.0 * dis),
    ))
}

// ---- deep search ----------------------------------------------------------------------

fn tokens(s: &str) -> BTreeSet<String> {
    s.to_lowercase().split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_string).collect()
}

fn deep_search_check(e: &Engine) -> Outcome {
    let w = &e.world;
    let planner = ScriptedPlanner { lex: w.lexicons().clone() };
    let cfg = DeepSearchConfig::default();
    let lorax = w.find_query_by_text("lorax costume").ok_or("lorax query missing from world")?.query.clone();
    let (_, rec) = deep_search(&lorax, &planner, w.as_ref(), &cfg);
    let top = rec.candidates.first().ok_or("no candidate for lorax")?;
    let p = w.product(&top.product_id)?;
    let no_overlap = tokens(&lorax.text).is_disjoint(&tokens(&p.title));
    let chained = top.meta.len() == 2 && top.meta[0].starts_with("web_search:") && top.meta[1].starts_with("image_search:");
    let strong = w.oracle_label(&lorax, p)? == RelevanceLabel::STRONG;

    let (mut bounded, mut subset) = (0, 0);
    let queries = w.sample_queries(Split::Train, 200, "deep-search");
    for wq in &queries {
        let (state, rec) = deep_search(&wq.query, &planner, w.as_ref(), &cfg);
        bounded += usize::from(state.step <= cfg.budget && state.evidence.len() <= cfg.budget);
        let base: Vec<String> = e.model().retrieve(&wq.query, e.index(), 50, ExecMode::Sequential)?.hits.into_iter().map(|h| h.0).collect();
        let aug = augment_pool(&base, &rec);
        subset += usize::from(aug.starts_with(&base) && base.iter().all(|b| aug.contains(b)));
    }
    let n = queries.len();
    Ok((
        no_overlap && chained && strong && bounded == n && subset == n,
        format!("lorax -> {} \"{}\" via [{}] (no shared tokens {no_overlap}, oracle strong {strong}); within budget {bounded}/{n}; C_base subset of C_aug {subset}/{n}", p.id, p.title, top.meta.join(" | ")),
    ))
}

// ---- recounts over persisted state -------------------------------------------------------

fn jsonl(path: &Path) -> Result<Vec<Value>, Box<dyn std::error::Error>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<Result<_, _>>()?)
}

fn recounts(dir: &Path) -> Outcome {
    let reports = jsonl(&dir.join("reports.jsonl"))?;
    let cases = jsonl(&dir.join("cases.jsonl"))?;
    let config: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("config.json"))?)?;
    let mut mismatches = Vec::new();
    let mut checked = 0;
    let bad_rate = |c: u64| -> Result<f64, Box<dyn std::error::Error>> {
        let ev = jsonl(&dir.join(format!("eval/cycle-{c:04}.jsonl")))?;
        Ok(ev.iter().filter(|r| r["predicted"] != r["reference"]).count() as f64 / ev.len() as f64)
    };
    for r in &reports {
        let t = r["cycle_id"].as_u64().ok_or("cycle id")?;
        let mut check = |name: &str, ours: f64, theirs: f64| {
            checked += 1;
            if ours != theirs {
                mismatches.push(format!("cycle {t} {name}: recount {ours} vs report {theirs}"));
            }
        };
        check("bad_rate_before", bad_rate(t - 1)?, r["bad_rate_before"].as_f64().unwrap_or(f64::NAN));
        check("bad_rate_after", bad_rate(t)?, r["bad_rate_after"].as_f64().unwrap_or(f64::NAN));

        let crawl = jsonl(&dir.join(format!("crawl/cycle-{t:04}.jsonl")))?;
        let mined: Vec<&Value> = cases.iter().filter(|c| c["cycle"] == t && c["case"]["provenance"] == "dialectic").collect();
        let discovered: Vec<&&Value> =
            mined.iter().filter(|c| !c["case"]["reference_label"].is_null() && c["case"]["reference_label"] != c["case"]["online_prediction"]["label"]).collect();
        check("discovery_rate", discovered.len() as f64 / crawl.len() as f64, r["discovery_rate"].as_f64().unwrap_or(f64::NAN));
        if !discovered.is_empty() {
            let resolved = discovered.iter().filter(|c| c["post_prediction"] == c["case"]["reference_label"]).count();
            check("resolution_rate", resolved as f64 / discovered.len() as f64, r["resolution_rate"].as_f64().unwrap_or(f64::NAN));
        }
        let truly_bad: BTreeSet<(String, String)> = crawl
            .iter()
            .filter(|c| c["online"] != c["oracle"])
            .map(|c| (c["query_id"].as_str().unwrap_or_default().to_string(), c["product_id"].as_str().unwrap_or_default().to_string()))
            .collect();
        let emitted: BTreeSet<(String, String)> = mined
            .iter()
            .filter(|c| c["route"]["kind"] == "model_error")
            .map(|c| (c["case"]["query"]["id"].as_str().unwrap_or_default().to_string(), c["case"]["product_id"].as_str().unwrap_or_default().to_string()))
            .collect();
        if !truly_bad.is_empty() {
            let tp = emitted.intersection(&truly_bad).count() as f64;
            check("mining recall", tp / truly_bad.len() as f64, r["mining"]["recall"].as_f64().unwrap_or(f64::NAN));
            if !emitted.is_empty() {
                check("mining precision", tp / emitted.len() as f64, r["mining"]["precision"].as_f64().unwrap_or(f64::NAN));
            }
        }
    }
    // c(q) over the last window's logs
    let logs = jsonl(&dir.join("serving_logs.jsonl"))?;
    let stats = jsonl(&dir.join("consistency.jsonl"))?;
    let min_support = config["serving"]["min_support"].as_u64().ok_or("min_support")? as usize;
    let mut per_q: BTreeMap<String, (BTreeSet<String>, usize)> = BTreeMap::new();
    for l in &logs {
        if l["fine_bin"].is_null() {
            continue;
        }
        let e = per_q.entry(l["query_id"].as_str().unwrap_or_default().to_string()).or_default();
        if e.0.insert(l["product_id"].as_str().unwrap_or_default().to_string()) {
            e.1 += usize::from(l["fine_bin"] == l["coarse_bin"]);
        }
    }
    let expect: BTreeMap<String, f64> =
        per_q.into_iter().filter(|(_, (s, _))| s.len() >= min_support).map(|(q, (s, a))| (q, a as f64 / s.len() as f64)).collect();
    let got: BTreeMap<String, f64> = stats.iter().map(|s| (s["query_id"].as_str().unwrap_or_default().to_string(), s["c"].as_f64().unwrap_or(f64::NAN))).collect();
    checked += 1;
    if expect != got {
        mismatches.push(format!("c(q): recount {} queries vs stored {}", expect.len(), got.len()));
    }
    Ok((mismatches.is_empty(), format!("{checked} recounts over {} cycles and {} c(q) values; mismatches {:?}", reports.len(), expect.len(), mismatches)))
}

fn determinism(a: &Path, b: &Path) -> Outcome {
    let (da, db) = (digest_dir(a)?, digest_dir(b)?);
    Ok((da == db, format!("state digests {} / {}", &da[..16], &db[..16])))
}

fn main() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let (dir_a, dir_b) = (tmp.path().join("run-a"), tmp.path().join("run-b"));
    let run_a = closed_loop(&dir_a);
    let mut lines: Vec<(&str, Outcome)> = Vec::new();
    match &run_a {
        Ok(run) => lines.push(("closed-loop repair", closed_loop_repair(run))),
        Err(e) => lines.push(("closed-loop repair", Err(e.to_string().into()))),
    }
    lines.push(("injected-pattern repair", injected_pattern()));
    lines.push(("gradient checks", gradient_checks()));
    lines.push(("analytic loss values", analytic_values()));
    lines.push(("dialectic protocol", dialectic_protocol()));
    lines.push(("instruction robustness", instruction_robustness()));
    lines.push(("cache soundness", cache_soundness()));
    match &run_a {
        Ok(run) => {
            lines.push(("routing economics", routing_economics(&run.engine)));
            lines.push(("deep search", deep_search_check(&run.engine)));
            lines.push(("oracle-equivalence recounts", recounts(&dir_a)));
        }
        Err(_) => {
            for name in ["routing economics", "deep search", "oracle-equivalence recounts"] {
                lines.push((name, Err("closed-loop run failed".into())));
            }
        }
    }
    let det = closed_loop(&dir_b).map_err(|e| e.to_string().into()).and_then(|_| determinism(&dir_a, &dir_b));
    lines.push(("determinism", det));

    let mut failed = 0;
    for (name, o) in &lines {
        match o {
            Ok((true, detail)) => println!("PASS {name}: {detail}"),
            Ok((false, detail)) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
            Err(e) => {
                failed += 1;
                println!("FAIL {name}: error: {e}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", lines.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
