use std::collections::BTreeMap;

use relevance_core::par::ExecMode;
use relevance_core::pipeline::{Engine, PipelineConfig, STAGES};
use relevance_core::records::digest_dir;
use relevance_core::world::WorldConfig;

fn small() -> PipelineConfig {
    PipelineConfig { world: WorldConfig { n_products: 300, n_queries: 40, ..Default::default() }, traffic_queries: 15, ..Default::default() }
}

#[test]
fn failed_stage_leaves_state_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("s");
    let mut e = Engine::init(small(), Some(&dir), ExecMode::Sequential).unwrap();
    e.run_cycle().unwrap();
    let before = digest_dir(&dir).unwrap();
    let corpus = e.corpus.clone();
    for stage in STAGES {
        e.config.fail_at_stage = Some(stage.to_string());
        let err = e.run_cycle().unwrap_err();
        assert!(err.to_string().contains(stage), "{stage}: {err}");
        assert_eq!(e.state.cycle, 1, "{stage}");
        assert_eq!(e.reports.len(), 1);
        assert_eq!(e.corpus, corpus);
        assert_eq!(digest_dir(&dir).unwrap(), before, "{stage} touched disk");
    }
    e.config.fail_at_stage = None;
    assert_eq!(e.run_cycle().unwrap().cycle_id, 2);
}

#[test]
fn corpus_only_grows_and_ids_keep_their_pairs() {
    let mut e = Engine::init(small(), None, ExecMode::Parallel).unwrap();
    let mut seen: BTreeMap<String, (String, String)> = BTreeMap::new();
    for s in &e.corpus.samples {
        seen.insert(s.id.clone(), (s.query_text.clone(), s.product_id.clone()));
    }
    for _ in 0..3 {
        let r = e.run_cycle().unwrap();
        assert_eq!(r.d_full, e.corpus.len());
        assert!(r.d_full >= r.d_full_prev);
        for (id, pair) in &seen {
            let s = e.corpus.get(id).unwrap_or_else(|| panic!("sample {id} vanished"));
            assert_eq!(&(s.query_text.clone(), s.product_id.clone()), pair);
        }
        for s in &e.corpus.samples {
            seen.entry(s.id.clone()).or_insert((s.query_text.clone(), s.product_id.clone()));
        }
    }
}

#[test]
fn reopened_run_continues_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let mut straight = Engine::init(small(), Some(&a), ExecMode::Parallel).unwrap();
    straight.run_cycle().unwrap();
    straight.run_cycle().unwrap();

    Engine::init(small(), Some(&b), ExecMode::Sequential).unwrap().run_cycle().unwrap();
    let mut resumed = Engine::open(&b, ExecMode::Sequential).unwrap();
    assert_eq!(resumed.state.cycle, 1);
    resumed.run_cycle().unwrap();
    assert_eq!(digest_dir(&a).unwrap(), digest_dir(&b).unwrap());
}

#[test]
fn tripped_breaker_freezes_the_model_until_released() {
    let mut cfg = small();
    // any candidate regresses against an unreachable incumbent
    cfg.guard.max_regression = -2.0;
    cfg.guard.breaker_limit = 2;
    let mut e = Engine::init(cfg, None, ExecMode::Parallel).unwrap();
    let v0 = e.state.model_version;
    let decisions: Vec<_> = (0..3).map(|_| e.run_cycle().unwrap().decision).collect();
    assert_eq!(format!("{decisions:?}"), "[SkippedAnomaly, BreakerTripped, BreakerTripped]");
    assert_eq!(e.state.model_version, v0);
    assert!(e.state.breaker.tripped);
    let b = e.release_breaker().unwrap();
    assert!(!b.tripped && b.consecutive_skips == 0);
}
