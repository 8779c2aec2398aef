use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use relevance_core::domain::{Directive, RelevanceLabel, TimeWindow};
use relevance_core::par::ExecMode;
use relevance_core::pipeline::{CaseStatus, CaseSubmission, Engine, HumanVerdict, PipelineConfig};
use relevance_core::records::digest_dir;
use relevance_core::rules::{Pattern, Rule};
use relevance_core::world::{Split, WorldConfig};
use relevance_service::{router, AppState, TranscriptEvent};

fn config() -> PipelineConfig {
    PipelineConfig { world: WorldConfig { n_products: 400, n_queries: 50, ..Default::default() }, traffic_queries: 20, ..Default::default() }
}

async fn send(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn send_json(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = send(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

/// A same-category pair the deployed model already calls relevant.
fn relevant_pair(e: &Engine) -> (String, String, String, String) {
    for wq in e.world.queries_in(Split::Train) {
        let Some(leaf) = wq.intent.category() else { continue };
        for d in e.world.products_in_leaf(leaf) {
            if e.score(&wq.query, &d.id).unwrap().label >= RelevanceLabel::RELEVANT {
                return (wq.query.text.clone(), d.id.clone(), leaf.to_string(), d.leaf().to_string());
            }
        }
    }
    panic!("no relevant pair in world");
}

fn exclusion(id: &str, query_leaf: &str, product_leaf: &str) -> Directive {
    Directive {
        id: id.into(),
        rule: Rule::exclusion(&format!("r-{id}"), Pattern::category(query_leaf), Pattern::category(product_leaf), "not what was asked for"),
        priority: 10,
        active_window: TimeWindow { from: 0, until: None },
    }
}

fn case_body(q: &str, pid: &str, human: bool) -> Value {
    serde_json::to_value(CaseSubmission { query: q.into(), product_id: pid.into(), complaint: "wrong result".into(), language: None, request_human: human })
        .unwrap()
}

#[tokio::test(flavor = "multi_thread")]
async fn case_lifecycle_over_http() {
    let tmp = tempfile::tempdir().unwrap();
    let e = Engine::init(config(), Some(&tmp.path().join("s")), ExecMode::Sequential).unwrap();
    let (q, pid, _, _) = relevant_pair(&e);
    let app = router(AppState::new(e));

    let (s, rec) = send_json(&app, "POST", "/cases", Some(case_body(&q, &pid, true))).await;
    assert_eq!(s, StatusCode::CREATED);
    let id = rec["case"]["id"].as_str().unwrap().to_string();
    assert_eq!(rec["status"], "awaiting_human");

    let (s, raw) = send(&app, "GET", &format!("/cases/{id}/transcript"), None).await;
    assert_eq!(s, StatusCode::OK);
    let events: Vec<TranscriptEvent> = String::from_utf8(raw).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let turns = events.iter().filter(|e| matches!(e, TranscriptEvent::Turn { .. })).count();
    assert!(turns >= 2 && turns % 2 == 0);
    assert!(matches!(events.last(), Some(TranscriptEvent::Outcome { status: CaseStatus::AwaitingHuman, .. })));

    // resuming from a turn index replays only the tail
    let (_, tail) = send(&app, "GET", &format!("/cases/{id}/transcript?from=1"), None).await;
    let tail: Vec<TranscriptEvent> = String::from_utf8(tail).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(tail.len(), events.len() - 1);
    assert_eq!(tail[..], events[1..]);

    let verdict = serde_json::to_value(HumanVerdict { label: RelevanceLabel::WEAK, justification: "partial match".into() }).unwrap();
    let (s, rec) = send_json(&app, "POST", &format!("/cases/{id}/adjudicate"), Some(verdict.clone())).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(rec["status"], "resolved");
    assert_eq!(rec["case"]["reference_label"], 1);
    let (s, _) = send_json(&app, "POST", &format!("/cases/{id}/adjudicate"), Some(verdict.clone())).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = send_json(&app, "POST", "/cases/nope/adjudicate", Some(verdict)).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (_, raw) = send(&app, "GET", &format!("/cases/{id}/transcript"), None).await;
    let last: TranscriptEvent = serde_json::from_str(String::from_utf8(raw).unwrap().lines().last().unwrap()).unwrap();
    assert!(matches!(last, TranscriptEvent::Verdict { .. }));

    let (s, m) = send_json(&app, "GET", "/metrics", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(m["cases_total"], 1);
    assert!(m["memory_entries"].as_u64().unwrap() > 0);

    let (s, _) = send_json(&app, "POST", "/cases", Some(case_body(&q, "p99999", false))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = send(&app, "GET", "/cases/nope/transcript", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread")]
async fn directive_changes_served_label_without_retrain() {
    let e = Engine::init(config(), None, ExecMode::Sequential).unwrap();
    let (q, pid, ql, pl) = relevant_pair(&e);
    let app = router(AppState::new(e));
    let score = |app: Router, q: String, pid: String| async move {
        let (s, p) = send_json(&app, "POST", "/score", Some(json!({ "query": q, "product_id": pid }))).await;
        assert_eq!(s, StatusCode::OK);
        p["label"].as_u64().unwrap()
    };
    let before = score(app.clone(), q.clone(), pid.clone()).await;
    assert!(before >= 2);

    let d = serde_json::to_value(exclusion("dir-1", &ql, &pl)).unwrap();
    let (s, _) = send_json(&app, "POST", "/directives", Some(d.clone())).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(score(app.clone(), q.clone(), pid.clone()).await, 0);
    let (s, _) = send_json(&app, "POST", "/directives", Some(d)).await;
    assert_eq!(s, StatusCode::CONFLICT);

    let (_, m) = send_json(&app, "GET", "/metrics", None).await;
    assert_eq!(m["model_version"], 1);
    assert_eq!(m["active_directives"], 1);

    let (s, _) = send_json(&app, "DELETE", "/directives/dir-1", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(score(app.clone(), q, pid).await, before);
    let (s, _) = send_json(&app, "DELETE", "/directives/dir-1", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let bad = json!({ "id": "x", "priority": 1, "active_window": { "from": 0 }, "rule": { "id": "r", "primitive": "exclusion", "query_scope": {}, "product_match": {}, "action": { "kind": "assign", "label": 0 } } });
    let (s, _) = send_json(&app, "POST", "/directives", Some(bad)).await;
    assert!(s.is_client_error(), "{s}");
}

#[tokio::test(flavor = "multi_thread")]
async fn pipeline_and_proposal_endpoints() {
    let cfg = PipelineConfig { auto_approve_proposals: false, ..config() };
    let app = router(AppState::new(Engine::init(cfg, None, ExecMode::Parallel).unwrap()));
    let (s, report) = send_json(&app, "POST", "/pipeline/run-cycle", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(report["cycle_id"], 1);

    let (_, props) = send_json(&app, "GET", "/standards/proposals", None).await;
    let props = props.as_array().unwrap().clone();
    let (_, std_before) = send_json(&app, "GET", "/standards", None).await;
    if let Some(p) = props.first() {
        let id = p["id"].as_str().unwrap();
        let (s, ap) = send_json(&app, "POST", &format!("/standards/proposals/{id}/approve"), None).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(ap["status"]["state"], "approved");
        let (_, std_after) = send_json(&app, "GET", "/standards", None).await;
        assert_eq!(std_after["version"].as_u64().unwrap(), std_before["version"].as_u64().unwrap() + 1);
        let (s, _) = send_json(&app, "POST", &format!("/standards/proposals/{id}/reject"), Some(json!({ "reason": "late" }))).await;
        assert_eq!(s, StatusCode::CONFLICT);
    }
    let (s, _) = send_json(&app, "POST", "/standards/proposals/prop-9999/approve", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (s, b) = send_json(&app, "POST", "/pipeline/release-breaker", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(b, json!({ "consecutive_skips": 0, "tripped": false }));
    let (_, m) = send_json(&app, "GET", "/metrics", None).await;
    assert_eq!(m["bad_rate_trend"].as_array().unwrap().len(), 1);
}

#[tokio::test(flavor = "multi_thread")]
async fn api_and_library_leave_identical_state() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));

    let mut lib = Engine::init(config(), Some(&a), ExecMode::Parallel).unwrap();
    let (q, pid, ql, pl) = relevant_pair(&lib);
    lib.submit_case(CaseSubmission { query: q.clone(), product_id: pid.clone(), complaint: "wrong result".into(), language: None, request_human: true })
        .unwrap();
    lib.adjudicate("case-000001", HumanVerdict { label: RelevanceLabel::WEAK, justification: "partial".into() }).unwrap();
    lib.add_directive(exclusion("dir-1", &ql, &pl)).unwrap();
    lib.run_cycle().unwrap();
    lib.remove_directive("dir-1").unwrap();

    let state = AppState::new(Engine::init(config(), Some(&b), ExecMode::Parallel).unwrap());
    let app = router(Arc::clone(&state));
    send_json(&app, "POST", "/cases", Some(case_body(&q, &pid, true))).await;
    let verdict = json!({ "label": 1, "justification": "partial" });
    assert_eq!(send_json(&app, "POST", "/cases/case-000001/adjudicate", Some(verdict)).await.0, StatusCode::OK);
    let d = serde_json::to_value(exclusion("dir-1", &ql, &pl)).unwrap();
    assert_eq!(send_json(&app, "POST", "/directives", Some(d)).await.0, StatusCode::CREATED);
    assert_eq!(send_json(&app, "POST", "/pipeline/run-cycle", None).await.0, StatusCode::OK);
    assert_eq!(send_json(&app, "DELETE", "/directives/dir-1", None).await.0, StatusCode::OK);

    assert_eq!(digest_dir(&a).unwrap(), digest_dir(&b).unwrap());
}
