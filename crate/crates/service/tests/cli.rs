use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

use relevance_core::domain::{Directive, TimeWindow};
use relevance_core::rules::{Pattern, Rule};

fn run(state: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relevance")).arg("--state").arg(state).args(args).output().unwrap()
}

fn ok(state: &Path, args: &[&str]) -> String {
    let o = run(state, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn json(state: &Path, args: &[&str]) -> Value {
    serde_json::from_str(&ok(state, args)).unwrap()
}

const SMALL: &[&str] = &["--products", "300", "--queries", "40"];

#[test]
fn workflow_commands_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let st = tmp.path().join("run");
    let m = json(&st, &[&["init"], SMALL].concat());
    assert_eq!(m["cycle"], 0);
    assert!(!run(&st, &[&["init"], SMALL].concat()).status.success(), "init must not clobber a run");

    let rec = json(&st, &["case", "submit", "--query", "lorax costume", "--product", "p00003", "--request-human"]);
    let id = rec["case"]["id"].as_str().unwrap().to_string();
    let lines = ok(&st, &["case", "transcript", &id]);
    assert!(lines.lines().last().unwrap().contains("\"event\":\"outcome\""));
    assert_eq!(ok(&st, &["case", "transcript", &id, "--from", "1"]).lines().count(), lines.lines().count() - 1);

    let adj = json(&st, &["case", "adjudicate", &id, "--label", "3", "--justification", "the mascot suit is the lorax"]);
    assert_eq!(adj["status"], "resolved");
    assert!(!run(&st, &["case", "adjudicate", &id, "--label", "3", "--justification", "again"]).status.success());
    assert!(!run(&st, &["case", "adjudicate", &id, "--label", "7", "--justification", "bad"]).status.success());

    let d = Directive {
        id: "dir-cli".into(),
        rule: Rule::exclusion("r-cli", Pattern::category("womens_blouses"), Pattern::category("womens_tanks_camis"), "tanks are not blouses"),
        priority: 5,
        active_window: TimeWindow { from: 0, until: None },
    };
    let f = tmp.path().join("d.json");
    std::fs::write(&f, serde_json::to_string(&d).unwrap()).unwrap();
    ok(&st, &["directive", "add", f.to_str().unwrap()]);
    assert_eq!(json(&st, &["directive", "list"]).as_array().unwrap().len(), 1);
    assert!(!run(&st, &["directive", "add", f.to_str().unwrap()]).status.success());
    ok(&st, &["directive", "remove", "dir-cli"]);
    assert!(json(&st, &["directive", "list"]).as_array().unwrap().is_empty());

    let report = json(&st, &["pipeline", "run-cycle"]);
    assert_eq!(report["cycle_id"], 1);
    let m = json(&st, &["metrics"]);
    assert_eq!(m["cycle"], 1);
    assert_eq!(m["bad_rate_trend"].as_array().unwrap().len(), 1);
    assert_eq!(json(&st, &["pipeline", "release-breaker"])["tripped"], false);
    assert!(json(&st, &["standards"])["version"].as_u64().unwrap() >= 1);
    for p in json(&st, &["proposal", "list"]).as_array().unwrap() {
        let pid = p["id"].as_str().unwrap();
        if p["status"]["state"] == "open" {
            ok(&st, &["proposal", "reject", pid, "--reason", "not now"]);
        }
        assert!(!run(&st, &["proposal", "approve", pid]).status.success());
    }
    let s = json(&st, &["score", "--query", "lorax costume", "--product", "p00003"]);
    assert!(s["label"].as_u64().unwrap() <= 3);
}

#[test]
fn model_and_batch_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let st = tmp.path().join("run");
    ok(&st, &[&["init"], SMALL].concat());

    let w = json(&st, &[&["world", "--out", tmp.path().join("world").to_str().unwrap()], SMALL].concat());
    assert_eq!(w["products"], 300);
    assert!(tmp.path().join("world/products.jsonl").exists());

    let ckpt = tmp.path().join("m.ckpt");
    ok(&st, &["train", "--out", ckpt.to_str().unwrap(), "--version", "5"]);
    let ev = json(&st, &["eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(ev["version"], 5);
    let rate = ev["heldout_bad_case_rate"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&rate));

    let q = json(&st, &["embed", "--query", "nike running shoes"]);
    let p = json(&st, &["embed", "--product", "p00000"]);
    assert_eq!(q.as_array().unwrap().len(), p.as_array().unwrap().len());
    assert!(!run(&st, &["embed"]).status.success());

    let idx = tmp.path().join("idx.json");
    assert_eq!(json(&st, &["index-build", "--out", idx.to_str().unwrap()])["products"], 300);

    let slice = tmp.path().join("slice.txt");
    std::fs::write(&slice, "lorax costume\nnike running shoes\n").unwrap();
    let out = ok(&st, &["deep-search", "--slice", slice.to_str().unwrap(), "--budget", "6"]);
    assert_eq!(out.lines().count(), 2);
    let lorax: Value = serde_json::from_str(out.lines().next().unwrap()).unwrap();
    let first = &lorax["candidates"][0]["meta"];
    assert!(first[0].as_str().unwrap().starts_with("web_search:") && first[1].as_str().unwrap().starts_with("image_search:"));

    ok(&st, &["pipeline", "run-cycle"]);
    let cases: Vec<Value> = json(&st, &["case", "list"]).as_array().unwrap().iter().map(|c| c["case"].clone()).collect();
    let cf = tmp.path().join("cases.jsonl");
    std::fs::write(&cf, cases.iter().map(|c| c.to_string() + "\n").collect::<String>()).unwrap();
    let o = json(&st, &["optimize", "--cases", cf.to_str().unwrap()]);
    let diagnosed: Vec<&str> = o["report"]["cases"].as_array().unwrap().iter().map(|c| c["case_id"].as_str().unwrap()).collect();
    assert!(diagnosed.len() <= cases.len());
    assert!(o["feature_side"].as_array().unwrap().iter().all(|id| diagnosed.contains(&id.as_str().unwrap())));

    let before = json(&st, &["metrics"])["memory_entries"].as_u64().unwrap();
    assert_eq!(json(&st, &["compact"])["entries"].as_u64().unwrap(), before);
}

#[test]
fn missing_state_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&tmp.path().join("none"), &["metrics"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("relevance init"));
}
