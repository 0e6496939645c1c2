mod common;

use std::fs;

use serde_json::json;

use spex::commands::cmd_run;
use spex::config::PipelineConfig;
use spex::eval::MatchMode;
use spex::gate::load_gate_records;
use spex::pipeline::{Pipeline, StageName};
use spex::Error;

#[test]
fn policy_none_gates_every_segment_in() {
    let dir = common::corpus_copy();
    let config = common::edit_config(dir.path(), |c| c["gate"]["policy"] = json!("none"));
    let out = cmd_run(&config, StageName::Final, false).unwrap();
    assert_eq!(out.stats.gated_in, 30);
    let records = load_gate_records(&dir.path().join("out/gate.jsonl")).unwrap();
    assert_eq!(records.len(), 30);
    assert!(records.iter().all(|r| r.gated_in));
    assert_eq!(out.report.unwrap().gated_out, 0);
}

#[test]
fn worker_count_does_not_change_output() {
    let mut outputs = Vec::new();
    for workers in [1, 8] {
        let dir = common::corpus_copy();
        let config = common::edit_config(dir.path(), |c| c["concurrency"]["workers"] = json!(workers));
        cmd_run(&config, StageName::Final, false).unwrap();
        let files: Vec<Vec<u8>> = ["gate.jsonl", "triggers.jsonl", "arguments.jsonl", "final.jsonl", "predictions.jsonl", "report.json"]
            .iter()
            .map(|f| fs::read(dir.path().join("out").join(f)).unwrap())
            .collect();
        outputs.push(files);
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn config_hash_ignores_concurrency_and_location() {
    let a = common::corpus_copy();
    let b = common::corpus_copy();
    common::edit_config(b.path(), |c| c["concurrency"] = json!({"workers": 1, "max_in_flight": 1, "min_interval_ms": 5}));
    let ha = PipelineConfig::load(&a.path().join("config.json")).unwrap().hash();
    let hb = PipelineConfig::load(&b.path().join("config.json")).unwrap().hash();
    assert_eq!(ha, hb);
    common::edit_config(b.path(), |c| c["retrieval"]["k"] = json!(4));
    let hc = PipelineConfig::load(&b.path().join("config.json")).unwrap().hash();
    assert_ne!(ha, hc);
}

#[test]
fn resume_mismatch_names_the_stage() {
    let dir = common::corpus_copy();
    let config = dir.path().join("config.json");
    cmd_run(&config, StageName::Triggers, false).unwrap();
    common::edit_config(dir.path(), |c| c["retrieval"]["k"] = json!(2));
    match cmd_run(&config, StageName::Final, true) {
        Err(Error::ResumeMismatch { .. }) => {}
        other => panic!("expected ResumeMismatch, got {other:?}"),
    }
    // Without --resume the stale artifacts are simply rebuilt.
    cmd_run(&config, StageName::Final, false).unwrap();
}

#[test]
fn partial_stage_resumes_from_last_complete_artifact() {
    let dir = common::corpus_copy();
    let config = dir.path().join("config.json");
    let first = cmd_run(&config, StageName::Triggers, false).unwrap();
    assert!(first.predictions.is_none());
    let rest = cmd_run(&config, StageName::Final, true).unwrap();
    assert_eq!(rest.stats.stages["gate"], "resumed");
    assert_eq!(rest.stats.stages["triggers"], "resumed");
    assert_eq!(rest.stats.stages["arguments"], "run");
    let golden = common::fixtures().join("golden/predictions.jsonl");
    assert_eq!(fs::read(dir.path().join("out/predictions.jsonl")).unwrap(), fs::read(golden).unwrap());
}

#[test]
fn set_mode_collapses_duplicate_tuples() {
    let dir = common::corpus_copy();
    let multiset = cmd_run(&dir.path().join("config.json"), StageName::Final, false).unwrap().report.unwrap();
    let config = common::edit_config(dir.path(), |c| {
        c["scoring"] = json!({"mode": "set"});
        c["paths"]["output_dir"] = json!("out_set");
    });
    let cfg = PipelineConfig::load(&config).unwrap();
    assert_eq!(cfg.scoring.mode, MatchMode::Set);
    let set = Pipeline::new(cfg).unwrap().run(StageName::Final, false).unwrap().report.unwrap();
    assert!(set.ac.n_gold < multiset.ac.n_gold);
    assert!(set.ac.n_pred <= multiset.ac.n_pred);
}

#[test]
fn stage_records_keep_every_attempt() {
    let dir = common::corpus_copy();
    cmd_run(&dir.path().join("config.json"), StageName::Triggers, false).unwrap();
    let text = fs::read_to_string(dir.path().join("out/triggers.jsonl")).unwrap();
    let s05: serde_json::Value = text
        .lines()
        .skip(1)
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .find(|v| v["id"] == "s05")
        .unwrap();
    assert_eq!(s05["status"], "failed");
    assert_eq!(s05["attempts"], 3);
    assert_eq!(s05["replies"].as_array().unwrap().len(), 3);
}

#[test]
fn gold_without_transcript_is_excluded() {
    let dir = common::corpus_copy();
    let path = dir.path().join("transcripts.jsonl");
    let kept: String = fs::read_to_string(&path).unwrap().lines().filter(|l| !l.contains("\"s30\"")).map(|l| format!("{l}\n")).collect();
    fs::write(&path, kept).unwrap();
    let out = cmd_run(&dir.path().join("config.json"), StageName::Final, false).unwrap();
    assert_eq!(out.stats.segments, 29);
    assert!(!out.predictions.unwrap().contains_key("s30"));
}
