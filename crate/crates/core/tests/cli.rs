mod common;

use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Map, Value};

const BIN: &str = env!("CARGO_BIN_EXE_icl-dst");

fn cli(args: &[&str], cwd: &Path) -> Output {
    Command::new(BIN).args(args).current_dir(cwd).env("ICL_DATA", cwd).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn check(o: &Output) {
    assert!(o.status.success(), "stdout:\n{}\nstderr:\n{}", stdout(o), String::from_utf8_lossy(&o.stderr));
}

/// A MultiWOZ-style release directory holding `n` synthetic dialogues; the
/// last two are listed as dev and test.
fn release_dir(dir: &Path, n: usize) {
    let mut data = Map::new();
    for j in 0..n {
        let d = common::synthetic_dialogue(j, "x", false);
        let mut log = Vec::new();
        let mut user_turn = 0;
        for u in &d.utterances {
            if u.speaker == icl_dst::Speaker::User {
                log.push(json!({"text": u.text, "metadata": {}}));
                let mut meta = Map::new();
                for (domain, key, value) in d.gold_states[user_turn].state.iter() {
                    let entry = meta.entry(domain.to_string()).or_insert_with(|| json!({"book": {"booked": []}, "semi": {}}));
                    entry["semi"][key] = json!(value);
                }
                log.push(json!({"text": "ok", "metadata": meta}));
                user_turn += 1;
            }
        }
        data.insert(format!("D{j:03}.json"), json!({"log": log}));
    }
    std::fs::write(dir.join("data.json"), Value::Object(data).to_string()).unwrap();
    std::fs::write(dir.join("valListFile.json"), format!("D{:03}.json\n", n - 2)).unwrap();
    std::fs::write(dir.join("testListFile.json"), format!("D{:03}.json\n", n - 1)).unwrap();
}

#[test]
fn import_release_directory() {
    let dir = tempfile::tempdir().unwrap();
    release_dir(dir.path(), 6);
    let o = cli(&["import", "--dir", ".", "--out", "corpus"], dir.path());
    check(&o);
    assert!(stdout(&o).contains("train: 12 turns"), "{}", stdout(&o));
    let test = icl_dst::load_corpus(dir.path().join("corpus/test.jsonl")).unwrap();
    assert_eq!(test.len(), 3);
    assert_eq!(test[2].gold_state.iter().count(), 3);
    assert_eq!(icl_dst::load_corpus(dir.path().join("corpus/dev.jsonl")).unwrap().len(), 3);
}

fn write_corpora(dir: &Path) {
    let (train, test) = common::synthetic_corpus();
    icl_dst::save_corpus(dir.join("train.jsonl"), &train).unwrap();
    icl_dst::save_corpus(dir.join("test.jsonl"), &test).unwrap();
}

const CONFIG: &str = r#"
name = "cli"
output_dir = "${ICL_DATA}/runs"
parallelism = 2

[corpus]
train = "train.jsonl"
test = "test.jsonl"

[embedding]
source = { kind = "mock", dim = 512 }

[prompt]
max_demos = 1
"#;

#[test]
fn run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    write_corpora(dir.path());
    std::fs::write(dir.path().join("config.toml"), CONFIG).unwrap();

    let o = cli(&["run", "--config", "config.toml"], dir.path());
    check(&o);
    assert!(stdout(&o).contains("precision 1.0000 recall 1.0000"), "{}", stdout(&o));
    let run_dir = dir.path().join("runs/cli_emb-ua_hist-ua_tags-on_k1_slot");
    assert!(run_dir.join("metrics.json").is_file());

    // a second invocation resumes a complete run without new work
    check(&cli(&["run", "--config", "config.toml"], dir.path()));

    let o = cli(&["report", "runs", "--out", "report"], dir.path());
    check(&o);
    assert!(stdout(&o).contains("cli_emb-ua_hist-ua_tags-on_k1_slot"));
    let relevance = std::fs::read_to_string(dir.path().join("report/relevance_coverage.csv")).unwrap();
    assert_eq!(relevance.lines().count(), 31);
    assert!(dir.path().join("report/results.csv").is_file());
}

#[test]
fn changed_config_refuses_to_resume() {
    let dir = tempfile::tempdir().unwrap();
    write_corpora(dir.path());
    std::fs::write(dir.path().join("config.toml"), CONFIG).unwrap();
    check(&cli(&["run", "--config", "config.toml", "--max-new-samples", "5"], dir.path()));
    let changed = CONFIG.replace("[prompt]", "[prompt]\ninstruction = \"Fill the slots.\"");
    std::fs::write(dir.path().join("config.toml"), changed).unwrap();
    let o = cli(&["run", "--config", "config.toml"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn dry_run_writes_prompts_only() {
    let dir = tempfile::tempdir().unwrap();
    write_corpora(dir.path());
    std::fs::write(dir.path().join("config.toml"), CONFIG).unwrap();
    let o = cli(&["run", "--config", "config.toml", "--dry-run", "--k", "3", "--sample-limit", "4"], dir.path());
    check(&o);
    assert!(stdout(&o).starts_with("4 samples"), "{}", stdout(&o));
    let run_dir = dir.path().join("runs/cli_emb-ua_hist-ua_tags-on_k3_slot");
    assert!(!run_dir.join("records.jsonl").exists());
    let prompts = std::fs::read_dir(run_dir.join("prompts")).unwrap().count();
    assert!(prompts >= 4);
}

#[test]
fn precomputed_store_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    write_corpora(dir.path());
    std::fs::write(dir.path().join("config.toml"), CONFIG).unwrap();
    check(&cli(&["embed", "--config", "config.toml", "--out", "store.jsonl"], dir.path()));
    let o = cli(&["embed", "--config", "config.toml", "--out", "store.jsonl"], dir.path());
    assert!(stdout(&o).contains("up to date"));

    let precomputed = CONFIG.replace(r#"{ kind = "mock", dim = 512 }"#, r#"{ kind = "precomputed", store = "store.jsonl" }"#);
    std::fs::write(dir.path().join("pre.toml"), &precomputed).unwrap();
    let o = cli(&["run", "--config", "pre.toml"], dir.path());
    check(&o);
    assert!(stdout(&o).contains("precision 1.0000 recall 1.0000"));

    // a store embedded from user turns only cannot serve a user-agent run
    check(&cli(&["embed", "--config", "config.toml", "--out", "u.jsonl", "--mode", "user_only"], dir.path()));
    std::fs::write(dir.path().join("u.toml"), precomputed.replace("store.jsonl", "u.jsonl")).unwrap();
    let o = cli(&["run", "--config", "u.toml"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("mode"));
}

#[test]
fn strict_k_marks_samples_unfittable_or_failed() {
    let dir = tempfile::tempdir().unwrap();
    write_corpora(dir.path());
    let tight = CONFIG.replace("max_demos = 1", "max_demos = 3\ntoken_budget = 120\ngeneration_reserve = 8");
    std::fs::write(dir.path().join("config.toml"), tight).unwrap();
    let o = cli(&["run", "--config", "config.toml", "--strict-k"], dir.path());
    check(&o);
    assert!(!stdout(&o).contains("0 failed, 0 unfittable"), "{}", stdout(&o));
}

#[test]
fn grid_reports_failed_points() {
    let dir = tempfile::tempdir().unwrap();
    write_corpora(dir.path());
    let grid = format!("{CONFIG}\n[grid]\nk = [1, 3]\n");
    std::fs::write(dir.path().join("config.toml"), &grid).unwrap();
    let o = cli(&["grid", "--config", "config.toml"], dir.path());
    check(&o);
    let csv = std::fs::read_to_string(dir.path().join("runs/grid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    std::fs::write(dir.path().join("empty.jsonl"), "").unwrap();
    let stores = format!("{CONFIG}\n[grid]\nembedding_store = [\"empty.jsonl\"]\n");
    std::fs::write(dir.path().join("bad.toml"), stores).unwrap();
    let o = cli(&["grid", "--config", "bad.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stdout(&o));
}

#[test]
fn repair_test_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    check(&cli(&["repair-test"], dir.path()));
    std::fs::write(dir.path().join("cases.jsonl"), "{\"id\": \"x\", \"class\": \"junk\", \"raw\": \"{{{\"}\n").unwrap();
    let o = cli(&["repair-test", "--file", "cases.jsonl"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("unparseable: x"));
}

#[test]
fn bad_arguments_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!cli(&["run", "--config", "missing.toml"], dir.path()).status.success());
    assert!(!cli(&["import", "--out", "x"], dir.path()).status.success());
}
