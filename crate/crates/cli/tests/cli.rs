use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use memtree_core::hindsight::keep_count;
use memtree_core::memory::persist::{replay_log, snapshot_json};
use memtree_core::mot::QueryEnsemble;
use serde_json::Value;
use tempfile::TempDir;

const SMALL: &str = r#"
seed = 3
[benchmark]
people = 4
single_hop = 4
multi_hop = 1
temporal = 2
update = 2
statements_per_session = 4
[ensemble]
g = 2
m = 1
[trainer]
steps = 4
instances = 8
batch_queries = 2
"#;

struct Sandbox {
    dir: TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let s = Sandbox { dir: TempDir::new().unwrap() };
        s.write("config.toml", SMALL);
        s
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path(name);
        fs::write(&p, text).unwrap();
        p
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_memtree"))
            .current_dir(self.dir.path())
            .arg("--config")
            .arg(self.path("config.toml"))
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    /// Generates the synthetic benchmark into `bench/` and ingests it into `store/`.
    fn bench_store(&self) {
        self.ok(&["eval", "--out", "bench"]);
        self.ok(&["ingest", "bench/stream.jsonl", "--store", "store"]);
    }
}

fn lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

/// Step records of a trajectory file.
fn steps(path: &Path) -> Vec<Value> {
    lines(path).into_iter().filter(|r| r["record"] == "step").map(|r| r["step"].clone()).collect()
}

/// Every file under `dir` except run metadata, keyed by name.
fn artifacts(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "meta.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

const TWO_TURNS: &str = r#"{"turn_id":"D1:1","session_id":"S1","speaker":"Alice","content":"I started working at Acme on May 1.","turn_time":"2023-05-01"}
{"turn_id":"D1:2","session_id":"S1","speaker":"Bob","content":"I live in Austin.","turn_time":"2023-05-01"}
"#;

#[test]
fn ingest_two_turns_logs_raw_adds() {
    let s = Sandbox::new();
    s.write("stream.jsonl", TWO_TURNS);
    let stdout = s.ok(&["ingest", "stream.jsonl", "--store", "store"]);
    assert!(stdout.contains("ingested 2 turns"), "{stdout}");
    let raw_adds = lines(&s.path("store/ops.jsonl"))
        .iter()
        .filter(|op| op["op"] == "add" && op["item"]["kind"] == "raw")
        .count();
    assert!(raw_adds >= 2);
    for f in ["ops.jsonl", "snapshot.json", "index.jsonl", "actions.jsonl", "prompts.jsonl", "meta.json"] {
        assert!(s.path("store").join(f).is_file(), "{f}");
    }
}

#[test]
fn malformed_line_is_reported_and_nothing_persisted() {
    let s = Sandbox::new();
    s.write("stream.jsonl", &format!("{TWO_TURNS}{{\"turn_id\": \"D1:3\", oops\n"));
    let out = s.run(&["ingest", "stream.jsonl", "--store", "store"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 3"), "{stderr}");
    assert!(!s.path("store").exists());
}

#[test]
fn log_replay_reproduces_snapshot() {
    let s = Sandbox::new();
    s.bench_store();
    let replayed = replay_log(&s.path("store/ops.jsonl")).unwrap();
    assert_eq!(snapshot_json(&replayed), fs::read_to_string(s.path("store/snapshot.json")).unwrap());
}

#[test]
fn split_ingest_matches_single_pass() {
    let s = Sandbox::new();
    s.ok(&["eval", "--out", "bench"]);
    let text = fs::read_to_string(s.path("bench/stream.jsonl")).unwrap();
    let all: Vec<&str> = text.lines().collect();
    let (a, b) = all.split_at(all.len() / 2);
    s.write("a.jsonl", &(a.join("\n") + "\n"));
    s.write("b.jsonl", &(b.join("\n") + "\n"));
    s.ok(&["ingest", "bench/stream.jsonl", "--store", "whole"]);
    s.ok(&["ingest", "a.jsonl", "--store", "split"]);
    s.ok(&["ingest", "b.jsonl", "--store", "split"]);
    assert_eq!(artifacts(&s.path("whole")), artifacts(&s.path("split")));
}

#[test]
fn recorded_trace_replays_ingest() {
    let s = Sandbox::new();
    s.write("stream.jsonl", TWO_TURNS);
    s.ok(&["--record-trace", "trace.jsonl", "ingest", "stream.jsonl", "--store", "a"]);
    s.write("config.toml", &format!("{SMALL}\n[policy]\nbackend = \"replay\"\ntrace = \"trace.jsonl\"\n"));
    s.ok(&["ingest", "stream.jsonl", "--store", "b"]);
    assert_eq!(artifacts(&s.path("a")), artifacts(&s.path("b")));
}

#[test]
fn query_answers_from_fixture_store() {
    let s = Sandbox::new();
    s.write("stream.jsonl", TWO_TURNS);
    s.ok(&["ingest", "stream.jsonl", "--store", "store"]);
    let stdout = s.ok(&["query", "Where does Alice work?", "--store", "store", "--trajectory", "t.jsonl"]);
    assert!(stdout.contains("Acme"), "{stdout}");
    let steps = steps(&s.path("t.jsonl"));
    assert!(!steps.is_empty());
    assert_eq!(steps.last().unwrap()["action"]["tool_name"], "finish");
}

#[test]
fn query_on_missing_store_fails() {
    let s = Sandbox::new();
    let out = s.run(&["query", "anything", "--store", "nowhere"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
    assert!(!s.path("trajectory.jsonl").exists());
}

#[test]
fn max_steps_flag_caps_trajectory() {
    let s = Sandbox::new();
    s.bench_store();
    let cases = lines(&s.path("bench/cases.jsonl"));
    let mut saw_forced = false;
    for case in &cases {
        let q = case["query"].as_str().unwrap();
        s.ok(&["query", q, "--store", "store", "--max-steps", "1", "--trajectory", "t.jsonl"]);
        let steps = steps(&s.path("t.jsonl"));
        assert!(steps.len() <= 2, "{q}: {} steps", steps.len());
        if steps.len() == 2 {
            assert_eq!(steps[1]["forced"], true);
            saw_forced = true;
        }
    }
    assert!(saw_forced, "no query needed the forced answer");
}

fn stats(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (mean, (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt())
}

#[test]
fn mot_is_deterministic_and_reports_match() {
    let s = Sandbox::new();
    s.bench_store();
    s.ok(&["mot", "bench/cases.jsonl", "--store", "store", "--out", "m1"]);
    s.ok(&["--jobs", "1", "mot", "bench/cases.jsonl", "--store", "store", "--out", "m2"]);
    assert_eq!(artifacts(&s.path("m1")), artifacts(&s.path("m2")));

    let report = lines(&s.path("m1/advantages.jsonl"));
    assert_eq!(report.len(), lines(&s.path("bench/cases.jsonl")).len());
    for (i, row) in report.iter().enumerate() {
        let e: QueryEnsemble =
            serde_json::from_str(&fs::read_to_string(s.path(&format!("m1/ensemble-{i:04}.json"))).unwrap()).unwrap();
        let mut all = Vec::new();
        let mut nodes = 0;
        for (t, tree) in e.trees.iter().enumerate() {
            // Seed path plus every grafted branch.
            let grafted: usize = tree.log.iter().map(|x| x.new_nodes.len()).sum();
            assert_eq!(tree.nodes.len(), tree.seed_path.len() + grafted);
            nodes += tree.nodes.len();
            let rewards: Vec<f64> = tree.nodes.iter().map(|n| n.reward).collect();
            let (mean, std) = stats(&rewards);
            assert!((row["per_tree"][t]["mean"].as_f64().unwrap() - mean).abs() < 1e-12);
            assert!((row["per_tree"][t]["std"].as_f64().unwrap() - std).abs() < 1e-12);
            all.extend(rewards);
        }
        assert_eq!(row["nodes"].as_u64().unwrap() as usize, nodes);
        let (mean, std) = stats(&all);
        assert!((row["global"]["mean"].as_f64().unwrap() - mean).abs() < 1e-12);
        assert!((row["global"]["std"].as_f64().unwrap() - std).abs() < 1e-12);
    }
}

#[test]
fn hindsight_curates_top_half_per_category() {
    let s = Sandbox::new();
    s.write("config.toml", &format!("{SMALL}\n[hindsight]\nkeep_fraction = 0.5\n"));
    s.bench_store();
    s.ok(&["mot", "bench/cases.jsonl", "--store", "store", "--out", "mot"]);
    s.ok(&[
        "hindsight", "--store", "store", "--ensembles", "mot", "--evidence", "bench/cases.jsonl", "--out", "sft.jsonl",
        "--scores", "scores.jsonl",
    ]);
    let scores = lines(&s.path("scores.jsonl"));
    let mut by_cat: BTreeMap<String, Vec<(f64, usize, String)>> = BTreeMap::new();
    for (pos, row) in scores.iter().enumerate() {
        let cat = row["category"].as_str().unwrap();
        if row["valid_format"] == true && cat != "create_raw" {
            by_cat.entry(cat.to_owned()).or_default().push((
                row["score"].as_f64().unwrap(),
                pos,
                row["action_id"].as_str().unwrap().to_owned(),
            ));
        }
    }
    let mut expected = BTreeSet::new();
    for rows in by_cat.values_mut() {
        rows.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let k = rows.len().div_ceil(2);
        assert_eq!(k, keep_count(rows.len(), 0.5));
        expected.extend(rows[..k].iter().map(|r| r.2.clone()));
    }
    let exported: BTreeSet<String> = lines(&s.path("sft.jsonl"))[1..]
        .iter()
        .map(|r| r["action_id"].as_str().unwrap().to_owned())
        .collect();
    assert_eq!(exported, expected);
}

/// Drops the arguments of every `create_fact` call in a recorded trace.
fn corrupt_trace(path: &Path) -> usize {
    let mut broken = 0;
    let mut out = String::new();
    for mut record in lines(path) {
        for call in record["turn"]["tool_calls"].as_array_mut().unwrap() {
            if call["tool_name"] == "create_fact" {
                call["arguments"] = serde_json::json!({});
                broken += 1;
            }
        }
        out.push_str(&record.to_string());
        out.push('\n');
    }
    fs::write(path, out).unwrap();
    broken
}

#[test]
fn hindsight_without_evidence_uses_trace_gate_only() {
    let s = Sandbox::new();
    s.ok(&["eval", "--out", "bench"]);
    s.ok(&["--record-trace", "trace.jsonl", "ingest", "bench/stream.jsonl", "--store", "scratch"]);
    assert!(corrupt_trace(&s.path("trace.jsonl")) > 0);
    s.write("config.toml", &format!("{SMALL}\n[policy]\nbackend = \"replay\"\ntrace = \"trace.jsonl\"\n"));
    // The store diverges from the recording after the first broken call, so
    // replay aborts; the partial store up to that point is still persisted.
    let out = s.run(&["ingest", "bench/stream.jsonl", "--store", "store"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ingestion aborted"));
    s.write("config.toml", SMALL);
    s.ok(&["mot", "bench/cases.jsonl", "--store", "store", "--out", "mot"]);
    s.ok(&["hindsight", "--store", "store", "--ensembles", "mot", "--out", "sft.jsonl", "--scores", "scores.jsonl"]);
    let scores = lines(&s.path("scores.jsonl"));
    assert!(scores.iter().all(|r| r["alignment_hits"] == 0));
    assert!(scores.iter().any(|r| r["trace_hits"].as_u64().unwrap() > 0));
    let invalid: BTreeSet<&str> =
        scores.iter().filter(|r| r["valid_format"] == false).map(|r| r["action_id"].as_str().unwrap()).collect();
    assert!(!invalid.is_empty());
    let exported = lines(&s.path("sft.jsonl"));
    assert!(exported.len() > 1);
    assert!(exported[1..].iter().all(|r| !invalid.contains(r["action_id"].as_str().unwrap())));

    s.write("config.toml", &format!("{SMALL}\n[hindsight]\nlambda = 0.0\n"));
    s.ok(&["hindsight", "--store", "store", "--ensembles", "mot", "--out", "sft0.jsonl", "--scores", "scores0.jsonl"]);
    assert!(lines(&s.path("scores0.jsonl")).iter().all(|r| r["score"] == 0.0));
}

#[test]
fn toytrain_is_seed_deterministic() {
    let s = Sandbox::new();
    let stdout = s.ok(&["toytrain", "--curve", "a.txt"]);
    assert!(stdout.contains("mean reward"));
    s.ok(&["toytrain", "--curve", "b.txt"]);
    let a = fs::read_to_string(s.path("a.txt")).unwrap();
    assert_eq!(a, fs::read_to_string(s.path("b.txt")).unwrap());
    assert_eq!(a.lines().filter(|l| !l.starts_with('#')).count(), 5);
    s.ok(&["--seed", "11", "toytrain", "--curve", "c.txt"]);
    assert_ne!(a, fs::read_to_string(s.path("c.txt")).unwrap());
}

#[test]
fn eval_is_deterministic_and_aggregates_match_rows() {
    let s = Sandbox::new();
    s.ok(&["eval", "--out", "e1"]);
    s.ok(&["eval", "--out", "e2", "--stream", "e1/stream.jsonl", "--cases", "e1/cases.jsonl"]);
    let a = artifacts(&s.path("e1"));
    let b = artifacts(&s.path("e2"));
    assert_eq!(a["report.jsonl"], b["report.jsonl"]);
    assert_eq!(a["table.txt"], b["table.txt"]);

    let report = lines(&s.path("e1/report.jsonl"));
    let f1: Vec<f64> = report.iter().filter(|r| r["record"] == "case").map(|r| r["case"]["f1"].as_f64().unwrap()).collect();
    let overall = report.iter().find(|r| r["record"] == "overall").unwrap();
    let mean = f1.iter().sum::<f64>() / f1.len() as f64;
    assert!((overall["aggregate"]["f1"].as_f64().unwrap() - mean).abs() < 1e-12);
}

#[test]
fn policy_errors_give_nonzero_exit_with_artifacts() {
    let s = Sandbox::new();
    s.bench_store();
    s.write("empty.jsonl", "");
    s.write("config.toml", &format!("{SMALL}\n[policy]\nbackend = \"replay\"\ntrace = \"empty.jsonl\"\n"));
    let out = s.run(&["mot", "bench/cases.jsonl", "--store", "store", "--out", "mot"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("replay trace has no turn"));
    assert!(s.path("mot/ensemble-0000.json").is_file());
}

#[test]
fn bad_config_is_rejected() {
    let s = Sandbox::new();
    s.write("config.toml", "seed = 1\nmax_stepz = 3\n");
    let out = s.run(&["toytrain"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("max_stepz"));
    s.write("config.toml", "[hindsight]\nkeep_fraction = 1.5\n");
    let out = s.run(&["toytrain"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("keep_fraction"));
}
