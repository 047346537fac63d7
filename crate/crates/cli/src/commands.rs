//! Subcommand implementations. Each returns the error records it emitted;
//! a hard failure before any artifact is complete is an `Err`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use memtree_core::construction::{chunk_turns, ingest_stream, IngestOutcome};
use memtree_core::eval::{evaluate, generate_benchmark, EvalConfig, EvalPolicies, QaCase};
use memtree_core::hindsight::{curate, export_sft, hindsight_scores, EvidenceEntry, EvidenceMap};
use memtree_core::memory::{MemoryKind, TurnId, TurnRecord};
use memtree_core::mot::{run_query_ensemble, QueryEnsemble};
use memtree_core::policy::{Policy, RecordingPolicy};
use memtree_core::retrieval::{retrieve_loop, trajectory_jsonl, RetrievalConfig, Sampling};
use memtree_core::rng::derive_seed_n;
use memtree_core::toy::{curve_text, train, SyntheticEnv};

use crate::config::RunConfig;
use crate::store::{jsonl, read_jsonl, write_file, write_meta, StoreDir, META};

pub type ErrorRecords = Vec<String>;

pub struct RunContext {
    pub config: RunConfig,
    pub record_trace: Option<PathBuf>,
}

/// The configured policy, optionally wrapped in a recorder.
struct Policies {
    policy: Arc<dyn Policy>,
    recorder: Option<Arc<RecordingPolicy<Arc<dyn Policy>>>>,
}

impl Policies {
    fn new(ctx: &RunContext) -> Result<Self> {
        let inner = ctx.config.policy()?;
        if ctx.record_trace.is_some() {
            let recorder = Arc::new(RecordingPolicy::new(inner));
            Ok(Policies { policy: recorder.clone(), recorder: Some(recorder) })
        } else {
            Ok(Policies { policy: inner, recorder: None })
        }
    }

    fn finish(&self, ctx: &RunContext) -> Result<()> {
        if let (Some(rec), Some(path)) = (&self.recorder, &ctx.record_trace) {
            rec.write_jsonl(path).with_context(|| format!("writing trace {}", path.display()))?;
        }
        Ok(())
    }
}

/// A question with its gold annotation. Extra fields (such as a benchmark
/// category) are ignored, so benchmark case files load directly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QaRecord {
    #[serde(default)]
    pub case_id: String,
    pub query: String,
    #[serde(default)]
    pub gold_answer: String,
    #[serde(default)]
    pub evidence_turn_ids: BTreeSet<TurnId>,
}

fn kind_counts(dir: &StoreDir) -> String {
    MemoryKind::ALL
        .iter()
        .map(|k| format!("{} {}", k.as_str(), dir.db.store().count(*k)))
        .collect::<Vec<_>>()
        .join(", ")
}

// ---------------------------------------------------------------- ingest

pub fn ingest(ctx: &RunContext, stream: &Path, store: &Path) -> Result<ErrorRecords> {
    let turns: Vec<TurnRecord> = read_jsonl(stream)?;
    let embedder = ctx.config.embedder()?;
    let mut dir = if StoreDir::exists(store) {
        StoreDir::open(store, embedder)?
    } else {
        StoreDir::empty(store, embedder)
    };
    let policies = Policies::new(ctx)?;
    let chunks = chunk_turns(&turns, ctx.config.construction.chunk_size);
    let p = &*policies.policy;
    let (outcome, errors): (IngestOutcome, ErrorRecords) =
        match ingest_stream(&mut dir.db, &chunks, p, p, &ctx.config.construction, &dir.actions) {
            Ok(o) => (o, Vec::new()),
            Err(failure) => {
                let message = failure.to_string();
                (failure.partial, vec![message])
            }
        };
    dir.absorb_journal();
    let invalid = outcome.actions.iter().filter(|a| !a.valid_format).count();
    let new_actions = outcome.actions.len();
    dir.actions.extend(outcome.actions);
    dir.prompts.extend(outcome.prompts);
    dir.save()?;
    write_meta(&store.join(META), "ingest", ctx.config.seed)?;
    policies.finish(ctx)?;
    println!(
        "ingested {} turns in {} chunks: {} actions ({} invalid); store: {}",
        turns.len(),
        outcome.chunks,
        new_actions,
        invalid,
        kind_counts(&dir)
    );
    Ok(errors)
}

// ---------------------------------------------------------------- query

pub fn query(
    ctx: &RunContext,
    store: &Path,
    question: &str,
    max_steps: Option<usize>,
    top_k: Option<usize>,
    trajectory: &Path,
) -> Result<ErrorRecords> {
    let dir = StoreDir::open(store, ctx.config.embedder()?)?;
    let config = RetrievalConfig {
        max_steps: max_steps.unwrap_or(ctx.config.retrieval.max_steps),
        top_k: top_k.unwrap_or(ctx.config.retrieval.top_k),
        ..ctx.config.retrieval.clone()
    };
    let policies = Policies::new(ctx)?;
    let t = retrieve_loop(question, &dir.db.snapshot(), &*policies.policy, &config, Sampling::greedy())?;
    write_file(trajectory, &trajectory_jsonl(&t))?;
    policies.finish(ctx)?;
    println!("{}", t.answer);
    Ok(Vec::new())
}

// ---------------------------------------------------------------- mot

pub fn ensemble_file_name(index: usize) -> String {
    format!("ensemble-{index:04}.json")
}

pub fn mot(ctx: &RunContext, store: &Path, qa: &Path, out: &Path) -> Result<ErrorRecords> {
    let records: Vec<QaRecord> = read_jsonl(qa)?;
    let dir = StoreDir::open(store, ctx.config.embedder()?)?;
    let snapshot = dir.db.snapshot();
    let policies = Policies::new(ctx)?;
    let cfg = &ctx.config;
    let ensembles: Vec<QueryEnsemble> = records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let seed = derive_seed_n(cfg.seed, "mot-query", &[i as u64]);
            run_query_ensemble(
                &r.query,
                &r.gold_answer,
                &r.evidence_turn_ids,
                &snapshot,
                &*policies.policy,
                &cfg.retrieval,
                &cfg.ensemble,
                seed,
            )
        })
        .collect::<Result<_, _>>()?;

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut errors = Vec::new();
    let mut report = String::new();
    for (i, e) in ensembles.iter().enumerate() {
        write_file(&out.join(ensemble_file_name(i)), &serde_json::to_string_pretty(e)?)?;
        for tree in &e.trees {
            let failures = tree.seed_failure.iter().chain(tree.log.iter().filter_map(|x| x.failed.as_ref()));
            for f in failures {
                errors.push(format!("query {i} tree {}: {f}", tree.tree_id));
            }
        }
        let line = json!({
            "query_index": i,
            "query": e.query,
            "seed": e.seed,
            "nodes": e.trees.iter().map(|t| t.nodes.len()).sum::<usize>(),
            "leaves": e.leaves().len(),
            "per_tree": e.report.per_tree,
            "global": e.report.global,
        });
        report.push_str(&line.to_string());
        report.push('\n');
    }
    write_file(&out.join("advantages.jsonl"), &report)?;
    write_meta(&out.join(META), "mot", cfg.seed)?;
    policies.finish(ctx)?;
    let nodes: usize = ensembles.iter().flat_map(|e| e.trees.iter().map(|t| t.nodes.len())).sum();
    println!("built {} ensembles ({} nodes) into {}", ensembles.len(), nodes, out.display());
    Ok(errors)
}

// ---------------------------------------------------------------- hindsight

pub fn load_ensembles(dir: &Path) -> Result<Vec<QueryEnsemble>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.starts_with("ensemble-") && name.ends_with(".json")
        })
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        })
        .collect()
}

pub fn hindsight(
    ctx: &RunContext,
    store: &Path,
    ensembles: &Path,
    evidence: Option<&Path>,
    out: &Path,
    scores_out: Option<&Path>,
) -> Result<ErrorRecords> {
    let dir = StoreDir::open(store, ctx.config.embedder()?)?;
    let ensembles = load_ensembles(ensembles)?;
    let evidence: EvidenceMap = match evidence {
        Some(path) => read_jsonl::<QaRecord>(path)?
            .into_iter()
            .map(|r| (r.query, EvidenceEntry { gold_answer: r.gold_answer, evidence_turn_ids: r.evidence_turn_ids }))
            .collect(),
        None => EvidenceMap::new(),
    };
    let h = &ctx.config.hindsight;
    let scored = hindsight_scores(&dir.actions, &ensembles, &evidence, h);
    let dataset = curate(&dir.actions, &scored, h.keep_fraction);
    let text = export_sft(&dataset, &dir.actions, &dir.prompts)?;
    write_file(out, &text)?;
    if let Some(path) = scores_out {
        write_file(path, &jsonl(&scored))?;
    }
    let mut per_category: std::collections::BTreeMap<&str, usize> = Default::default();
    for e in &dataset.entries {
        *per_category.entry(e.category.as_str()).or_default() += 1;
    }
    let summary: Vec<String> = per_category.iter().map(|(c, n)| format!("{c} {n}")).collect();
    println!(
        "scored {} actions over {} queries; kept {} ({})",
        scored.len(),
        ensembles.len(),
        dataset.entries.len(),
        summary.join(", ")
    );
    Ok(Vec::new())
}

// ---------------------------------------------------------------- toytrain

pub fn toytrain(ctx: &RunContext, curve: &Path, report_out: Option<&Path>) -> Result<ErrorRecords> {
    let cfg = &ctx.config;
    let env = SyntheticEnv::generate(cfg.toy.env_seed, cfg.trainer.instances, cfg.toy.max_depth);
    let report = train(&env, &cfg.trainer, cfg.seed)?;
    write_file(curve, &curve_text(&report.curve))?;
    if let Some(path) = report_out {
        write_file(path, &serde_json::to_string_pretty(&report)?)?;
    }
    println!("mean reward {:.4} -> {:.4} over {} steps", report.initial_reward(), report.final_reward(), cfg.trainer.steps);
    Ok(Vec::new())
}

// ---------------------------------------------------------------- eval

pub fn eval(ctx: &RunContext, out: &Path, stream: Option<&Path>, cases: Option<&Path>) -> Result<ErrorRecords> {
    let cfg = &ctx.config;
    let (turns, cases): (Vec<TurnRecord>, Vec<QaCase>) = match (stream, cases) {
        (Some(s), Some(c)) => (read_jsonl(s)?, read_jsonl(c)?),
        (None, None) => {
            let bench = generate_benchmark(cfg.seed, &cfg.benchmark);
            (bench.stream, bench.cases)
        }
        _ => bail!("--stream and --cases must be given together"),
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    if stream.is_none() {
        write_file(&out.join("stream.jsonl"), &jsonl(&turns))?;
        write_file(&out.join("cases.jsonl"), &jsonl(&cases))?;
    }
    let policies = Policies::new(ctx)?;
    let p = &*policies.policy;
    let config = EvalConfig {
        construction: cfg.construction.clone(),
        retrieval: cfg.retrieval.clone(),
        accuracy_rule: cfg.eval.accuracy_rule,
    };
    let run = evaluate(&turns, &cases, &EvalPolicies { formation: p, evolution: p, retrieval: p }, cfg.embedder()?, &config)?;
    let table = run.report.table();
    write_file(&out.join("report.jsonl"), &run.report.jsonl())?;
    write_file(&out.join("table.txt"), &table)?;
    write_meta(&out.join(META), "eval", cfg.seed)?;
    policies.finish(ctx)?;
    print!("{table}");
    Ok(run.report.cases.iter().filter_map(|c| c.error.as_ref().map(|e| format!("case {}: {e}", c.case_id))).collect())
}
