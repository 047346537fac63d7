//! `memtree`: build a memory store from a conversation stream, query it,
//! grow rollout trees, score construction actions in hindsight, train the
//! toy policy and run the benchmark.

mod commands;
mod config;
mod store;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use commands::RunContext;
use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "memtree", version, about)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Records every policy turn to this file for later replay.
    #[arg(long, global = true)]
    record_trace: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Builds (or extends) a store directory from a JSONL turn stream.
    Ingest {
        stream: PathBuf,
        #[arg(long)]
        store: PathBuf,
    },
    /// Answers one question against a store.
    Query {
        question: String,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long, default_value = "trajectory.jsonl")]
        trajectory: PathBuf,
    },
    /// Builds a scored tree ensemble for each question of a QA file.
    Mot {
        qa: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scores construction actions against ensembles and exports the kept ones.
    Hindsight {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        ensembles: PathBuf,
        /// QA file with gold evidence; without it only the trace gate fires.
        #[arg(long)]
        evidence: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-action scores as JSONL.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Trains the toy policy and writes its learning curve.
    Toytrain {
        #[arg(long, default_value = "curve.txt")]
        curve: PathBuf,
        /// Full training report (curve and policies) as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Ingests a stream, answers its cases and writes the report files.
    /// Without --stream/--cases a synthetic benchmark is generated from the seed.
    Eval {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        stream: Option<PathBuf>,
        #[arg(long)]
        cases: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<Vec<String>> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate().context("invalid configuration")?;
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global()?;
    }
    let ctx = RunContext { config, record_trace: cli.record_trace };
    match &cli.command {
        Command::Ingest { stream, store } => commands::ingest(&ctx, stream, store),
        Command::Query { question, store, max_steps, top_k, trajectory } => {
            commands::query(&ctx, store, question, *max_steps, *top_k, trajectory)
        }
        Command::Mot { qa, store, out } => commands::mot(&ctx, store, qa, out),
        Command::Hindsight { store, ensembles, evidence, out, scores } => {
            commands::hindsight(&ctx, store, ensembles, evidence.as_deref(), out, scores.as_deref())
        }
        Command::Toytrain { curve, report } => commands::toytrain(&ctx, curve, report.as_deref()),
        Command::Eval { out, stream, cases } => commands::eval(&ctx, out, stream.as_deref(), cases.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(errors) if errors.is_empty() => ExitCode::SUCCESS,
        Ok(errors) => {
            for e in &errors {
                eprintln!("error: {e}");
            }
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
