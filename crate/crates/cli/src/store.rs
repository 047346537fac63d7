//! On-disk layout of a memory store directory.
//!
//! ```text
//! ops.jsonl       store operation log (source of truth)
//! snapshot.json   full store state, checked against the log on load
//! index.jsonl     one embedding per live item
//! actions.jsonl   construction action log
//! prompts.jsonl   policy contexts keyed by digest
//! meta.json       run metadata (timestamps live only here)
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use memtree_core::construction::{MemoryAction, PromptArchive};
use memtree_core::db::MemoryDb;
use memtree_core::embedding::{Embedder, IndexEntry, VectorIndex};
use memtree_core::memory::persist::{read_log, read_snapshot, snapshot_json};
use memtree_core::memory::{MemoryStore, StoreOp};
use memtree_core::policy::ChatMessage;

pub const OPS: &str = "ops.jsonl";
pub const SNAPSHOT: &str = "snapshot.json";
pub const INDEX: &str = "index.jsonl";
pub const ACTIONS: &str = "actions.jsonl";
pub const PROMPTS: &str = "prompts.jsonl";
pub const META: &str = "meta.json";

/// Reads newline-delimited JSON, naming the 1-based line of any parse error.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(line).map_err(|e| anyhow!("{}: line {}: {e}", path.display(), i + 1))?;
        out.push(value);
    }
    Ok(out)
}

pub fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(&item).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Writes through a sibling temp file so a crash never leaves a torn file.
pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PromptRecord {
    digest: String,
    messages: Vec<ChatMessage>,
}

#[derive(Debug, Serialize)]
pub struct Meta<'a> {
    pub command: &'a str,
    pub version: &'a str,
    pub seed: u64,
    pub written_unix_secs: u64,
}

pub fn write_meta(path: &Path, command: &str, seed: u64) -> Result<()> {
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let meta = Meta { command, version: env!("CARGO_PKG_VERSION"), seed, written_unix_secs: now };
    write_file(path, &format!("{}\n", serde_json::to_string_pretty(&meta)?))
}

/// A loaded store directory.
pub struct StoreDir {
    pub path: PathBuf,
    pub db: MemoryDb,
    pub ops: Vec<StoreOp>,
    pub actions: Vec<MemoryAction>,
    pub prompts: PromptArchive,
}

impl StoreDir {
    pub fn empty(path: &Path, embedder: Arc<dyn Embedder>) -> Self {
        StoreDir {
            path: path.to_owned(),
            db: MemoryDb::new(embedder),
            ops: Vec::new(),
            actions: Vec::new(),
            prompts: PromptArchive::new(),
        }
    }

    pub fn exists(path: &Path) -> bool {
        path.join(OPS).is_file()
    }

    /// Replays the log, checks it against the snapshot and restores the index
    /// (re-embedding if the index file is missing).
    pub fn open(path: &Path, embedder: Arc<dyn Embedder>) -> Result<Self> {
        if !path.is_dir() {
            bail!("store directory {} does not exist", path.display());
        }
        if !Self::exists(path) {
            bail!("{} is not a store directory (no {OPS})", path.display());
        }
        let ops = read_log(&path.join(OPS))?;
        let mut store = MemoryStore::replay(&ops).context("replaying operation log")?;
        store.take_journal();
        let snapshot = read_snapshot(&path.join(SNAPSHOT))?;
        if snapshot_json(&snapshot) != snapshot_json(&store) {
            bail!("{} disagrees with {}", SNAPSHOT, OPS);
        }
        let index_path = path.join(INDEX);
        let db = if index_path.is_file() {
            let entries: Vec<IndexEntry> = read_jsonl(&index_path)?;
            let index = VectorIndex::from_entries(entries)?;
            let indexed: BTreeSet<_> = index.entries().map(|e| e.item_id).collect();
            if indexed != store.live_ids() {
                bail!("{} does not cover exactly the live items", INDEX);
            }
            MemoryDb::from_parts(store, index, embedder)
        } else {
            MemoryDb::from_store(store, embedder)?
        };
        let actions = if path.join(ACTIONS).is_file() { read_jsonl(&path.join(ACTIONS))? } else { Vec::new() };
        let prompts = if path.join(PROMPTS).is_file() {
            read_jsonl::<PromptRecord>(&path.join(PROMPTS))?
                .into_iter()
                .map(|r| (r.digest, r.messages))
                .collect()
        } else {
            PromptArchive::new()
        };
        Ok(StoreDir { path: path.to_owned(), db, ops, actions, prompts })
    }

    /// Moves newly journaled operations into the in-memory log.
    pub fn absorb_journal(&mut self) {
        let journal = self.db.take_journal();
        self.ops.extend(journal);
    }

    pub fn save(&self) -> Result<()> {
        fs::create_dir_all(&self.path).with_context(|| format!("creating {}", self.path.display()))?;
        let p = |name: &str| self.path.join(name);
        write_file(&p(OPS), &jsonl(&self.ops))?;
        write_file(&p(SNAPSHOT), &snapshot_json(self.db.store()))?;
        write_file(&p(INDEX), &jsonl(self.db.index().entries()))?;
        write_file(&p(ACTIONS), &jsonl(&self.actions))?;
        let prompts = self
            .prompts
            .iter()
            .map(|(digest, messages)| PromptRecord { digest: digest.clone(), messages: messages.clone() });
        write_file(&p(PROMPTS), &jsonl(prompts))?;
        Ok(())
    }
}
