//! Trace replay and recording.
//!
//! Turns are keyed by the context fingerprint plus the sampling seed rather
//! than by call order, so parallel rollouts replay identically regardless of
//! scheduling.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{Phase, Policy, PolicyError, PolicyRequest, PolicyTurn};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub digest: String,
    pub phase: Phase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_seed: Option<u64>,
    pub turn: PolicyTurn,
}

#[derive(Debug, Default)]
pub struct ReplayPolicy {
    exact: HashMap<(String, Option<u64>), PolicyTurn>,
    by_digest: HashMap<String, PolicyTurn>,
}

impl ReplayPolicy {
    pub fn new(records: impl IntoIterator<Item = ReplayRecord>) -> Self {
        let mut policy = ReplayPolicy::default();
        for r in records {
            policy.by_digest.entry(r.digest.clone()).or_insert_with(|| r.turn.clone());
            policy.exact.entry((r.digest, r.sample_seed)).or_insert(r.turn);
        }
        policy
    }

    pub fn is_empty(&self) -> bool {
        self.exact.is_empty()
    }

    pub fn from_jsonl(path: &Path) -> std::io::Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: ReplayRecord = serde_json::from_str(line).map_err(|e| {
                std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("{}:{}: {e}", path.display(), i + 1),
                )
            })?;
            records.push(record);
        }
        Ok(ReplayPolicy::new(records))
    }
}

impl Policy for ReplayPolicy {
    fn propose(&self, request: &PolicyRequest) -> Result<PolicyTurn, PolicyError> {
        if request.messages.is_empty() {
            return Err(PolicyError::EmptyContext);
        }
        let digest = request.digest();
        self.exact
            .get(&(digest.clone(), request.sample_seed))
            .or_else(|| self.by_digest.get(&digest))
            .cloned()
            .ok_or(PolicyError::ReplayExhausted)
    }
}

/// Wraps a policy and keeps every turn it produces for later replay.
pub struct RecordingPolicy<P> {
    inner: P,
    records: Mutex<Vec<ReplayRecord>>,
}

impl<P: Policy> RecordingPolicy<P> {
    pub fn new(inner: P) -> Self {
        RecordingPolicy { inner, records: Mutex::new(Vec::new()) }
    }

    /// Recorded turns, sorted by (digest, seed) so output is schedule-independent.
    pub fn records(&self) -> Vec<ReplayRecord> {
        let mut out = self.records.lock().expect("recording lock").clone();
        out.sort_by(|a, b| (&a.digest, a.sample_seed).cmp(&(&b.digest, b.sample_seed)));
        out.dedup_by(|a, b| a.digest == b.digest && a.sample_seed == b.sample_seed);
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> std::io::Result<()> {
        let mut file = fs::File::create(path)?;
        for r in self.records() {
            writeln!(file, "{}", serde_json::to_string(&r).expect("record serializes"))?;
        }
        Ok(())
    }
}

impl<P: Policy> Policy for RecordingPolicy<P> {
    fn propose(&self, request: &PolicyRequest) -> Result<PolicyTurn, PolicyError> {
        let turn = self.inner.propose(request)?;
        self.records.lock().expect("recording lock").push(ReplayRecord {
            digest: request.digest(),
            phase: request.phase,
            sample_seed: request.sample_seed,
            turn: turn.clone(),
        });
        Ok(turn)
    }
}
