//! Hindsight credit for construction actions: leaf advantages flow back to
//! the actions whose source turns carry the question's evidence or whose
//! items were actually retrieved on the leaf's path. The top-scoring valid
//! actions per tool category form a supervised dataset.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::construction::{MemoryAction, PromptArchive, CREATE_RAW};
use crate::memory::{ItemId, TurnId};
use crate::mot::{cumulative_retrieved, QueryEnsemble};
use crate::policy::ChatMessage;

pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const DEFAULT_KEEP_FRACTION: f64 = 0.5;
pub const SFT_SCHEMA: &str = "memtree.sft";
pub const SFT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryAggregation {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HindsightConfig {
    pub lambda: f64,
    pub keep_fraction: f64,
    pub aggregation: QueryAggregation,
}

impl Default for HindsightConfig {
    fn default() -> Self {
        HindsightConfig { lambda: DEFAULT_LAMBDA, keep_fraction: DEFAULT_KEEP_FRACTION, aggregation: QueryAggregation::Sum }
    }
}

/// Gold annotation for one question.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvidenceEntry {
    pub gold_answer: String,
    #[serde(default)]
    pub evidence_turn_ids: BTreeSet<TurnId>,
}

pub type EvidenceMap = BTreeMap<String, EvidenceEntry>;

/// `ϱ = [X_src ∩ X_evi ≠ ∅] + λ·[an item credited to the action was retrieved on the leaf path]`.
pub fn credit(
    sources: &BTreeSet<TurnId>,
    credited: &BTreeSet<ItemId>,
    evidence: &BTreeSet<TurnId>,
    leaf_retrieved: &BTreeSet<ItemId>,
    lambda: f64,
) -> f64 {
    let aligned = !sources.is_disjoint(evidence);
    let traced = !credited.is_disjoint(leaf_retrieved);
    f64::from(u8::from(aligned)) + lambda * f64::from(u8::from(traced))
}

/// `S = (1/|V|) Σ_v A_total(v)·ϱ(v)` for one question.
pub fn query_score(leaf_advantages: &[f64], gates: &[f64]) -> f64 {
    if leaf_advantages.is_empty() {
        return 0.0;
    }
    leaf_advantages.iter().zip(gates).map(|(a, g)| a * g).sum::<f64>() / leaf_advantages.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredAction {
    pub action_id: String,
    pub category: String,
    pub score: f64,
    /// (question, leaf) pairs where the evidence gate fired.
    pub alignment_hits: usize,
    /// (question, leaf) pairs where the retrieval-trace gate fired.
    pub trace_hits: usize,
    pub valid_format: bool,
}

struct LeafView {
    a_total: f64,
    retrieved: BTreeSet<ItemId>,
}

/// Scores every action against every question's ensemble.
pub fn hindsight_scores(
    actions: &[MemoryAction],
    ensembles: &[QueryEnsemble],
    evidence: &EvidenceMap,
    config: &HindsightConfig,
) -> Vec<ScoredAction> {
    let empty = BTreeSet::new();
    let per_query: Vec<(Vec<LeafView>, &BTreeSet<TurnId>)> = ensembles
        .iter()
        .map(|e| {
            let leaves = e
                .leaves()
                .into_iter()
                .map(|(t, id)| LeafView {
                    a_total: e.trees[t].nodes[id].a_total,
                    retrieved: cumulative_retrieved(&e.trees[t], id),
                })
                .collect();
            let ev = evidence.get(&e.query).map_or(&empty, |x| &x.evidence_turn_ids);
            (leaves, ev)
        })
        .collect();
    let nq = per_query.len().max(1) as f64;
    actions
        .iter()
        .map(|a| {
            let credited: BTreeSet<ItemId> = a.credited_item_ids().cloned().collect();
            let mut total = 0.0;
            let mut alignment_hits = 0;
            let mut trace_hits = 0;
            for (leaves, ev) in &per_query {
                let aligned = !a.source_turn_ids.is_disjoint(ev);
                let mut adv = Vec::with_capacity(leaves.len());
                let mut gates = Vec::with_capacity(leaves.len());
                for leaf in leaves {
                    let traced = !credited.is_disjoint(&leaf.retrieved);
                    alignment_hits += usize::from(aligned);
                    trace_hits += usize::from(traced);
                    adv.push(leaf.a_total);
                    gates.push(credit(&a.source_turn_ids, &credited, ev, &leaf.retrieved, config.lambda));
                }
                total += query_score(&adv, &gates);
            }
            if config.aggregation == QueryAggregation::Mean {
                total /= nq;
            }
            ScoredAction {
                action_id: a.action_id.clone(),
                category: a.category().to_owned(),
                score: total,
                alignment_hits,
                trace_hits,
                valid_format: a.valid_format,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuratedEntry {
    pub action_id: String,
    pub category: String,
    pub score: f64,
    pub context_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuratedDataset {
    pub keep_fraction: f64,
    /// Grouped by category (name order), each group in rank order.
    pub entries: Vec<CuratedEntry>,
}

/// Number kept out of `n` under the ceiling rule.
pub fn keep_count(n: usize, keep_fraction: f64) -> usize {
    ((keep_fraction * n as f64) - 1e-12).ceil().clamp(0.0, n as f64) as usize
}

/// Drops invalid actions (and the unconditional raw archival, which is not
/// a policy decision), ranks the rest by score within each category with
/// earlier actions first on ties, and keeps the top ⌈keep·n⌉ per category.
pub fn curate(actions: &[MemoryAction], scored: &[ScoredAction], keep_fraction: f64) -> CuratedDataset {
    let by_id: HashMap<&str, (usize, &MemoryAction)> =
        actions.iter().enumerate().map(|(i, a)| (a.action_id.as_str(), (i, a))).collect();
    let mut groups: BTreeMap<&str, Vec<(usize, &ScoredAction, &MemoryAction)>> = BTreeMap::new();
    for s in scored {
        let Some(&(pos, action)) = by_id.get(s.action_id.as_str()) else { continue };
        if !action.valid_format || !s.valid_format || s.category == CREATE_RAW {
            continue;
        }
        groups.entry(s.category.as_str()).or_default().push((pos, s, action));
    }
    let mut entries = Vec::new();
    for (category, mut group) in groups {
        group.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
        let keep = keep_count(group.len(), keep_fraction);
        entries.extend(group.into_iter().take(keep).map(|(_, s, a)| CuratedEntry {
            action_id: s.action_id.clone(),
            category: category.to_owned(),
            score: s.score,
            context_digest: a.context_digest.clone(),
        }));
    }
    CuratedDataset { keep_fraction, entries }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HindsightError {
    #[error("no prompt context archived for action {action_id} (digest {digest})")]
    ContextUnreconstructable { action_id: String, digest: String },
    #[error("action {0} not in the action log")]
    UnknownAction(String),
    #[error("malformed dataset line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftHeader {
    pub schema: String,
    pub version: u32,
    pub keep_fraction: f64,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetCall {
    pub name: String,
    pub arguments: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub prompt_messages: Vec<ChatMessage>,
    pub target_tool_call: TargetCall,
    pub score: f64,
    pub category: String,
    pub action_id: String,
}

/// Header line plus one record per curated entry.
pub fn export_sft(dataset: &CuratedDataset, actions: &[MemoryAction], prompts: &PromptArchive) -> Result<String, HindsightError> {
    let by_id: HashMap<&str, &MemoryAction> = actions.iter().map(|a| (a.action_id.as_str(), a)).collect();
    let header = SftHeader {
        schema: SFT_SCHEMA.to_owned(),
        version: SFT_VERSION,
        keep_fraction: dataset.keep_fraction,
        records: dataset.entries.len(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for entry in &dataset.entries {
        let action = by_id
            .get(entry.action_id.as_str())
            .ok_or_else(|| HindsightError::UnknownAction(entry.action_id.clone()))?;
        let messages = prompts.get(&action.context_digest).ok_or_else(|| HindsightError::ContextUnreconstructable {
            action_id: entry.action_id.clone(),
            digest: action.context_digest.clone(),
        })?;
        // serde_json maps are key-sorted, so the target is canonical.
        let record = SftRecord {
            prompt_messages: messages.clone(),
            target_tool_call: TargetCall { name: action.tool_call.tool_name.clone(), arguments: action.tool_call.arguments.clone() },
            score: entry.score,
            category: entry.category.clone(),
            action_id: entry.action_id.clone(),
        };
        out.push_str(&serde_json::to_string(&record).expect("record serializes"));
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_sft(text: &str) -> Result<(SftHeader, Vec<SftRecord>), HindsightError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or(HindsightError::Parse { line: 1, message: "missing header".into() })?;
    let header: SftHeader =
        serde_json::from_str(first).map_err(|e| HindsightError::Parse { line: 1, message: e.to_string() })?;
    let records = lines
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| HindsightError::Parse { line: i + 1, message: e.to_string() }))
        .collect::<Result<Vec<SftRecord>, _>>()?;
    if records.len() != header.records {
        return Err(HindsightError::Parse {
            line: 1,
            message: format!("header announces {} records, found {}", header.records, records.len()),
        });
    }
    Ok((header, records))
}
