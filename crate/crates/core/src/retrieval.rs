//! Multi-step retrieval: propose, validate, search, repeat until `finish`
//! or the step cap, where a final answer-only prompt is issued.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::db::DbSnapshot;
use crate::embedding::EmbedError;
use crate::memory::{ItemId, MemoryItem, MemoryKind};
use crate::policy::{
    estimate_tokens, finish_only_registry, phase_registry, validate, ChatMessage, Phase, PhaseView, Policy,
    PolicyError, PolicyRequest, ToolCall, ValidationResult,
};
use crate::rng::derive_seed_n;

pub const DEFAULT_MAX_STEPS: usize = 6;
pub const DEFAULT_TOP_K: usize = 5;
pub const DEFAULT_HISTORY_BUDGET: usize = 20_480;

pub const DEFAULT_RETRIEVAL_PROMPT: &str = "You answer questions about past conversations using a memory database. \
Call one search tool per step; when the gathered memories suffice, call finish with a concise answer.";

pub const FORCE_ANSWER_PROMPT: &str =
    "Step limit reached. Answer now from the gathered context by calling finish.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub max_steps: usize,
    pub top_k: usize,
    /// Estimated-token ceiling for rendered history; oldest steps drop first.
    pub history_budget: usize,
    pub system_prompt: String,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            max_steps: DEFAULT_MAX_STEPS,
            top_k: DEFAULT_TOP_K,
            history_budget: DEFAULT_HISTORY_BUDGET,
            system_prompt: DEFAULT_RETRIEVAL_PROMPT.to_owned(),
        }
    }
}

/// Sampling controls for one rollout. Step `j` is proposed with sample seed
/// `derive(seed, j)` so a branch with a different seed diverges.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Sampling {
    pub temperature: f64,
    pub seed: Option<u64>,
}

impl Sampling {
    pub fn greedy() -> Self {
        Sampling { temperature: 0.0, seed: None }
    }

    pub fn seeded(temperature: f64, seed: u64) -> Self {
        Sampling { temperature, seed: Some(seed) }
    }

    fn step_seed(&self, step_index: usize) -> Option<u64> {
        self.seed.map(|s| derive_seed_n(s, "step", &[step_index as u64]))
    }
}

/// A search hit joined with the item it points at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedHit {
    pub item_id: ItemId,
    pub kind: MemoryKind,
    pub content: String,
    pub score: f64,
    pub rank: usize,
    #[serde(default)]
    pub turn_time: String,
    #[serde(default)]
    pub start_time: String,
    #[serde(default)]
    pub end_time: String,
}

impl ObservedHit {
    fn from_item(item: &MemoryItem, score: f64, rank: usize) -> Self {
        ObservedHit {
            item_id: item.item_id.clone(),
            kind: item.kind,
            content: item.content.clone(),
            score,
            rank,
            turn_time: item.turn_time.clone(),
            start_time: item.start_time.clone(),
            end_time: item.end_time.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalStep {
    /// 1-based; the forced-answer record uses `max_steps + 1`.
    pub step_index: usize,
    #[serde(default)]
    pub reasoning: String,
    pub action: ToolCall,
    #[serde(default)]
    pub observation: Vec<ObservedHit>,
    pub valid_format: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub violation: Option<String>,
    #[serde(default)]
    pub forced: bool,
}

impl RetrievalStep {
    pub fn is_finish(&self) -> bool {
        self.valid_format && self.action.tool_name == "finish"
    }

    /// Terminal steps end a trajectory: a valid finish or the forced answer.
    pub fn is_terminal(&self) -> bool {
        self.is_finish() || self.forced
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub query: String,
    pub steps: Vec<RetrievalStep>,
    pub retrieved_set: BTreeSet<ItemId>,
    pub answer: String,
    pub finished: bool,
    pub forced: bool,
    /// Characters of context sent to the policy over the whole rollout.
    #[serde(default)]
    pub prompt_chars: usize,
}

impl Trajectory {
    pub fn empty(query: impl Into<String>) -> Self {
        Trajectory {
            query: query.into(),
            steps: Vec::new(),
            retrieved_set: BTreeSet::new(),
            answer: String::new(),
            finished: false,
            forced: false,
            prompt_chars: 0,
        }
    }

    /// Rebuilds a trajectory (retrieved set, answer, flags) from its steps.
    pub fn from_steps(query: impl Into<String>, steps: Vec<RetrievalStep>) -> Trajectory {
        let mut t = Trajectory::empty(query);
        for step in steps {
            t.push(step);
        }
        t
    }

    /// The first `j` steps as an unfinished prefix.
    pub fn truncated(&self, j: usize) -> Trajectory {
        let mut t = Trajectory::empty(self.query.clone());
        for step in self.steps.iter().take(j) {
            t.push(step.clone());
        }
        t.finished = false;
        t.forced = false;
        t.answer.clear();
        t
    }

    fn push(&mut self, step: RetrievalStep) {
        self.retrieved_set.extend(step.observation.iter().map(|h| h.item_id.clone()));
        if step.is_terminal() {
            self.answer = step.action.str_arg("answer").unwrap_or("").to_owned();
            self.finished = true;
            self.forced = step.forced;
        }
        self.steps.push(step);
    }

    pub fn is_complete(&self) -> bool {
        self.finished
    }

    /// Estimated prompt tokens (characters / 4).
    pub fn prompt_tokens(&self) -> usize {
        self.prompt_chars.div_ceil(4)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RetrievalError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("max_steps must be at least 1")]
    ZeroSteps,
    #[error("prefix is already terminal")]
    TerminalPrefix,
}

fn collection_for(tool: &str) -> Option<MemoryKind> {
    match tool {
        "search_summary" => Some(MemoryKind::Summary),
        "search_facts" => Some(MemoryKind::Fact),
        "search_experiences" => Some(MemoryKind::Experience),
        "search_personas" => Some(MemoryKind::Persona),
        "search_turns" => Some(MemoryKind::Raw),
        _ => None,
    }
}

/// Runs one validated action against a snapshot.
pub fn execute_action(call: &ToolCall, db: &DbSnapshot, top_k: usize) -> Result<Vec<ObservedHit>, EmbedError> {
    let Some(kind) = collection_for(&call.tool_name) else {
        return Ok(Vec::new());
    };
    if kind == MemoryKind::Persona {
        if let Some(name) = call.str_arg("name").filter(|n| !n.is_empty()) {
            if let Some(p) = db.store.persona_by_name(name) {
                return Ok(vec![ObservedHit::from_item(p, 1.0, 1)]);
            }
        }
    }
    let k = match call.arguments.get("top_k").and_then(Value::as_u64) {
        Some(k) if kind == MemoryKind::Raw && k >= 1 => k as usize,
        _ => top_k.max(1),
    };
    let query = call.str_arg("query").unwrap_or("");
    let vector = db.embedder.embed(query)?;
    Ok(db
        .index
        .search_topk(&vector, k, Some(kind))
        .into_iter()
        .filter_map(|hit| db.store.get(&hit.item_id).map(|item| ObservedHit::from_item(item, hit.score, hit.rank)))
        .collect())
}

/// Observation text block for one step.
pub fn render_observation(hits: &[ObservedHit]) -> String {
    if hits.is_empty() {
        return "(no results)".to_owned();
    }
    hits.iter()
        .map(|h| {
            format!(
                "[{}] {} {} | {}..{} | {}",
                h.rank,
                h.kind,
                h.item_id,
                h.start_time,
                h.end_time,
                h.content.replace('\n', " / ")
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn step_messages(step: &RetrievalStep) -> Vec<ChatMessage> {
    let mut assistant = String::new();
    if !step.reasoning.is_empty() {
        assistant.push_str(&step.reasoning);
        assistant.push('\n');
    }
    assistant.push_str(&step.action.raw_text);
    let mut out = vec![ChatMessage::assistant(assistant)];
    if !step.is_terminal() {
        let body = match &step.violation {
            Some(v) => format!("Invalid tool call: {v}"),
            None => render_observation(&step.observation),
        };
        out.push(ChatMessage::tool(body));
    }
    out
}

/// Context messages for the next step, dropping the oldest steps once the
/// history exceeds the token budget.
pub fn build_messages(config: &RetrievalConfig, query: &str, history: &[RetrievalStep], force: bool) -> Vec<ChatMessage> {
    let head = vec![ChatMessage::system(config.system_prompt.clone()), ChatMessage::user(format!("Question: {query}"))];
    let tail: Vec<ChatMessage> = if force { vec![ChatMessage::user(FORCE_ANSWER_PROMPT)] } else { Vec::new() };
    let blocks: Vec<Vec<ChatMessage>> = history.iter().map(step_messages).collect();
    let fixed = estimate_tokens(&head) + estimate_tokens(&tail);
    let mut start = 0;
    let mut total: usize = fixed + blocks.iter().map(|b| estimate_tokens(b)).sum::<usize>();
    while total > config.history_budget && start < blocks.len() {
        total -= estimate_tokens(&blocks[start]);
        start += 1;
    }
    let mut messages = head;
    messages.extend(blocks[start..].iter().flatten().cloned());
    messages.extend(tail);
    messages
}

fn request(config: &RetrievalConfig, trajectory: &Trajectory, force: bool, sampling: &Sampling, step_index: usize) -> PolicyRequest {
    PolicyRequest {
        phase: Phase::Retrieval,
        messages: build_messages(config, &trajectory.query, &trajectory.steps, force),
        tools: if force { finish_only_registry() } else { phase_registry(Phase::Retrieval) },
        view: PhaseView::Retrieval {
            query: trajectory.query.clone(),
            history: trajectory.steps.clone(),
            force_answer: force,
        },
        temperature: sampling.temperature,
        sample_seed: sampling.step_seed(step_index),
    }
}

fn check_call(call: &ToolCall, tools: &[crate::policy::ToolSchema]) -> Option<String> {
    if call.tool_name.is_empty() {
        return Some("unparseable tool call".to_owned());
    }
    if let ValidationResult::Violation(v) = validate(call, tools) {
        return Some(v);
    }
    if call.tool_name == "finish" && call.str_arg("answer").is_none_or(|a| a.trim().is_empty()) {
        return Some("empty answer".to_owned());
    }
    None
}

/// Proposes and executes one step. Returns the step and the prompt size.
fn run_step(
    db: &DbSnapshot,
    policy: &dyn Policy,
    config: &RetrievalConfig,
    trajectory: &Trajectory,
    sampling: &Sampling,
    step_index: usize,
    force: bool,
) -> Result<(RetrievalStep, usize), RetrievalError> {
    let req = request(config, trajectory, force, sampling, step_index);
    let chars = req.messages.iter().map(|m| m.content.chars().count()).sum();
    let turn = policy.propose(&req)?;
    let action = turn.tool_calls.into_iter().next().unwrap_or_else(|| ToolCall {
        tool_name: String::new(),
        arguments: serde_json::Map::new(),
        raw_text: turn.reasoning.clone(),
    });
    let violation = check_call(&action, &req.tools);
    let observation = if violation.is_none() { execute_action(&action, db, config.top_k)? } else { Vec::new() };
    let step = RetrievalStep {
        step_index,
        reasoning: turn.reasoning,
        valid_format: violation.is_none(),
        violation,
        observation,
        action,
        forced: force,
    };
    Ok((step, chars))
}

/// Extends a non-terminal prefix until `finish` or the step cap; at the cap
/// a forced answer is requested (falling back to "unknown" if the policy
/// still fails to produce one).
pub fn continue_from(
    prefix: &Trajectory,
    db: &DbSnapshot,
    policy: &dyn Policy,
    config: &RetrievalConfig,
    sampling: Sampling,
) -> Result<Trajectory, RetrievalError> {
    if config.max_steps == 0 {
        return Err(RetrievalError::ZeroSteps);
    }
    if prefix.steps.last().is_some_and(RetrievalStep::is_terminal) {
        return Err(RetrievalError::TerminalPrefix);
    }
    let mut t = prefix.clone();
    while t.steps.len() < config.max_steps {
        let index = t.steps.len() + 1;
        let (step, chars) = run_step(db, policy, config, &t, &sampling, index, false)?;
        t.prompt_chars += chars;
        let done = step.is_finish();
        t.push(step);
        if done {
            return Ok(t);
        }
    }
    let index = t.steps.len() + 1;
    let (mut step, chars) = run_step(db, policy, config, &t, &sampling, index, true)?;
    t.prompt_chars += chars;
    if !step.valid_format || step.action.tool_name != "finish" {
        // Keep the faulty output visible but still close the trajectory.
        step.reasoning = format!("{} [fallback answer; policy output: {}]", step.reasoning, step.action.raw_text)
            .trim()
            .to_owned();
        step.action = crate::policy::rules::finish_call(crate::policy::rules::UNKNOWN_ANSWER);
        step.observation.clear();
    }
    t.push(step);
    Ok(t)
}

pub fn retrieve_loop(
    query: &str,
    db: &DbSnapshot,
    policy: &dyn Policy,
    config: &RetrievalConfig,
    sampling: Sampling,
) -> Result<Trajectory, RetrievalError> {
    continue_from(&Trajectory::empty(query), db, policy, config, sampling)
}

/// One record per step followed by a summary record.
pub fn trajectory_jsonl(t: &Trajectory) -> String {
    let mut out = String::new();
    for step in &t.steps {
        out.push_str(&serde_json::json!({"record": "step", "step": step}).to_string());
        out.push('\n');
    }
    let summary = serde_json::json!({
        "record": "summary",
        "query": t.query,
        "answer": t.answer,
        "retrieved_ids": t.retrieved_set,
        "finished": t.finished,
        "forced": t.forced,
        "steps": t.steps.len(),
        "prompt_tokens_estimate": t.prompt_tokens(),
    });
    out.push_str(&summary.to_string());
    out.push('\n');
    out
}
