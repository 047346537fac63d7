//! Memory construction: formation over each chunk, evolution of every
//! candidate against related memories, and the action log that hindsight
//! later joins against.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::db::{DbError, IdAllocator, MemoryDb};
use crate::memory::{DeltaSet, ItemId, MemoryItem, MemoryKind, TurnId, TurnRecord};
use crate::policy::{
    context_digest, phase_registry, rules, validate, ChatMessage, Phase, PhaseView, Policy, PolicyError,
    PolicyRequest, ToolCall, ValidationResult,
};

pub const DEFAULT_CONTEXT_K: usize = 5;
/// Tool name logged for the unconditional raw archival of each chunk.
pub const CREATE_RAW: &str = "create_raw";

pub const DEFAULT_FORMATION_PROMPT: &str = "You maintain a long-term memory of a conversation. \
Read the new dialogue chunk and record salient facts, lessons, persona details and the running summary using the tools.";
pub const DEFAULT_EVOLUTION_PROMPT: &str = "You integrate a candidate memory into the memory database. \
Compare it with the related memories and choose exactly one tool.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstructionConfig {
    /// Turns per formation call.
    pub chunk_size: usize,
    /// Related memories shown during evolution.
    pub context_k: usize,
    pub temperature: f64,
    pub formation_prompt: String,
    pub evolution_prompt: String,
}

impl Default for ConstructionConfig {
    fn default() -> Self {
        ConstructionConfig {
            chunk_size: 1,
            context_k: DEFAULT_CONTEXT_K,
            temperature: 0.0,
            formation_prompt: DEFAULT_FORMATION_PROMPT.to_owned(),
            evolution_prompt: DEFAULT_EVOLUTION_PROMPT.to_owned(),
        }
    }
}

/// Groups turns into consecutive chunks of at most `size` turns that never
/// straddle a session boundary.
pub fn chunk_turns(turns: &[TurnRecord], size: usize) -> Vec<Vec<TurnRecord>> {
    let size = size.max(1);
    let mut chunks: Vec<Vec<TurnRecord>> = Vec::new();
    for turn in turns {
        match chunks.last_mut() {
            Some(last) if last.len() < size && last[0].session_id == turn.session_id => last.push(turn.clone()),
            _ => chunks.push(vec![turn.clone()]),
        }
    }
    chunks
}

/// One construction action together with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryAction {
    pub action_id: String,
    pub phase: Phase,
    pub tool_call: ToolCall,
    pub source_turn_ids: BTreeSet<TurnId>,
    pub produced_item_ids: BTreeSet<ItemId>,
    pub removed_item_ids: BTreeSet<ItemId>,
    /// Formation only: ids reserved for the candidates this call proposed.
    /// The candidate becomes a live item under the same id if evolution
    /// adds it or uses it as the refined item of an update.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub candidate_ids: BTreeSet<ItemId>,
    pub valid_format: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub violation: Option<String>,
    pub context_digest: String,
    /// "replaces <id>" for updates, the reason for ignores.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl MemoryAction {
    pub fn category(&self) -> &str {
        &self.tool_call.tool_name
    }

    /// Ids whose retrieval credits this action: what it produced plus the
    /// candidates it proposed.
    pub fn credited_item_ids(&self) -> impl Iterator<Item = &ItemId> {
        self.produced_item_ids.iter().chain(self.candidate_ids.iter())
    }
}

/// Rendered prompts keyed by context digest, so curated actions can be
/// exported with the exact context the policy saw.
pub type PromptArchive = BTreeMap<String, Vec<ChatMessage>>;

#[derive(Debug, Default, Clone, PartialEq)]
pub struct IngestOutcome {
    pub actions: Vec<MemoryAction>,
    pub prompts: PromptArchive,
    pub chunks: usize,
}

#[derive(Debug, Error)]
#[error("ingestion aborted after {} actions: {source}", partial.actions.len())]
pub struct IngestFailure {
    pub partial: IngestOutcome,
    #[source]
    pub source: ConstructionError,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConstructionError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Db(#[from] DbError),
    #[error("empty chunk")]
    EmptyChunk,
}

/// Drives formation and evolution against one database.
pub struct Constructor<'a> {
    pub db: &'a mut MemoryDb,
    pub config: &'a ConstructionConfig,
    ids: IdAllocator,
    next_action: u64,
    /// Summary item per session id.
    session_summaries: BTreeMap<String, ItemId>,
    pub outcome: IngestOutcome,
}

fn action_number(id: &str) -> Option<u64> {
    id.strip_prefix("act-").and_then(|n| n.parse().ok())
}

impl<'a> Constructor<'a> {
    /// `prior` is the action log of earlier runs on the same store; new
    /// action ids continue after it.
    pub fn new(db: &'a mut MemoryDb, config: &'a ConstructionConfig, prior: &[MemoryAction]) -> Self {
        let ids = IdAllocator::from_store(db.store());
        let next_action = prior.iter().filter_map(|a| action_number(&a.action_id)).max().unwrap_or(0) + 1;
        let session_summaries = db
            .store()
            .collection(MemoryKind::Summary)
            .filter_map(|item| session_of_summary(&item.content).map(|s| (s, item.item_id.clone())))
            .collect();
        Constructor { db, config, ids, next_action, session_summaries, outcome: IngestOutcome::default() }
    }

    fn action_id(&mut self) -> String {
        let id = format!("act-{:06}", self.next_action);
        self.next_action += 1;
        id
    }

    fn archive(&mut self, phase: Phase, messages: &[ChatMessage]) -> String {
        let digest = context_digest(phase, messages);
        self.outcome.prompts.entry(digest.clone()).or_insert_with(|| messages.to_vec());
        digest
    }

    #[allow(clippy::too_many_arguments)]
    fn log(
        &mut self,
        phase: Phase,
        tool_call: ToolCall,
        sources: &BTreeSet<TurnId>,
        produced: BTreeSet<ItemId>,
        removed: BTreeSet<ItemId>,
        candidates: BTreeSet<ItemId>,
        violation: Option<String>,
        digest: &str,
        note: Option<String>,
    ) -> usize {
        let valid = violation.is_none();
        let action = MemoryAction {
            action_id: self.action_id(),
            phase,
            tool_call,
            source_turn_ids: sources.clone(),
            produced_item_ids: if valid { produced } else { BTreeSet::new() },
            removed_item_ids: if valid { removed } else { BTreeSet::new() },
            candidate_ids: if valid { candidates } else { BTreeSet::new() },
            valid_format: valid,
            violation,
            context_digest: digest.to_owned(),
            note,
        };
        self.outcome.actions.push(action);
        self.outcome.actions.len() - 1
    }

    fn formation_messages(&self, chunk: &[TurnRecord]) -> Vec<ChatMessage> {
        let mut dialogue = String::new();
        for t in chunk {
            dialogue.push_str(&format!("[{}] {}: {}\n", t.turn_time, t.speaker, t.content));
        }
        let summary = self.db.store().working_summary();
        vec![
            ChatMessage::system(self.config.formation_prompt.clone()),
            ChatMessage::user(format!(
                "Working summary:\n{}\n\nNew dialogue:\n{}",
                if summary.is_empty() { "(empty)" } else { summary },
                dialogue.trim_end()
            )),
        ]
    }

    /// Formation for one chunk. Archives the chunk as Raw, applies summary
    /// updates, and returns the candidates with the index of the formation
    /// action that proposed each.
    pub fn form_candidates(
        &mut self,
        chunk: &[TurnRecord],
        policy: &dyn Policy,
    ) -> Result<Vec<(MemoryItem, usize)>, ConstructionError> {
        let first = chunk.first().ok_or(ConstructionError::EmptyChunk)?;
        let sources: BTreeSet<TurnId> = chunk.iter().map(|t| t.turn_id.clone()).collect();
        let turn_time = chunk.last().map(|t| t.turn_time.clone()).unwrap_or_default();
        let messages = self.formation_messages(chunk);
        let digest = self.archive(Phase::Formation, &messages);

        // Unconditional raw archival.
        let raw_text: Vec<String> = chunk.iter().map(rules::render_turn).collect();
        let raw_text = raw_text.join("\n");
        let raw_id = self.ids.allocate(MemoryKind::Raw);
        let raw = MemoryItem {
            source_turn_ids: sources.clone(),
            turn_time: turn_time.clone(),
            ..MemoryItem::new(raw_id.as_str(), MemoryKind::Raw, raw_text.clone())
        };
        self.db.apply_delta(&DeltaSet::add(raw))?;
        self.log(
            Phase::Formation,
            ToolCall::with_strings(CREATE_RAW, &[("content", &raw_text)]),
            &sources,
            BTreeSet::from([raw_id]),
            BTreeSet::new(),
            BTreeSet::new(),
            None,
            &digest,
            None,
        );

        let request = PolicyRequest {
            phase: Phase::Formation,
            messages,
            tools: phase_registry(Phase::Formation),
            view: PhaseView::Formation {
                turns: chunk.to_vec(),
                working_summary: self.db.store().working_summary().to_owned(),
            },
            temperature: self.config.temperature,
            sample_seed: None,
        };
        let turn = policy.propose(&request)?;
        if turn.tool_calls.is_empty() {
            let raw = ToolCall { tool_name: String::new(), arguments: Default::default(), raw_text: turn.reasoning.clone() };
            let why = turn.parse_failure.clone().unwrap_or_else(|| "no tool call".to_owned());
            self.log(Phase::Formation, raw, &sources, BTreeSet::new(), BTreeSet::new(), BTreeSet::new(), Some(why), &digest, None);
            return Ok(Vec::new());
        }

        let mut candidates = Vec::new();
        for call in turn.tool_calls {
            let violation = match validate(&call, &request.tools) {
                ValidationResult::Ok if call.tool_name.is_empty() => Some("unparseable tool call".to_owned()),
                ValidationResult::Ok => None,
                ValidationResult::Violation(v) => Some(if call.tool_name.is_empty() { "unparseable tool call".to_owned() } else { v }),
            };
            if let Some(v) = violation {
                self.log(Phase::Formation, call, &sources, BTreeSet::new(), BTreeSet::new(), BTreeSet::new(), Some(v), &digest, None);
                continue;
            }
            let arg = |name: &str| call.str_arg(name).unwrap_or("").to_owned();
            if call.tool_name == "update_summary" {
                let (produced, removed) = self.apply_summary(first, &arg("content"), &sources, &turn_time)?;
                self.log(Phase::Formation, call, &sources, produced, removed, BTreeSet::new(), None, &digest, None);
                continue;
            }
            let kind = match call.tool_name.as_str() {
                "create_fact" => MemoryKind::Fact,
                "create_experience" => MemoryKind::Experience,
                _ => MemoryKind::Persona,
            };
            let id = self.ids.allocate(kind);
            let mut item = MemoryItem::new(id.as_str(), kind, "");
            item.turn_time = turn_time.clone();
            item.source_turn_ids = sources.clone();
            match kind {
                MemoryKind::Fact => item = item.with_window(arg("start_time"), arg("end_time")).tap_content(arg("fact")),
                MemoryKind::Experience => {
                    item = item.with_window(arg("start_time"), arg("end_time")).tap_content(arg("experience"))
                }
                _ => item = item.with_persona_name(arg("name")).tap_content(arg("profile")),
            }
            let problem = if item.window_violated() {
                Some(format!("start_time {:?} after end_time {:?}", item.start_time, item.end_time))
            } else if kind == MemoryKind::Persona && item.persona_name.trim().is_empty() {
                Some("empty persona name".to_owned())
            } else if item.content.trim().is_empty() {
                Some("empty memory content".to_owned())
            } else {
                None
            };
            let index = self.log(
                Phase::Formation,
                call,
                &sources,
                BTreeSet::new(),
                BTreeSet::new(),
                BTreeSet::from([id]),
                problem.clone(),
                &digest,
                None,
            );
            if problem.is_none() {
                candidates.push((item, index));
            }
        }
        Ok(candidates)
    }

    /// Overwrites the working summary and keeps one Summary item per session.
    fn apply_summary(
        &mut self,
        first: &TurnRecord,
        content: &str,
        sources: &BTreeSet<TurnId>,
        turn_time: &str,
    ) -> Result<(BTreeSet<ItemId>, BTreeSet<ItemId>), ConstructionError> {
        self.db.set_summary(content);
        let session = first.session_id.clone();
        let previous = self.session_summaries.get(&session).cloned();
        let mut all_sources = sources.clone();
        if let Some(prev) = previous.as_ref().and_then(|id| self.db.store().get(id)) {
            all_sources.extend(prev.source_turn_ids.iter().cloned());
        }
        let id = self.ids.allocate(MemoryKind::Summary);
        let body = format!("{}{}\n{}", SUMMARY_TAG, session, content);
        let item = MemoryItem {
            source_turn_ids: all_sources,
            turn_time: turn_time.to_owned(),
            ..MemoryItem::new(id.as_str(), MemoryKind::Summary, body)
        };
        let delta = DeltaSet {
            additions: vec![item],
            removals: previous.iter().filter(|p| self.db.store().contains(p)).cloned().collect(),
        };
        self.db.apply_delta(&delta)?;
        self.session_summaries.insert(session, id.clone());
        Ok((BTreeSet::from([id]), delta.removals.into_iter().collect()))
    }

    fn evolution_messages(&self, candidate: &MemoryItem, neighbors: &[MemoryItem]) -> Vec<ChatMessage> {
        let render = |m: &MemoryItem| {
            let name = if m.persona_name.is_empty() { String::new() } else { format!(" ({})", m.persona_name) };
            format!("{}{} | {}..{} | {}", m.item_id, name, m.start_time, m.end_time, m.content)
        };
        let related = if neighbors.is_empty() {
            "(none)".to_owned()
        } else {
            neighbors.iter().map(render).collect::<Vec<_>>().join("\n")
        };
        vec![
            ChatMessage::system(self.config.evolution_prompt.clone()),
            ChatMessage::user(format!(
                "Candidate {} memory:\n{}\n\nRelated memories:\n{}",
                candidate.kind,
                render(candidate).split_once(" | ").map(|(_, r)| r.to_owned()).unwrap_or_default(),
                related
            )),
        ]
    }

    /// Same-kind neighbours: exact persona-name match first, then the
    /// top-`context_k` by similarity.
    pub fn neighbors(&self, candidate: &MemoryItem) -> Result<Vec<MemoryItem>, ConstructionError> {
        let store = self.db.store();
        let mut out: Vec<MemoryItem> = Vec::new();
        if candidate.kind == MemoryKind::Persona {
            if let Some(p) = store.persona_by_name(&candidate.persona_name) {
                out.push(p.clone());
            }
        }
        if self.config.context_k > 0 {
            let v = self.db.embed(&candidate.content).map_err(DbError::from)?;
            for hit in self.db.index().search_topk(&v, self.config.context_k, Some(candidate.kind)) {
                if out.iter().any(|o| o.item_id == hit.item_id) {
                    continue;
                }
                if let Some(item) = store.get(&hit.item_id) {
                    out.push(item.clone());
                }
            }
        }
        Ok(out)
    }

    /// Evolution for one candidate: decision, delta, and the logged action index.
    pub fn evolve(
        &mut self,
        candidate: MemoryItem,
        policy: &dyn Policy,
    ) -> Result<(String, DeltaSet, usize), ConstructionError> {
        let neighbors = self.neighbors(&candidate)?;
        let messages = self.evolution_messages(&candidate, &neighbors);
        let digest = self.archive(Phase::Evolution, &messages);
        let request = PolicyRequest {
            phase: Phase::Evolution,
            messages,
            tools: phase_registry(Phase::Evolution),
            view: PhaseView::Evolution { candidate: candidate.clone(), neighbors: neighbors.clone() },
            temperature: self.config.temperature,
            sample_seed: None,
        };
        let turn = policy.propose(&request)?;
        let sources = candidate.source_turn_ids.clone();
        let call = turn.tool_calls.into_iter().next().unwrap_or_else(|| ToolCall {
            tool_name: String::new(),
            arguments: Default::default(),
            raw_text: turn.reasoning.clone(),
        });
        let schema_violation = match validate(&call, &request.tools) {
            _ if call.tool_name.is_empty() => Some("unparseable tool call".to_owned()),
            ValidationResult::Ok => None,
            ValidationResult::Violation(v) => Some(v),
        };
        if let Some(v) = schema_violation {
            let idx = self.log(Phase::Evolution, call, &sources, BTreeSet::new(), BTreeSet::new(), BTreeSet::new(), Some(v), &digest, None);
            return Ok(("INVALID".to_owned(), DeltaSet::default(), idx));
        }

        let arg = |name: &str| call.str_arg(name).map(str::to_owned);
        let store = self.db.store();
        let (decision, delta, note): (&str, Result<DeltaSet, String>, Option<String>) = match call.tool_name.as_str() {
            "add_item" => {
                let mut item = candidate.clone();
                item.content = arg("document").unwrap_or_default();
                if let Some(t) = arg("turn_time").filter(|t| !t.is_empty()) {
                    item.turn_time = t;
                }
                if let Some(s) = arg("start_time") {
                    item.start_time = s;
                }
                if let Some(e) = arg("end_time") {
                    item.end_time = e;
                }
                item.revision = 0;
                ("ADD", Ok(DeltaSet::add(item)), None)
            }
            "update_item" => {
                let target_id = ItemId::new(arg("id").unwrap_or_default());
                match store.get(&target_id) {
                    Some(target) if target.kind == candidate.kind => {
                        let mut refined = candidate.clone();
                        refined.content = arg("document").unwrap_or_default();
                        if let Some(t) = arg("turn_time").filter(|t| !t.is_empty()) {
                            refined.turn_time = t;
                        }
                        if let Some(s) = arg("start_time") {
                            refined.start_time = s;
                        }
                        if let Some(e) = arg("end_time") {
                            refined.end_time = e;
                        }
                        if candidate.kind == MemoryKind::Persona {
                            refined.persona_name = target.persona_name.clone();
                        }
                        refined.source_turn_ids.extend(target.source_turn_ids.iter().cloned());
                        refined.revision = target.revision + 1;
                        let note = Some(format!("replaces {target_id}"));
                        ("UPDATE", Ok(DeltaSet::replace(target_id, refined)), note)
                    }
                    Some(_) => ("UPDATE", Err(format!("update target {target_id} is a different kind")), None),
                    None => ("UPDATE", Err(format!("update target {target_id} missing")), None),
                }
            }
            "delete_item" => {
                let target_id = ItemId::new(arg("id").unwrap_or_default());
                match store.get(&target_id) {
                    Some(target) if target.kind == candidate.kind => ("DELETE", Ok(DeltaSet::remove(target_id)), None),
                    Some(_) => ("DELETE", Err(format!("delete target {target_id} is a different kind")), None),
                    None => ("DELETE", Err(format!("delete target {target_id} missing")), None),
                }
            }
            _ => ("IGNORE", Ok(DeltaSet::default()), arg("reason")),
        };
        // Store-level rejections (window order, persona clashes) are the
        // policy's fault, so they are logged as invalid rather than aborting.
        let delta = delta.and_then(|d| store.check_delta(&d).map(|_| d).map_err(|e| e.to_string()));
        match delta {
            Ok(delta) => {
                self.db.apply_delta(&delta)?;
                let produced = delta.additions.iter().map(|i| i.item_id.clone()).collect();
                let removed = delta.removals.iter().cloned().collect();
                let idx = self.log(Phase::Evolution, call, &sources, produced, removed, BTreeSet::new(), None, &digest, note);
                Ok((decision.to_owned(), delta, idx))
            }
            Err(v) => {
                let idx = self.log(Phase::Evolution, call, &sources, BTreeSet::new(), BTreeSet::new(), BTreeSet::new(), Some(v), &digest, None);
                Ok(("INVALID".to_owned(), DeltaSet::default(), idx))
            }
        }
    }

    /// Formation then evolution for one chunk.
    pub fn process_chunk(
        &mut self,
        chunk: &[TurnRecord],
        formation: &dyn Policy,
        evolution: &dyn Policy,
    ) -> Result<(), ConstructionError> {
        let candidates = self.form_candidates(chunk, formation)?;
        for (candidate, _) in candidates {
            self.evolve(candidate, evolution)?;
        }
        self.outcome.chunks += 1;
        Ok(())
    }
}

/// Prefix identifying the session of a Summary item.
pub const SUMMARY_TAG: &str = "Summary of session ";

fn session_of_summary(content: &str) -> Option<String> {
    content.strip_prefix(SUMMARY_TAG).and_then(|r| r.lines().next()).map(str::to_owned)
}

trait TapContent {
    fn tap_content(self, content: String) -> Self;
}

impl TapContent for MemoryItem {
    fn tap_content(mut self, content: String) -> Self {
        self.content = content;
        self
    }
}

/// Processes chunks in order. On a hard error the actions logged so far are
/// returned inside the failure.
pub fn ingest_stream(
    db: &mut MemoryDb,
    chunks: &[Vec<TurnRecord>],
    formation: &dyn Policy,
    evolution: &dyn Policy,
    config: &ConstructionConfig,
    prior: &[MemoryAction],
) -> Result<IngestOutcome, IngestFailure> {
    let mut ctor = Constructor::new(db, config, prior);
    for chunk in chunks {
        if let Err(source) = ctor.process_chunk(chunk, formation, evolution) {
            return Err(IngestFailure { partial: std::mem::take(&mut ctor.outcome), source });
        }
    }
    Ok(ctor.outcome)
}
