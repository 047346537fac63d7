//! Hierarchical memory state.
//!
//! A [`MemoryStore`] holds one ordered collection per [`MemoryKind`] plus the
//! working summary. Every mutation is journaled as a [`StoreOp`], and a store
//! can be rebuilt bit-for-bit by replaying its journal (see [`MemoryStore::replay`]).
//!
//! Timestamps are free text (ISO-8601 by convention) compared lexicographically;
//! an empty string means "unknown" and never violates a validity window.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::sync::Arc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Opaque identifier of a memory item.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub String);

impl ItemId {
    pub fn new(id: impl Into<String>) -> Self {
        ItemId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Opaque identifier of a dialogue turn.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TurnId(pub String);

impl TurnId {
    pub fn new(id: impl Into<String>) -> Self {
        TurnId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TurnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One record of the input stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub turn_id: TurnId,
    pub session_id: String,
    pub speaker: String,
    pub content: String,
    #[serde(default)]
    pub turn_time: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemoryKind {
    Fact,
    Experience,
    Raw,
    Persona,
    Summary,
}

impl MemoryKind {
    pub const ALL: [MemoryKind; 5] = [
        MemoryKind::Fact,
        MemoryKind::Experience,
        MemoryKind::Raw,
        MemoryKind::Persona,
        MemoryKind::Summary,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MemoryKind::Fact => "fact",
            MemoryKind::Experience => "experience",
            MemoryKind::Raw => "raw",
            MemoryKind::Persona => "persona",
            MemoryKind::Summary => "summary",
        }
    }
}

impl fmt::Display for MemoryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One atomic memory unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryItem {
    pub item_id: ItemId,
    pub kind: MemoryKind,
    pub content: String,
    /// Non-empty iff `kind == Persona`.
    #[serde(default)]
    pub persona_name: String,
    #[serde(default)]
    pub turn_time: String,
    #[serde(default)]
    pub start_time: String,
    #[serde(default)]
    pub end_time: String,
    #[serde(default)]
    pub source_turn_ids: BTreeSet<TurnId>,
    #[serde(default)]
    pub revision: u32,
}

impl MemoryItem {
    pub fn new(item_id: impl Into<String>, kind: MemoryKind, content: impl Into<String>) -> Self {
        MemoryItem {
            item_id: ItemId::new(item_id),
            kind,
            content: content.into(),
            persona_name: String::new(),
            turn_time: String::new(),
            start_time: String::new(),
            end_time: String::new(),
            source_turn_ids: BTreeSet::new(),
            revision: 0,
        }
    }

    pub fn with_window(mut self, start: impl Into<String>, end: impl Into<String>) -> Self {
        self.start_time = start.into();
        self.end_time = end.into();
        self
    }

    pub fn with_persona_name(mut self, name: impl Into<String>) -> Self {
        self.persona_name = name.into();
        self
    }

    pub fn with_turn_time(mut self, time: impl Into<String>) -> Self {
        self.turn_time = time.into();
        self
    }

    pub fn with_sources<I, T>(mut self, turns: I) -> Self
    where
        I: IntoIterator<Item = T>,
        T: Into<String>,
    {
        self.source_turn_ids = turns.into_iter().map(|t| TurnId::new(t)).collect();
        self
    }

    /// True when both ends are known and start sorts after end.
    pub fn window_violated(&self) -> bool {
        !self.start_time.is_empty() && !self.end_time.is_empty() && self.start_time > self.end_time
    }
}

/// Additions and removals applied together by [`MemoryStore::apply_delta`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeltaSet {
    pub additions: Vec<MemoryItem>,
    pub removals: Vec<ItemId>,
}

impl DeltaSet {
    pub fn is_empty(&self) -> bool {
        self.additions.is_empty() && self.removals.is_empty()
    }

    pub fn add(item: MemoryItem) -> Self {
        DeltaSet {
            additions: vec![item],
            removals: Vec::new(),
        }
    }

    pub fn remove(id: ItemId) -> Self {
        DeltaSet {
            additions: Vec::new(),
            removals: vec![id],
        }
    }

    pub fn replace(old: ItemId, refined: MemoryItem) -> Self {
        DeltaSet {
            additions: vec![refined],
            removals: vec![old],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("item id {0} already present or tombstoned")]
    DuplicateId(ItemId),
    #[error("item {id} has start_time {start:?} after end_time {end:?}")]
    InvalidWindow { id: ItemId, start: String, end: String },
    #[error("a live persona named {0:?} already exists")]
    PersonaNameConflict(String),
    #[error("persona_name must be set exactly for persona items (item {0})")]
    PersonaNameMismatch(ItemId),
    #[error("item {0} not found")]
    NotFound(ItemId),
    #[error("raw item {0} is immutable")]
    RawImmutable(ItemId),
    #[error("item {0} is both added and removed in one delta")]
    DeltaOverlap(ItemId),
}

/// One journaled mutation. Replaying the journal in order rebuilds the store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum StoreOp {
    Add { item: MemoryItem },
    Remove { item_id: ItemId },
    SummarySet { text: String },
}

/// The hierarchical memory state: typed collections plus the working summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemoryStore {
    collections: BTreeMap<MemoryKind, IndexMap<ItemId, MemoryItem>>,
    working_summary: String,
    tombstones: BTreeSet<ItemId>,
    #[serde(skip)]
    journal: Vec<StoreOp>,
}

impl Default for MemoryStore {
    fn default() -> Self {
        MemoryStore {
            collections: MemoryKind::ALL
                .iter()
                .map(|k| (*k, IndexMap::new()))
                .collect(),
            working_summary: String::new(),
            tombstones: BTreeSet::new(),
            journal: Vec::new(),
        }
    }
}

impl PartialEq for MemoryStore {
    fn eq(&self, other: &Self) -> bool {
        // Order inside a collection is part of the observable state.
        self.working_summary == other.working_summary
            && self.tombstones == other.tombstones
            && MemoryKind::ALL.iter().all(|k| {
                let a = &self.collections[k];
                let b = &other.collections[k];
                a.len() == b.len() && a.iter().zip(b.iter()).all(|(x, y)| x == y)
            })
    }
}

impl Eq for MemoryStore {}

/// Read-only shared view of a store.
pub type Snapshot = Arc<MemoryStore>;

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn working_summary(&self) -> &str {
        &self.working_summary
    }

    pub fn tombstones(&self) -> &BTreeSet<ItemId> {
        &self.tombstones
    }

    pub fn collection(&self, kind: MemoryKind) -> impl Iterator<Item = &MemoryItem> {
        self.collections[&kind].values()
    }

    pub fn count(&self, kind: MemoryKind) -> usize {
        self.collections[&kind].len()
    }

    pub fn len(&self) -> usize {
        self.collections.values().map(IndexMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn items(&self) -> impl Iterator<Item = &MemoryItem> {
        self.collections.values().flat_map(|c| c.values())
    }

    pub fn live_ids(&self) -> BTreeSet<ItemId> {
        self.items().map(|i| i.item_id.clone()).collect()
    }

    pub fn get(&self, id: &ItemId) -> Option<&MemoryItem> {
        self.collections.values().find_map(|c| c.get(id))
    }

    pub fn contains(&self, id: &ItemId) -> bool {
        self.get(id).is_some()
    }

    pub fn persona_by_name(&self, name: &str) -> Option<&MemoryItem> {
        self.collections[&MemoryKind::Persona]
            .values()
            .find(|p| p.persona_name == name)
    }

    /// Number of ids ever admitted (live plus tombstoned).
    pub fn ids_issued(&self) -> usize {
        self.len() + self.tombstones.len()
    }

    /// Operations applied since creation (or since the last [`take_journal`](Self::take_journal)).
    pub fn journal(&self) -> &[StoreOp] {
        &self.journal
    }

    pub fn take_journal(&mut self) -> Vec<StoreOp> {
        std::mem::take(&mut self.journal)
    }

    /// Read-only copy isolated from later mutations of `self`.
    pub fn snapshot(&self) -> Snapshot {
        let mut copy = self.clone();
        copy.journal.clear();
        Arc::new(copy)
    }

    fn check_insert(
        &self,
        item: &MemoryItem,
        removed: &HashSet<&ItemId>,
        pending_personas: &HashSet<&str>,
    ) -> Result<(), StoreError> {
        let live = self.contains(&item.item_id) && !removed.contains(&item.item_id);
        if live || self.tombstones.contains(&item.item_id) || removed.contains(&item.item_id) {
            return Err(StoreError::DuplicateId(item.item_id.clone()));
        }
        if item.window_violated() {
            return Err(StoreError::InvalidWindow {
                id: item.item_id.clone(),
                start: item.start_time.clone(),
                end: item.end_time.clone(),
            });
        }
        let is_persona = item.kind == MemoryKind::Persona;
        if is_persona == item.persona_name.is_empty() {
            return Err(StoreError::PersonaNameMismatch(item.item_id.clone()));
        }
        if is_persona {
            let clash = self.collections[&MemoryKind::Persona]
                .values()
                .any(|p| p.persona_name == item.persona_name && !removed.contains(&p.item_id));
            if clash || pending_personas.contains(item.persona_name.as_str()) {
                return Err(StoreError::PersonaNameConflict(item.persona_name.clone()));
            }
        }
        Ok(())
    }

    fn check_remove(&self, id: &ItemId) -> Result<(), StoreError> {
        match self.get(id) {
            None => Err(StoreError::NotFound(id.clone())),
            Some(item) if item.kind == MemoryKind::Raw => Err(StoreError::RawImmutable(id.clone())),
            Some(_) => Ok(()),
        }
    }

    fn insert_unchecked(&mut self, item: MemoryItem) {
        self.journal.push(StoreOp::Add { item: item.clone() });
        self.collections
            .get_mut(&item.kind)
            .expect("all kinds present")
            .insert(item.item_id.clone(), item);
    }

    fn remove_unchecked(&mut self, id: &ItemId) -> MemoryItem {
        let removed = self
            .collections
            .values_mut()
            .find_map(|c| c.shift_remove(id))
            .expect("checked before removal");
        self.tombstones.insert(id.clone());
        self.journal.push(StoreOp::Remove { item_id: id.clone() });
        removed
    }

    /// Adds a fresh item; its revision is reset to 0.
    pub fn add_item(&mut self, mut item: MemoryItem) -> Result<(), StoreError> {
        item.revision = 0;
        self.check_insert(&item, &HashSet::new(), &HashSet::new())?;
        self.insert_unchecked(item);
        Ok(())
    }

    /// Removes a live non-raw item and tombstones its id.
    pub fn remove_item(&mut self, id: &ItemId) -> Result<MemoryItem, StoreError> {
        self.check_remove(id)?;
        Ok(self.remove_unchecked(id))
    }

    /// Validates a delta against the current state without applying it.
    pub fn check_delta(&self, delta: &DeltaSet) -> Result<(), StoreError> {
        let mut removed: HashSet<&ItemId> = HashSet::new();
        for id in &delta.removals {
            if delta.additions.iter().any(|a| &a.item_id == id) {
                return Err(StoreError::DeltaOverlap(id.clone()));
            }
            if removed.contains(id) {
                return Err(StoreError::NotFound(id.clone()));
            }
            self.check_remove(id)?;
            removed.insert(id);
        }
        let mut pending_personas: HashSet<&str> = HashSet::new();
        let mut pending_ids: HashSet<&ItemId> = HashSet::new();
        for item in &delta.additions {
            if !pending_ids.insert(&item.item_id) {
                return Err(StoreError::DuplicateId(item.item_id.clone()));
            }
            self.check_insert(item, &removed, &pending_personas)?;
            if item.kind == MemoryKind::Persona {
                pending_personas.insert(item.persona_name.as_str());
            }
        }
        Ok(())
    }

    /// `M' = (M \ removals) ∪ additions`, all or nothing. Removals go first.
    /// Additions keep the revision they carry (an update bumps it upstream).
    pub fn apply_delta(&mut self, delta: &DeltaSet) -> Result<(), StoreError> {
        self.check_delta(delta)?;
        for id in &delta.removals {
            self.remove_unchecked(id);
        }
        for item in &delta.additions {
            self.insert_unchecked(item.clone());
        }
        Ok(())
    }

    /// Overwrites the working summary wholesale.
    pub fn set_summary(&mut self, text: impl Into<String>) {
        let text = text.into();
        self.journal.push(StoreOp::SummarySet { text: text.clone() });
        self.working_summary = text;
    }

    /// Applies one journaled operation, preserving the item's recorded revision.
    pub fn apply_op(&mut self, op: &StoreOp) -> Result<(), StoreError> {
        match op {
            StoreOp::Add { item } => {
                self.check_insert(item, &HashSet::new(), &HashSet::new())?;
                self.insert_unchecked(item.clone());
                Ok(())
            }
            StoreOp::Remove { item_id } => self.remove_item(item_id).map(|_| ()),
            StoreOp::SummarySet { text } => {
                self.set_summary(text.clone());
                Ok(())
            }
        }
    }

    /// Rebuilds a store from an ordered operation log.
    pub fn replay<'a>(ops: impl IntoIterator<Item = &'a StoreOp>) -> Result<Self, StoreError> {
        let mut store = MemoryStore::new();
        for op in ops {
            store.apply_op(op)?;
        }
        Ok(store)
    }
}

pub mod persist {
    //! Newline-delimited operation log and full-state snapshot files.

    use std::fs;
    use std::io::{BufRead, BufReader, BufWriter, Write};
    use std::path::Path;

    use thiserror::Error;

    use super::{MemoryStore, StoreError, StoreOp};

    #[derive(Debug, Error)]
    pub enum PersistError {
        #[error("io error on {path}: {source}")]
        Io {
            path: String,
            #[source]
            source: std::io::Error,
        },
        #[error("{path}:{line}: {message}")]
        Parse {
            path: String,
            line: usize,
            message: String,
        },
        #[error("replay failed at op {index}: {source}")]
        Replay {
            index: usize,
            #[source]
            source: StoreError,
        },
    }

    fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PersistError + '_ {
        move |source| PersistError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn write_log(path: &Path, ops: &[StoreOp]) -> Result<(), PersistError> {
        let file = fs::File::create(path).map_err(io_err(path))?;
        let mut out = BufWriter::new(file);
        for op in ops {
            let line = serde_json::to_string(op).expect("ops serialize");
            writeln!(out, "{line}").map_err(io_err(path))?;
        }
        out.flush().map_err(io_err(path))
    }

    pub fn read_log(path: &Path) -> Result<Vec<StoreOp>, PersistError> {
        let file = fs::File::open(path).map_err(io_err(path))?;
        let mut ops = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let op = serde_json::from_str(&line).map_err(|e| PersistError::Parse {
                path: path.display().to_string(),
                line: n + 1,
                message: e.to_string(),
            })?;
            ops.push(op);
        }
        Ok(ops)
    }

    pub fn snapshot_json(store: &MemoryStore) -> String {
        serde_json::to_string_pretty(store).expect("store serializes")
    }

    pub fn write_snapshot(path: &Path, store: &MemoryStore) -> Result<(), PersistError> {
        fs::write(path, snapshot_json(store)).map_err(io_err(path))
    }

    pub fn read_snapshot(path: &Path) -> Result<MemoryStore, PersistError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| PersistError::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    /// Replays a log file into a fresh store.
    pub fn replay_log(path: &Path) -> Result<MemoryStore, PersistError> {
        let ops = read_log(path)?;
        let mut store = MemoryStore::new();
        for (index, op) in ops.iter().enumerate() {
            store
                .apply_op(op)
                .map_err(|source| PersistError::Replay { index, source })?;
        }
        Ok(store)
    }
}
