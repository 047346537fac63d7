//! Store plus vector index kept in lockstep, and read-only snapshots of both.

use std::sync::Arc;

use thiserror::Error;

use crate::embedding::{EmbedError, Embedder, Embedding, VectorIndex};
use crate::memory::{DeltaSet, ItemId, MemoryItem, MemoryKind, MemoryStore, StoreError, StoreOp};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DbError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

/// Writable memory database. Every store mutation goes through here so the
/// index never lags the store.
pub struct MemoryDb {
    store: MemoryStore,
    index: VectorIndex,
    embedder: Arc<dyn Embedder>,
}

impl MemoryDb {
    pub fn new(embedder: Arc<dyn Embedder>) -> Self {
        MemoryDb { store: MemoryStore::new(), index: VectorIndex::unpinned(), embedder }
    }

    /// Wraps an existing store, embedding every live item.
    pub fn from_store(store: MemoryStore, embedder: Arc<dyn Embedder>) -> Result<Self, DbError> {
        let mut index = VectorIndex::unpinned();
        let items: Vec<&MemoryItem> = store.items().collect();
        let texts: Vec<&str> = items.iter().map(|i| i.content.as_str()).collect();
        let vectors = embedder.embed_batch(&texts)?;
        for (item, v) in items.iter().zip(vectors) {
            index.upsert(item.item_id.clone(), item.kind, v)?;
        }
        Ok(MemoryDb { store, index, embedder })
    }

    /// Wraps a store and a previously persisted index without re-embedding.
    pub fn from_parts(store: MemoryStore, index: VectorIndex, embedder: Arc<dyn Embedder>) -> Self {
        MemoryDb { store, index, embedder }
    }

    pub fn store(&self) -> &MemoryStore {
        &self.store
    }

    pub fn index(&self) -> &VectorIndex {
        &self.index
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    pub fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        self.embedder.embed(text)
    }

    /// Applies a delta to store and index atomically: embeddings are
    /// computed and the delta validated before anything changes.
    pub fn apply_delta(&mut self, delta: &DeltaSet) -> Result<(), DbError> {
        self.store.check_delta(delta)?;
        let texts: Vec<&str> = delta.additions.iter().map(|i| i.content.as_str()).collect();
        let vectors = self.embedder.embed_batch(&texts)?;
        if let (Some(dim), Some(v)) = (self.index.dim(), vectors.first()) {
            if v.dim() != dim {
                return Err(EmbedError::DimensionMismatch { expected: dim, got: v.dim() }.into());
            }
        }
        self.store.apply_delta(delta)?;
        for id in &delta.removals {
            self.index.remove(id);
        }
        for (item, v) in delta.additions.iter().zip(vectors) {
            self.index.upsert(item.item_id.clone(), item.kind, v)?;
        }
        Ok(())
    }

    pub fn set_summary(&mut self, text: impl Into<String>) {
        self.store.set_summary(text);
    }

    pub fn take_journal(&mut self) -> Vec<StoreOp> {
        self.store.take_journal()
    }

    pub fn snapshot(&self) -> DbSnapshot {
        DbSnapshot {
            store: self.store.snapshot(),
            index: Arc::new(self.index.clone()),
            embedder: Arc::clone(&self.embedder),
        }
    }

    pub fn into_parts(self) -> (MemoryStore, VectorIndex) {
        (self.store, self.index)
    }
}

/// Immutable view shared by concurrent retrieval rollouts.
#[derive(Clone)]
pub struct DbSnapshot {
    pub store: Arc<MemoryStore>,
    pub index: Arc<VectorIndex>,
    pub embedder: Arc<dyn Embedder>,
}

/// Issues item ids of the form `fact-000042`, never reusing a number seen
/// in the store (live or tombstoned).
#[derive(Debug, Clone, Default)]
pub struct IdAllocator {
    next: u64,
}

fn numeric_suffix(id: &ItemId) -> Option<u64> {
    id.as_str().rsplit_once('-').and_then(|(_, n)| n.parse().ok())
}

pub fn kind_prefix(kind: MemoryKind) -> &'static str {
    match kind {
        MemoryKind::Fact => "fact",
        MemoryKind::Experience => "exp",
        MemoryKind::Raw => "raw",
        MemoryKind::Persona => "persona",
        MemoryKind::Summary => "summary",
    }
}

impl IdAllocator {
    pub fn from_store(store: &MemoryStore) -> Self {
        let max = store
            .items()
            .map(|i| &i.item_id)
            .chain(store.tombstones().iter())
            .filter_map(numeric_suffix)
            .max()
            .unwrap_or(0);
        IdAllocator { next: max + 1 }
    }

    pub fn allocate(&mut self, kind: MemoryKind) -> ItemId {
        let n = self.next.max(1);
        self.next = n + 1;
        ItemId::new(format!("{}-{n:06}", kind_prefix(kind)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashedEmbedder;

    fn db() -> MemoryDb {
        MemoryDb::new(Arc::new(HashedEmbedder::default()))
    }

    #[test]
    fn delete_removes_from_search_in_same_step() {
        let mut db = db();
        let item = MemoryItem::new("fact-000001", MemoryKind::Fact, "Alice works at Acme.");
        db.apply_delta(&DeltaSet::add(item)).unwrap();
        let q = db.embed("Alice works").unwrap();
        assert_eq!(db.index().search_topk(&q, 5, Some(MemoryKind::Fact)).len(), 1);
        db.apply_delta(&DeltaSet::remove(ItemId::new("fact-000001"))).unwrap();
        assert!(db.index().search_topk(&q, 5, Some(MemoryKind::Fact)).is_empty());
    }

    #[test]
    fn failed_delta_touches_neither() {
        let mut db = db();
        let bad = MemoryItem::new("fact-000001", MemoryKind::Fact, "x").with_window("2023-05-08", "2023-05-07");
        assert!(db.apply_delta(&DeltaSet::add(bad)).is_err());
        assert!(db.store().is_empty());
        assert!(db.index().is_empty());
    }

    #[test]
    fn allocator_skips_seen_numbers() {
        let mut store = MemoryStore::new();
        store.add_item(MemoryItem::new("fact-000007", MemoryKind::Fact, "x")).unwrap();
        store.add_item(MemoryItem::new("raw-000003", MemoryKind::Raw, "y")).unwrap();
        store.remove_item(&ItemId::new("fact-000007")).unwrap();
        let mut alloc = IdAllocator::from_store(&store);
        assert_eq!(alloc.allocate(MemoryKind::Persona).as_str(), "persona-000008");
        assert_eq!(alloc.allocate(MemoryKind::Raw).as_str(), "raw-000009");
    }

    #[test]
    fn from_store_indexes_everything() {
        let mut store = MemoryStore::new();
        for i in 0..10 {
            store.add_item(MemoryItem::new(format!("fact-{i:06}"), MemoryKind::Fact, format!("item {i}"))).unwrap();
        }
        let db = MemoryDb::from_store(store, Arc::new(HashedEmbedder::default())).unwrap();
        assert_eq!(db.index().len(), 10);
    }
}
