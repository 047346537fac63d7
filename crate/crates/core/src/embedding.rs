//! Text embeddings and exact top-k cosine search.

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::{ItemId, MemoryKind};

/// Dimension of the built-in hashed embedder.
pub const DEFAULT_DIM: usize = 256;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmbedError {
    #[error("remote embedder unavailable: {0}")]
    RemoteEmbedderUnavailable(String),
    #[error("vector dimension {got} does not match index dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// A unit-norm vector. Construction normalizes; a zero vector becomes `e_0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(mut values: Vec<f64>) -> Self {
        assert!(!values.is_empty(), "embedding dimension must be positive");
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 && norm.is_finite() {
            values.iter_mut().for_each(|v| *v /= norm);
        } else {
            values.iter_mut().for_each(|v| *v = 0.0);
            values[0] = 1.0;
        }
        Embedding(values)
    }

    pub fn basis(dim: usize, index: usize) -> Self {
        let mut values = vec![0.0; dim];
        values[index] = 1.0;
        Embedding(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Cosine similarity; both sides are unit vectors so this is the dot product.
    pub fn cosine(&self, other: &Embedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<Embedding, EmbedError>;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbedError> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "did", "do", "does", "for", "from", "has",
    "have", "how", "in", "is", "it", "its", "of", "on", "or", "s", "that", "the", "their", "this",
    "to", "was", "were", "what", "when", "where", "which", "who", "with",
];

/// Lowercased alphanumeric tokens with stopwords removed.
pub fn content_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty() && !STOPWORDS.contains(t))
        .map(str::to_owned)
        .collect()
}

fn fnv1a(bytes: &[u8], basis: u64) -> u64 {
    let mut hash = basis;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Deterministic signed feature-hashing bag of words.
#[derive(Debug, Clone)]
pub struct HashedEmbedder {
    dim: usize,
}

impl HashedEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0);
        HashedEmbedder { dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed_text(&self, text: &str) -> Embedding {
        let tokens = content_tokens(text);
        if tokens.is_empty() {
            return Embedding::basis(self.dim, 0);
        }
        let mut values = vec![0.0; self.dim];
        for token in tokens {
            let bucket = (fnv1a(token.as_bytes(), 0xcbf2_9ce4_8422_2325) % self.dim as u64) as usize;
            let sign = if fnv1a(token.as_bytes(), 0x84222325_cbf29ce4) & 1 == 0 {
                1.0
            } else {
                -1.0
            };
            values[bucket] += sign;
        }
        Embedding::new(values)
    }
}

impl Default for HashedEmbedder {
    fn default() -> Self {
        HashedEmbedder::new(DEFAULT_DIM)
    }
}

impl Embedder for HashedEmbedder {
    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        Ok(self.embed_text(text))
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    input: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f64>>,
}

/// HTTP embedder: POST `{input: [...]}` returning `{embeddings: [[...]]}`.
/// The dimension is pinned by the first successful response.
pub struct RemoteEmbedder {
    endpoint: String,
    token: Option<String>,
    client: reqwest::blocking::Client,
    dim: OnceLock<usize>,
}

impl RemoteEmbedder {
    pub fn new(endpoint: impl Into<String>, token: Option<String>) -> Result<Self, EmbedError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| EmbedError::RemoteEmbedderUnavailable(e.to_string()))?;
        Ok(RemoteEmbedder {
            endpoint: endpoint.into(),
            token,
            client,
            dim: OnceLock::new(),
        })
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim.get().copied()
    }
}

impl Embedder for RemoteEmbedder {
    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        let mut out = self.embed_batch(&[text])?;
        out.pop()
            .ok_or_else(|| EmbedError::RemoteEmbedderUnavailable("empty response".into()))
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbedError> {
        let unavailable = |e: String| EmbedError::RemoteEmbedderUnavailable(e);
        let mut request = self.client.post(&self.endpoint).json(&EmbedRequest { input: texts });
        if let Some(token) = &self.token {
            request = request.bearer_auth(token);
        }
        let response = request
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| unavailable(e.to_string()))?;
        let body: EmbedResponse = response.json().map_err(|e| unavailable(e.to_string()))?;
        if body.embeddings.len() != texts.len() {
            return Err(unavailable(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                body.embeddings.len()
            )));
        }
        let mut out = Vec::with_capacity(texts.len());
        for values in body.embeddings {
            if values.is_empty() {
                return Err(unavailable("empty embedding vector".into()));
            }
            let expected = *self.dim.get_or_init(|| values.len());
            if values.len() != expected {
                return Err(EmbedError::DimensionMismatch {
                    expected,
                    got: values.len(),
                });
            }
            out.push(Embedding::new(values));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub item_id: ItemId,
    pub score: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub item_id: ItemId,
    pub kind: MemoryKind,
    pub vector: Embedding,
}

/// Exhaustive cosine index over all collections.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VectorIndex {
    dim: Option<usize>,
    entries: BTreeMap<ItemId, (MemoryKind, Embedding)>,
}

impl VectorIndex {
    pub fn new(dim: usize) -> Self {
        VectorIndex {
            dim: Some(dim),
            entries: BTreeMap::new(),
        }
    }

    /// An index whose dimension is pinned by the first upsert.
    pub fn unpinned() -> Self {
        VectorIndex::default()
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: &ItemId) -> bool {
        self.entries.contains_key(id)
    }

    pub fn upsert(&mut self, id: ItemId, kind: MemoryKind, vector: Embedding) -> Result<(), EmbedError> {
        let expected = *self.dim.get_or_insert(vector.dim());
        if vector.dim() != expected {
            return Err(EmbedError::DimensionMismatch {
                expected,
                got: vector.dim(),
            });
        }
        self.entries.insert(id, (kind, vector));
        Ok(())
    }

    pub fn remove(&mut self, id: &ItemId) -> bool {
        self.entries.remove(id).is_some()
    }

    /// The `k` best hits by (score desc, item_id asc), optionally within one kind.
    pub fn search_topk(
        &self,
        query: &Embedding,
        k: usize,
        kind_filter: Option<MemoryKind>,
    ) -> Vec<SearchHit> {
        assert!(k >= 1, "k must be at least 1");
        if self.dim.is_some_and(|d| d != query.dim()) {
            return Vec::new();
        }
        let mut scored: Vec<(f64, &ItemId)> = self
            .entries
            .iter()
            .filter(|(_, (kind, _))| kind_filter.is_none_or(|f| f == *kind))
            .map(|(id, (_, v))| (query.cosine(v) + 0.0, id))
            .collect();
        // `+ 0.0` folds -0.0 into 0.0 so total_cmp treats them as a tie.
        // BTreeMap iteration is already id-ascending, so a stable sort on score keeps ties ordered.
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        scored
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(i, (score, id))| SearchHit {
                item_id: id.clone(),
                score,
                rank: i + 1,
            })
            .collect()
    }

    pub fn entries(&self) -> impl Iterator<Item = IndexEntry> + '_ {
        self.entries.iter().map(|(id, (kind, v))| IndexEntry {
            item_id: id.clone(),
            kind: *kind,
            vector: v.clone(),
        })
    }

    pub fn from_entries(entries: impl IntoIterator<Item = IndexEntry>) -> Result<Self, EmbedError> {
        let mut index = VectorIndex::unpinned();
        for e in entries {
            index.upsert(e.item_id, e.kind, e.vector)?;
        }
        Ok(index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Standalone re-derivation of the hashed bag-of-words used as an oracle.
    fn oracle_bow(text: &str) -> Vec<f64> {
        let stop: std::collections::HashSet<&str> = STOPWORDS.iter().copied().collect();
        let mut v = vec![0.0f64; 256];
        let lower = text.to_lowercase();
        let mut any = false;
        for tok in lower.split(|c: char| !c.is_ascii_alphanumeric() && !c.is_alphanumeric()) {
            if tok.is_empty() || stop.contains(tok) {
                continue;
            }
            any = true;
            let mut h: u64 = 0xcbf29ce484222325;
            for b in tok.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100000001b3);
            }
            let mut s: u64 = 0x84222325cbf29ce4;
            for b in tok.bytes() {
                s = (s ^ b as u64).wrapping_mul(0x100000001b3);
            }
            v[(h % 256) as usize] += if s % 2 == 0 { 1.0 } else { -1.0 };
        }
        if !any {
            v[0] = 1.0;
            return v;
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn embedding_is_deterministic() {
        let e = HashedEmbedder::default();
        let a = e.embed_text("alpha");
        assert_eq!(a, e.embed_text("alpha"));
        assert!((a.cosine(&a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_text_maps_to_first_basis_vector() {
        let e = HashedEmbedder::default();
        assert_eq!(e.embed_text(""), Embedding::basis(256, 0));
        assert_eq!(e.embed_text("the of a"), Embedding::basis(256, 0));
    }

    #[test]
    fn bag_of_words_similarity_ordering() {
        let e = HashedEmbedder::default();
        let base = e.embed_text("red car");
        let near = base.cosine(&e.embed_text("red car loud"));
        let far = base.cosine(&e.embed_text("quiet zebra"));
        let o_near = dot(&oracle_bow("red car"), &oracle_bow("red car loud"));
        let o_far = dot(&oracle_bow("red car"), &oracle_bow("quiet zebra"));
        assert!((near - o_near).abs() < 1e-12);
        assert!((far - o_far).abs() < 1e-12);
        assert!(near > far);
    }

    #[test]
    fn vectors_are_unit_norm() {
        let e = HashedEmbedder::default();
        for text in ["a b c d", "Bob lives in Denver", "x", "zebra zebra zebra"] {
            let v = e.embed_text(text);
            let norm = v.values().iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
            assert_eq!(v.values(), oracle_bow(text).as_slice());
        }
    }

    #[test]
    fn upsert_then_search_finds_itself() {
        let e = HashedEmbedder::default();
        let mut index = VectorIndex::new(256);
        let v = e.embed_text("Alice works at Acme");
        index.upsert(ItemId::new("f1"), MemoryKind::Fact, v.clone()).unwrap();
        let hits = index.search_topk(&v, 5, Some(MemoryKind::Fact));
        assert_eq!(hits[0].item_id.as_str(), "f1");
        assert!((hits[0].score - 1.0).abs() < 1e-6);
    }

    #[test]
    fn reupsert_replaces_vector() {
        let e = HashedEmbedder::default();
        let mut index = VectorIndex::new(256);
        index.upsert(ItemId::new("a"), MemoryKind::Fact, e.embed_text("one")).unwrap();
        index.upsert(ItemId::new("a"), MemoryKind::Fact, e.embed_text("two")).unwrap();
        assert_eq!(index.len(), 1);
        let hits = index.search_topk(&e.embed_text("two"), 1, None);
        assert!((hits[0].score - 1.0).abs() < 1e-9);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut index = VectorIndex::new(4);
        let err = index
            .upsert(ItemId::new("a"), MemoryKind::Fact, Embedding::basis(3, 0))
            .unwrap_err();
        assert_eq!(err, EmbedError::DimensionMismatch { expected: 4, got: 3 });
    }

    #[test]
    fn index_size_counts_distinct_ids() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut index = VectorIndex::new(8);
        let mut ids = std::collections::BTreeSet::new();
        for _ in 0..1000 {
            let id = format!("id{}", rng.gen_range(0..700));
            ids.insert(id.clone());
            let v: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            index.upsert(ItemId::new(id), MemoryKind::Fact, Embedding::new(v)).unwrap();
        }
        assert_eq!(index.len(), ids.len());
    }

    #[test]
    fn underfull_and_tie_order() {
        let mut index = VectorIndex::new(2);
        for id in ["c", "a", "b"] {
            index
                .upsert(ItemId::new(id), MemoryKind::Fact, Embedding::basis(2, 0))
                .unwrap();
        }
        let hits = index.search_topk(&Embedding::basis(2, 0), 5, Some(MemoryKind::Fact));
        let order: Vec<_> = hits.iter().map(|h| h.item_id.as_str()).collect();
        assert_eq!(order, ["a", "b", "c"]);
        assert_eq!(hits.iter().map(|h| h.rank).collect::<Vec<_>>(), [1, 2, 3]);
        assert!(index.search_topk(&Embedding::basis(2, 0), 5, Some(MemoryKind::Raw)).is_empty());
    }

    #[test]
    fn topk_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut index = VectorIndex::new(6);
        let mut all = Vec::new();
        for n in 0..200 {
            // Coarse coordinates force exact score ties.
            let v: Vec<f64> = (0..6).map(|_| rng.gen_range(-2..3) as f64).collect();
            let v = Embedding::new(v);
            let kind = if n % 3 == 0 { MemoryKind::Raw } else { MemoryKind::Fact };
            index.upsert(ItemId::new(format!("i{n:03}")), kind, v.clone()).unwrap();
            all.push((format!("i{n:03}"), kind, v));
        }
        let q = Embedding::new((0..6).map(|_| rng.gen_range(-2..3) as f64).collect());
        let mut brute: Vec<(f64, String)> = all
            .iter()
            .filter(|(_, k, _)| *k == MemoryKind::Fact)
            .map(|(id, _, v)| (dot(q.values(), v.values()), id.clone()))
            .collect();
        brute.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let hits = index.search_topk(&q, 5, Some(MemoryKind::Fact));
        let got: Vec<_> = hits.iter().map(|h| h.item_id.0.clone()).collect();
        let want: Vec<_> = brute.iter().take(5).map(|b| b.1.clone()).collect();
        assert_eq!(got, want);
    }
}
