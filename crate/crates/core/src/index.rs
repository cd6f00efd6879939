//! Exact flat cosine index over API descriptions, query sets and interleaved
//! multi-query retrieval.
//!
//! All stored vectors are unit-norm, so cosine similarity is a dot product. Ties are
//! broken by ascending insertion order, which makes every ranking a deterministic
//! function of the corpus order and the query.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{self, ApiDoc};
use crate::embed::{self, EmbedError, Embedding, EmbeddingProvider};
use crate::util;

/// Maximum number of generated queries kept in a query set.
pub const MAX_GENERATED_QUERIES: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("duplicate api id {0:?}")]
    DuplicateId(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("index built with provider {index}, queried with {query}")]
    ProviderMismatch { index: String, query: String },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("no queries: generation produced nothing and the utterance is not appended")]
    NoQueries,
    #[error("utterance is empty")]
    EmptyText,
    #[error("index io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed index file: {0}")]
    Format(String),
    #[error("index was built for corpus {found}, expected {expected}")]
    HashMismatch { expected: String, found: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredApi {
    pub api_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedRetrieval {
    pub items: Vec<ScoredApi>,
    /// Requested depth.
    pub k: usize,
}

impl RankedRetrieval {
    pub fn ids(&self) -> Vec<String> {
        self.items.iter().map(|i| i.api_id.clone()).collect()
    }
}

/// Immutable flat index. Rebuild to change.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolIndex {
    provider_id: String,
    dimension: usize,
    ids: Vec<String>,
    /// Row-major `ids.len() x dimension`.
    vectors: Vec<f64>,
    corpus_hash: String,
}

impl ToolIndex {
    /// Embeds every description; entries keep input order.
    pub fn build(docs: &[ApiDoc], provider: &dyn EmbeddingProvider) -> Result<Self, IndexError> {
        let mut seen = HashSet::new();
        for d in docs {
            if !seen.insert(d.api_id.as_str()) {
                return Err(IndexError::DuplicateId(d.api_id.clone()));
            }
        }
        let texts: Vec<&str> = docs.iter().map(|d| d.description.as_str()).collect();
        let embeddings = if texts.is_empty() {
            Vec::new()
        } else {
            provider.embed_batch(&texts)?
        };
        let dimension = provider.dimension();
        let mut vectors = Vec::with_capacity(docs.len() * dimension);
        for (i, e) in embeddings.iter().enumerate() {
            if e.dimension() != dimension {
                return Err(EmbedError::DimensionMismatch {
                    index: i,
                    expected: dimension,
                    got: e.dimension(),
                }
                .into());
            }
            vectors.extend_from_slice(&e.values);
        }
        Ok(Self {
            provider_id: provider.provider_id().to_string(),
            dimension,
            ids: docs.iter().map(|d| d.api_id.clone()).collect(),
            vectors,
            corpus_hash: corpus::docs_hash(docs),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn provider_id(&self) -> &str {
        &self.provider_id
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn corpus_hash(&self) -> &str {
        &self.corpus_hash
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dimension..(i + 1) * self.dimension]
    }

    fn check_provider(&self, provider: &dyn EmbeddingProvider) -> Result<(), IndexError> {
        if provider.provider_id() != self.provider_id {
            return Err(IndexError::ProviderMismatch {
                index: self.provider_id.clone(),
                query: provider.provider_id().to_string(),
            });
        }
        Ok(())
    }

    pub fn search(
        &self,
        query: &str,
        k: usize,
        provider: &dyn EmbeddingProvider,
    ) -> Result<RankedRetrieval, IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        if query.trim().is_empty() {
            return Err(IndexError::EmptyText);
        }
        self.check_provider(provider)?;
        let e = provider.embed_text(query)?;
        self.search_embedding(&e, k)
    }

    /// Top-`k` by descending dot product, ties by ascending insertion order.
    pub fn search_embedding(&self, query: &Embedding, k: usize) -> Result<RankedRetrieval, IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        if query.dimension() != self.dimension {
            return Err(EmbedError::DimensionMismatch {
                index: 0,
                expected: self.dimension,
                got: query.dimension(),
            }
            .into());
        }
        let mut scored: Vec<(usize, f64)> = (0..self.len())
            .map(|i| (i, embed::dot(self.vector(i), &query.values)))
            .collect();
        let by_rank = |a: &(usize, f64), b: &(usize, f64)| -> Ordering {
            b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
        };
        let take = k.min(scored.len());
        if take < scored.len() {
            scored.select_nth_unstable_by(take, by_rank);
            scored.truncate(take);
        }
        scored.sort_unstable_by(by_rank);
        Ok(RankedRetrieval {
            items: scored
                .into_iter()
                .map(|(i, score)| ScoredApi {
                    api_id: self.ids[i].clone(),
                    score,
                })
                .collect(),
            k,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<IndexManifest, IndexError> {
        let mut bin = Vec::with_capacity(16 + self.vectors.len() * 8);
        bin.extend_from_slice(INDEX_MAGIC);
        bin.extend_from_slice(&INDEX_FORMAT_VERSION.to_le_bytes());
        bin.extend_from_slice(&(self.dimension as u32).to_le_bytes());
        bin.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for (i, id) in self.ids.iter().enumerate() {
            bin.extend_from_slice(&(id.len() as u32).to_le_bytes());
            bin.extend_from_slice(id.as_bytes());
            for v in self.vector(i) {
                bin.extend_from_slice(&v.to_le_bytes());
            }
        }
        util::write_atomic(&dir.join(INDEX_BIN), &bin)?;
        let manifest = IndexManifest {
            format_version: INDEX_FORMAT_VERSION,
            provider_id: self.provider_id.clone(),
            dimension: self.dimension,
            doc_count: self.len(),
            corpus_hash: self.corpus_hash.clone(),
            bin_sha256: util::sha256_hex(&bin),
        };
        util::write_json_pretty(&dir.join(INDEX_MANIFEST), &manifest)?;
        Ok(manifest)
    }

    /// Loads an index, verifying it was built over `docs` (by corpus hash).
    pub fn load(dir: &Path, docs: &[ApiDoc]) -> Result<Self, IndexError> {
        let manifest: IndexManifest =
            serde_json::from_slice(&std::fs::read(dir.join(INDEX_MANIFEST))?)
                .map_err(|e| IndexError::Format(e.to_string()))?;
        let expected = corpus::docs_hash(docs);
        if manifest.corpus_hash != expected {
            return Err(IndexError::HashMismatch {
                expected,
                found: manifest.corpus_hash,
            });
        }
        let bin = std::fs::read(dir.join(INDEX_BIN))?;
        if util::sha256_hex(&bin) != manifest.bin_sha256 {
            return Err(IndexError::Format("index.bin does not match manifest".into()));
        }
        let index = decode_bin(&bin, manifest.provider_id.clone(), manifest.corpus_hash.clone())?;
        if index.dimension != manifest.dimension || index.len() != manifest.doc_count {
            return Err(IndexError::Format("index.bin header disagrees with manifest".into()));
        }
        Ok(index)
    }
}

pub const INDEX_BIN: &str = "index.bin";
pub const INDEX_MANIFEST: &str = "index_manifest.json";
const INDEX_MAGIC: &[u8; 4] = b"TQIX";
const INDEX_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub format_version: u32,
    pub provider_id: String,
    pub dimension: usize,
    pub doc_count: usize,
    pub corpus_hash: String,
    pub bin_sha256: String,
}

fn decode_bin(bin: &[u8], provider_id: String, corpus_hash: String) -> Result<ToolIndex, IndexError> {
    struct Cursor<'a>(&'a [u8]);
    impl<'a> Cursor<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8], IndexError> {
            if self.0.len() < n {
                return Err(IndexError::Format("truncated index.bin".into()));
            }
            let (head, tail) = self.0.split_at(n);
            self.0 = tail;
            Ok(head)
        }
        fn u32(&mut self) -> Result<u32, IndexError> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
        }
    }
    let mut c = Cursor(bin);
    if c.take(4)? != INDEX_MAGIC {
        return Err(IndexError::Format("bad magic".into()));
    }
    let version = c.u32()?;
    if version != INDEX_FORMAT_VERSION {
        return Err(IndexError::Format(format!("unsupported version {version}")));
    }
    let dimension = c.u32()? as usize;
    let count = u64::from_le_bytes(c.take(8)?.try_into().unwrap()) as usize;
    let mut ids = Vec::with_capacity(count);
    let mut vectors = Vec::with_capacity(count * dimension);
    for _ in 0..count {
        let n = c.u32()? as usize;
        let id = std::str::from_utf8(c.take(n)?)
            .map_err(|e| IndexError::Format(e.to_string()))?
            .to_string();
        ids.push(id);
        for _ in 0..dimension {
            vectors.push(f64::from_le_bytes(c.take(8)?.try_into().unwrap()));
        }
    }
    if !c.0.is_empty() {
        return Err(IndexError::Format("trailing bytes in index.bin".into()));
    }
    Ok(ToolIndex {
        provider_id,
        dimension,
        ids,
        vectors,
        corpus_hash,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySource {
    UtteranceOnly,
    ZeroShot,
    Sft,
    Aligned,
    Mock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtterancePosition {
    #[default]
    Last,
    First,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySet {
    pub queries: Vec<String>,
    pub includes_utterance: bool,
    /// Where the utterance sits when `includes_utterance` is set.
    #[serde(default)]
    pub utterance_position: UtterancePosition,
    pub source: QuerySource,
}

impl QuerySet {
    /// The generated queries, without the appended utterance.
    pub fn generated(&self) -> &[String] {
        if !self.includes_utterance || self.queries.is_empty() {
            return &self.queries;
        }
        match self.utterance_position {
            UtterancePosition::Last => &self.queries[..self.queries.len() - 1],
            UtterancePosition::First => &self.queries[1..],
        }
    }
}

/// Builds a query set from generated queries and the raw utterance.
///
/// Blank generated entries are skipped and at most five are kept. With
/// `append_utterance` the utterance is added at `position`; with no generated
/// queries it degrades to the utterance-only baseline.
pub fn make_query_set(
    generated: &[String],
    utterance: &str,
    append_utterance: bool,
    position: UtterancePosition,
    source: QuerySource,
) -> Result<QuerySet, IndexError> {
    if utterance.trim().is_empty() {
        return Err(IndexError::EmptyText);
    }
    let mut queries: Vec<String> = generated
        .iter()
        .filter(|q| !q.trim().is_empty())
        .take(MAX_GENERATED_QUERIES)
        .cloned()
        .collect();
    if queries.is_empty() {
        if !append_utterance {
            return Err(IndexError::NoQueries);
        }
        return Ok(utterance_only(utterance));
    }
    if append_utterance {
        match position {
            UtterancePosition::Last => queries.push(utterance.to_string()),
            UtterancePosition::First => queries.insert(0, utterance.to_string()),
        }
    }
    Ok(QuerySet {
        queries,
        includes_utterance: append_utterance,
        utterance_position: position,
        source,
    })
}

/// The utterance baseline: the raw request as the only query.
pub fn utterance_only(utterance: &str) -> QuerySet {
    QuerySet {
        queries: vec![utterance.to_string()],
        includes_utterance: true,
        utterance_position: UtterancePosition::Last,
        source: QuerySource::UtteranceOnly,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterleaveMode {
    /// On its turn a list advances past already-selected ids and contributes its
    /// first unseen one.
    #[default]
    AdvanceToUnseen,
    /// On its turn a list looks at its next item only; a duplicate forfeits the turn.
    SkipTurn,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    /// Final ranking depth.
    pub k: usize,
    /// Depth fetched per query; defaults to `k`.
    #[serde(default)]
    pub per_query_depth: Option<usize>,
    pub append_utterance: bool,
    #[serde(default)]
    pub utterance_position: UtterancePosition,
    #[serde(default)]
    pub interleave_mode: InterleaveMode,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: 11,
            per_query_depth: None,
            append_utterance: true,
            utterance_position: UtterancePosition::Last,
            interleave_mode: InterleaveMode::AdvanceToUnseen,
        }
    }
}

/// Round-robin merge of ranked lists, in list order, without duplicates.
///
/// Each kept item carries the score from the list that contributed it. Stops at `k`
/// items or when every list is exhausted.
pub fn interleave(lists: &[RankedRetrieval], k: usize, mode: InterleaveMode) -> RankedRetrieval {
    let mut cursors = vec![0usize; lists.len()];
    let mut seen: HashSet<&str> = HashSet::new();
    let mut items = Vec::new();
    while items.len() < k {
        let mut progressed = false;
        for (list, cursor) in lists.iter().zip(cursors.iter_mut()) {
            if items.len() >= k {
                break;
            }
            match mode {
                InterleaveMode::AdvanceToUnseen => {
                    while *cursor < list.items.len() && seen.contains(list.items[*cursor].api_id.as_str()) {
                        *cursor += 1;
                    }
                    if let Some(item) = list.items.get(*cursor) {
                        seen.insert(&item.api_id);
                        items.push(item.clone());
                        *cursor += 1;
                        progressed = true;
                    }
                }
                InterleaveMode::SkipTurn => {
                    if let Some(item) = list.items.get(*cursor) {
                        *cursor += 1;
                        progressed = true;
                        if seen.insert(&item.api_id) {
                            items.push(item.clone());
                        }
                    }
                }
            }
        }
        if !progressed {
            break;
        }
    }
    RankedRetrieval { items, k }
}

/// Retrieves with every query of `qs` and interleaves the per-query rankings.
pub fn interleave_retrieve(
    index: &ToolIndex,
    qs: &QuerySet,
    provider: &dyn EmbeddingProvider,
    cfg: &RetrievalConfig,
) -> Result<RankedRetrieval, IndexError> {
    if cfg.k == 0 {
        return Err(IndexError::InvalidK);
    }
    if qs.queries.is_empty() {
        return Err(IndexError::NoQueries);
    }
    index.check_provider(provider)?;
    let texts: Vec<&str> = qs.queries.iter().map(String::as_str).collect();
    let embeddings = provider.embed_batch(&texts)?;
    let depth = cfg.per_query_depth.unwrap_or(cfg.k).max(1);
    let lists = embeddings
        .iter()
        .map(|e| index.search_embedding(e, depth))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(interleave(&lists, cfg.k, cfg.interleave_mode))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::HashingEmbedder;

    fn doc(id: &str, desc: &str) -> ApiDoc {
        ApiDoc {
            api_id: id.into(),
            tool_name: format!("tool_{id}"),
            api_name: id.into(),
            description: desc.into(),
        }
    }

    fn list(ids: &[&str]) -> RankedRetrieval {
        RankedRetrieval {
            items: ids
                .iter()
                .enumerate()
                .map(|(i, id)| ScoredApi {
                    api_id: id.to_string(),
                    score: 1.0 - i as f64 * 0.1,
                })
                .collect(),
            k: ids.len(),
        }
    }

    fn corpus() -> Vec<ApiDoc> {
        vec![
            doc("weather", "get the weather forecast for a city"),
            doc("recipes", "search cooking recipes by ingredient"),
            doc("cabs", "book a cab to a destination address"),
        ]
    }

    #[test]
    fn build_preserves_order_and_rejects_duplicates() {
        let p = HashingEmbedder::default();
        let idx = ToolIndex::build(&corpus(), &p).unwrap();
        assert_eq!(idx.ids(), ["weather", "recipes", "cabs"]);
        assert_eq!(idx, ToolIndex::build(&corpus(), &p).unwrap());
        let mut dup = corpus();
        dup.push(doc("cabs", "another cab service here"));
        assert!(matches!(ToolIndex::build(&dup, &p), Err(IndexError::DuplicateId(_))));
    }

    #[test]
    fn exact_description_ranks_first_with_unit_score() {
        let p = HashingEmbedder::default();
        let idx = ToolIndex::build(&corpus(), &p).unwrap();
        let r = idx.search("search cooking recipes by ingredient", 2, &p).unwrap();
        assert_eq!(r.items[0].api_id, "recipes");
        assert!((r.items[0].score - 1.0).abs() < 1e-12);
        assert_eq!(r.items.len(), 2);
        let all = idx.search("cab", 10, &p).unwrap();
        assert_eq!(all.items.len(), 3);
        assert!(matches!(idx.search("x", 0, &p), Err(IndexError::InvalidK)));
        assert!(matches!(idx.search(" ", 1, &p), Err(IndexError::EmptyText)));
    }

    #[test]
    fn ties_break_by_insertion_order() {
        let p = HashingEmbedder::default();
        let docs = vec![doc("b", "same words here ok fine"), doc("a", "same words here ok fine")];
        let idx = ToolIndex::build(&docs, &p).unwrap();
        let r = idx.search("same words", 2, &p).unwrap();
        assert_eq!(r.ids(), ["b", "a"]);
    }

    #[test]
    fn interleave_hand_trace() {
        let r = interleave(&[list(&["A", "B", "C"]), list(&["B", "D", "E"])], 5, InterleaveMode::AdvanceToUnseen);
        assert_eq!(r.ids(), ["A", "B", "C", "D", "E"]);
        let r = interleave(&[list(&["A", "B"]), list(&["A", "B"])], 4, InterleaveMode::AdvanceToUnseen);
        assert_eq!(r.ids(), ["A", "B"]);
    }

    #[test]
    fn skip_turn_forfeits_on_duplicates() {
        // Round 1: A, B. Round 2: list-1 sees B (forfeit), list-2 takes D. Round 3: C, E.
        let r = interleave(&[list(&["A", "B", "C"]), list(&["B", "D", "E"])], 5, InterleaveMode::SkipTurn);
        assert_eq!(r.ids(), ["A", "B", "D", "C", "E"]);
        let r = interleave(&[list(&["A", "B"]), list(&["A", "C"])], 2, InterleaveMode::SkipTurn);
        assert_eq!(r.ids(), ["A", "B"]);
    }

    #[test]
    fn interleave_keeps_contributing_score() {
        let mut l2 = list(&["B", "D"]);
        l2.items[0].score = 0.42;
        let r = interleave(&[list(&["A", "B"]), l2], 3, InterleaveMode::AdvanceToUnseen);
        assert_eq!(r.items[1].score, 0.42);
    }

    #[test]
    fn single_query_interleave_equals_search() {
        let p = HashingEmbedder::default();
        let idx = ToolIndex::build(&corpus(), &p).unwrap();
        let qs = make_query_set(&["weather in paris".into()], "u", false, UtterancePosition::Last, QuerySource::Mock).unwrap();
        let cfg = RetrievalConfig { k: 3, ..Default::default() };
        let a = interleave_retrieve(&idx, &qs, &p, &cfg).unwrap();
        let b = idx.search("weather in paris", 3, &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn query_set_construction() {
        let u = "book a cab";
        let qs = make_query_set(&["q1".into(), "q2".into()], u, true, UtterancePosition::Last, QuerySource::ZeroShot).unwrap();
        assert_eq!(qs.queries, ["q1", "q2", u]);
        assert_eq!(qs.generated(), ["q1", "q2"]);
        let qs = make_query_set(&["q1".into()], u, true, UtterancePosition::First, QuerySource::ZeroShot).unwrap();
        assert_eq!(qs.queries, [u, "q1"]);
        assert_eq!(qs.generated(), ["q1"]);

        let qs = make_query_set(&[], u, true, UtterancePosition::Last, QuerySource::Sft).unwrap();
        assert_eq!(qs.queries, [u]);
        assert_eq!(qs.source, QuerySource::UtteranceOnly);
        assert!(qs.generated().is_empty());

        assert!(matches!(
            make_query_set(&[], u, false, UtterancePosition::Last, QuerySource::Sft),
            Err(IndexError::NoQueries)
        ));
        let seven: Vec<String> = (0..7).map(|i| format!("q{i}")).collect();
        let qs = make_query_set(&seven, u, true, UtterancePosition::Last, QuerySource::Mock).unwrap();
        assert_eq!(qs.queries.len(), 6);
    }

    #[test]
    fn save_and_load_verify_corpus_hash() {
        let p = HashingEmbedder::default();
        let docs = corpus();
        let idx = ToolIndex::build(&docs, &p).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = idx.save(dir.path()).unwrap();
        assert_eq!(m.doc_count, 3);
        assert_eq!(ToolIndex::load(dir.path(), &docs).unwrap(), idx);
        assert!(matches!(
            ToolIndex::load(dir.path(), &docs[..2]),
            Err(IndexError::HashMismatch { .. })
        ));
    }
}
