//! Tool/API retrieval driven by LLM-generated queries.
//!
//! The crate is organised along the retrieval pipeline:
//!
//! - [`corpus`]: API documents, labeled requests, preprocessing filters and the
//!   tool-disjoint in-domain / out-of-domain split.
//! - [`embed`]: embedding providers (a deterministic hashing embedder, a remote
//!   JSON-over-HTTP client) and a persistent embedding cache.
//! - [`index`]: exact flat cosine index, query sets and round-robin interleaving
//!   of per-query rankings.
//! - [`metrics`]: Recall@X, MMRR, MAP and the alignment reward metrics.
//! - [`querygen`]: prompt templates, output parsing, completion-service client and
//!   a deterministic mock generator.
//! - [`align`]: reward-scored draft generation, rejection-sampling filter, SFT
//!   dataset emission and the iterative alignment loop.
//! - [`synthetic`]: network-free synthetic corpora with recoverable signatures.
//! - [`harness`]: run configuration, evaluation, temperature sweeps, ablations
//!   and report rendering.

pub mod align;
pub mod corpus;
pub mod embed;
pub mod harness;
pub mod index;
pub mod metrics;
pub mod querygen;
pub mod remote;
pub mod synthetic;
pub mod util;

pub use corpus::{ApiDoc, CorpusSplit, LabeledRequest};
pub use embed::{Embedding, EmbeddingProvider, HashingEmbedder};
pub use index::{QuerySet, RankedRetrieval, ToolIndex};
pub use metrics::{Judgment, RewardMetric};
