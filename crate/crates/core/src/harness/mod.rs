//! Experiment runner: run configuration, resumable stages, evaluation of the four
//! query configurations, temperature sweeps, ablations and report rendering.
//!
//! A run lives in one directory:
//!
//! ```text
//! run_dir/
//!   config.json                 the exact RunConfig
//!   data/                       preprocessed apis/requests + preprocess_report.json
//!   split/                      partitions + split_manifest.json
//!   index/{in_domain,ood}/      saved flat indices
//!   sft/                        gold SFT dataset, manifest, model_ref.json
//!   align/                      drafts, SFT sets, alignment_log.jsonl, model_ref.json
//!   generations/ retrievals/    per-request stage outputs
//!   eval/<mode>_<split>.json    EvalReports
//!   sweep/ ablate/ report/
//! ```
//!
//! Expensive stages write a `.stamp` next to their output holding the hash of
//! their inputs; a rerun with the same inputs reuses the output.

mod ablate;
mod report;
mod sweep;

pub use ablate::{
    ablate, ablate_variants, ablation_variants, config_diff, AblationReport, AblationToggle, AblationVariant, DeltaRow,
    render_ablation,
};
pub use report::{collect_table, render_csv, render_text, write_report, Table1, TableCell};
pub use sweep::{default_grid, temperature_sweep, SweepPoint, SweepReport};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::align::{
    self, gold_sft_records, run_alignment, AlignError, AlignmentData, AlignmentSettings, FilterConfig, HttpTrainer,
    HttpTrainerConfig, IterationRecord, StubTrainer, TrainerClient, TrainingHyperparams,
};
use crate::corpus::{
    self, preprocess, split, write_split, ApiDoc, CorpusError, CorpusSplit, LabeledRequest, PreprocessReport,
    SplitConfig,
};
use crate::embed::{CachedEmbedder, EmbedError, EmbeddingProvider, HashingEmbedder, HttpEmbedder, HttpEmbedderConfig};
use crate::index::{
    interleave_retrieve, make_query_set, utterance_only, IndexError, QuerySet, QuerySource, RankedRetrieval,
    RetrievalConfig, ToolIndex,
};
use crate::metrics::{aggregate, Judgment, MetricError, MetricMeans, MetricReport, MmrrNumerator, DEFAULT_CUTOFFS};
use crate::querygen::{
    generate, CompletionRequest, GenError, GenerationResult, GeneratorMode, HttpGenerator, HttpGeneratorConfig,
    MockConfig, MockGenerator, MockWorld, PromptTemplate, QueryGenerator, SamplingParams, TemplateId,
};
use crate::remote::RetryPolicy;
use crate::util::{self, json_hash, read_jsonl, write_json_pretty, write_jsonl};

pub const TRAINER_ENDPOINT_ENV: &str = "TOOLQUERY_TRAINER_ENDPOINT";

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("no request could be evaluated ({failed} failed)")]
    EmptyEvaluation { failed: usize },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Generation(#[from] GenError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("alignment stopped after {completed} iteration(s): {source}")]
    Align {
        completed: usize,
        #[source]
        source: AlignError,
    },
    #[error("io error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl HarnessError {
    /// Short machine-readable error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::MissingArtifact(_) => "missing_artifact",
            Self::EmptyEvaluation { .. } => "empty_evaluation",
            Self::Corpus(_) => "corpus",
            Self::Index(_) => "index",
            Self::Embed(_) => "embedding",
            Self::Generation(GenError::ServiceUnavailable(_)) => "service_unavailable",
            Self::Generation(GenError::ContextOverflow(_)) => "context_overflow",
            Self::Generation(_) => "generation",
            Self::Metric(_) => "metric",
            Self::Align {
                source: AlignError::EmptySelection { .. },
                ..
            } => "empty_selection",
            Self::Align {
                source: AlignError::TrainerFailure(_),
                ..
            } => "trainer_failure",
            Self::Align { .. } => "alignment",
            Self::Io { .. } => "io",
        }
    }
}

impl From<AlignError> for HarnessError {
    fn from(source: AlignError) -> Self {
        Self::Align { completed: 0, source }
    }
}

pub(crate) fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderConfig {
    Hashing {
        dimension: usize,
    },
    Http {
        /// Falls back to `TOOLQUERY_EMBED_ENDPOINT`.
        #[serde(default)]
        endpoint: Option<String>,
        model: String,
        dimension: usize,
        #[serde(default = "default_embed_batch")]
        batch_size: usize,
        /// Embedding cache file; defaults to `<run_dir>/cache/embeddings.jsonl`.
        #[serde(default)]
        cache_path: Option<PathBuf>,
        #[serde(default)]
        retry: RetryPolicy,
    },
}

fn default_embed_batch() -> usize {
    64
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self::Hashing {
            dimension: crate::embed::HASHING_DIMENSION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorConfig {
    /// The deterministic mock; `corruption` is the zero-shot model's rate.
    Mock {
        corruption: f64,
        #[serde(default)]
        temperature_optimum: Option<f64>,
        #[serde(default)]
        temperature_sensitivity: f64,
        #[serde(default)]
        chatty: bool,
    },
    Http {
        /// Falls back to `TOOLQUERY_LLM_ENDPOINT`.
        #[serde(default)]
        endpoint: Option<String>,
        /// Pretrained model used for zero-shot generation and as the training base.
        model: String,
        #[serde(default = "default_in_flight")]
        max_in_flight: usize,
        #[serde(default)]
        retry: RetryPolicy,
    },
}

fn default_in_flight() -> usize {
    8
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::Mock {
            corruption: 0.8,
            temperature_optimum: None,
            temperature_sensitivity: 0.0,
            chatty: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainerConfig {
    /// Fits the mock's corruption rate to the selected targets.
    Stub {
        #[serde(default = "default_stub_lr")]
        learning_rate: f64,
    },
    Http {
        /// Falls back to `TOOLQUERY_TRAINER_ENDPOINT`.
        #[serde(default)]
        endpoint: Option<String>,
        #[serde(default = "default_poll_ms")]
        poll_interval_ms: u64,
        #[serde(default = "default_max_polls")]
        max_polls: u32,
        #[serde(default)]
        retry: RetryPolicy,
    },
}

fn default_stub_lr() -> f64 {
    1.0
}

fn default_poll_ms() -> u64 {
    5_000
}

fn default_max_polls() -> u32 {
    17_280
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self::Stub {
            learning_rate: default_stub_lr(),
        }
    }
}

/// Evaluation temperature per generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeTemperatures {
    pub zero_shot: f64,
    pub sft: f64,
    pub aligned: f64,
}

impl Default for ModeTemperatures {
    fn default() -> Self {
        Self {
            zero_shot: GeneratorMode::ZeroShot.default_temperature(),
            sft: GeneratorMode::Sft.default_temperature(),
            aligned: GeneratorMode::Aligned.default_temperature(),
        }
    }
}

impl ModeTemperatures {
    pub fn get(&self, mode: GeneratorMode) -> f64 {
        match mode {
            GeneratorMode::ZeroShot => self.zero_shot,
            GeneratorMode::Sft => self.sft,
            GeneratorMode::Aligned => self.aligned,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    /// Explicit grid; empty means `0.0, 0.2, ..., 1.6`.
    pub grid: Vec<f64>,
    /// Also evaluate 1.7, the nominal upper end of the calibration range.
    pub include_endpoint: bool,
    /// Requests sampled for each grid point; `None` sweeps the whole split.
    pub subsample: Option<usize>,
    pub split: SplitName,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            grid: Vec::new(),
            include_endpoint: false,
            subsample: Some(500),
            split: SplitName::TestInDomain,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Directory holding `apis.jsonl` and `requests.jsonl`.
    pub corpus_dir: PathBuf,
    pub run_dir: PathBuf,
    pub seed: u64,
    pub split: SplitConfig,
    pub embedder: EmbedderConfig,
    pub generator: GeneratorConfig,
    pub template: TemplateId,
    pub sampling: SamplingParams,
    pub temperatures: ModeTemperatures,
    pub retrieval: RetrievalConfig,
    pub cutoffs: Vec<usize>,
    pub mmrr_numerator: MmrrNumerator,
    pub filter: FilterConfig,
    pub trainer: TrainerConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus_dir: PathBuf::from("corpus"),
            run_dir: PathBuf::from("run"),
            seed: 0,
            split: SplitConfig::default(),
            embedder: EmbedderConfig::default(),
            generator: GeneratorConfig::default(),
            template: TemplateId::ToolDescription,
            sampling: SamplingParams::default(),
            temperatures: ModeTemperatures::default(),
            retrieval: RetrievalConfig::default(),
            cutoffs: DEFAULT_CUTOFFS.to_vec(),
            mmrr_numerator: MmrrNumerator::Corrected,
            filter: FilterConfig::default(),
            trainer: TrainerConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    /// Offline setup used by the test suites and `toolquery synth`: hashing
    /// embedder, mock generator, stub trainer and a 30% in-domain test share so
    /// small synthetic corpora still yield a usable test split.
    pub fn fixture(corpus_dir: impl Into<PathBuf>, run_dir: impl Into<PathBuf>, seed: u64) -> Self {
        Self {
            corpus_dir: corpus_dir.into(),
            run_dir: run_dir.into(),
            seed,
            split: SplitConfig {
                test_fraction: 0.3,
                seed,
                ..SplitConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn hash(&self) -> String {
        json_hash(self)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.retrieval.k == 0 {
            return bad("retrieval.k must be positive".into());
        }
        if self.cutoffs.is_empty() || self.cutoffs.iter().any(|&c| c == 0 || c > self.retrieval.k) {
            return bad(format!("cutoffs {:?} must lie in 1..={}", self.cutoffs, self.retrieval.k));
        }
        self.filter.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.sampling.validate()?;
        if let GeneratorConfig::Mock { corruption, .. } = self.generator {
            if !(0.0..=1.0).contains(&corruption) {
                return bad(format!("mock corruption {corruption} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Utterance,
    ZeroShot,
    Sft,
    Aligned,
}

impl EvalMode {
    pub const ALL: [EvalMode; 4] = [Self::Utterance, Self::ZeroShot, Self::Sft, Self::Aligned];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Utterance => "utterance",
            Self::ZeroShot => "zero_shot",
            Self::Sft => "sft",
            Self::Aligned => "aligned",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Utterance => "Utterance",
            Self::ZeroShot => "Zero-Shot",
            Self::Sft => "SFT",
            Self::Aligned => "Alignment",
        }
    }

    pub fn generator_mode(self) -> Option<GeneratorMode> {
        match self {
            Self::Utterance => None,
            Self::ZeroShot => Some(GeneratorMode::ZeroShot),
            Self::Sft => Some(GeneratorMode::Sft),
            Self::Aligned => Some(GeneratorMode::Aligned),
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s.replace('-', "_"))
            .ok_or_else(|| format!("unknown mode {s:?}; expected utterance, zero_shot, sft or aligned"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    TestInDomain,
    TestOod,
}

impl SplitName {
    pub const TESTS: [SplitName; 2] = [Self::TestInDomain, Self::TestOod];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::TestInDomain => "test_in_domain",
            Self::TestOod => "test_ood",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Train => "Train",
            Self::TestInDomain => "In-Domain",
            Self::TestOod => "Out-Of-Domain",
        }
    }
}

impl std::str::FromStr for SplitName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        [Self::Train, Self::TestInDomain, Self::TestOod]
            .into_iter()
            .find(|m| m.as_str() == s.replace('-', "_"))
            .ok_or_else(|| format!("unknown split {s:?}; expected train, test_in_domain or test_ood"))
    }
}

/// Hashes tying an artifact to the inputs that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub corpus_hash: String,
    pub split_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub request_id: String,
    /// Absent in utterance mode.
    pub generation: Option<GenerationResult>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRecord {
    pub request_id: String,
    pub query_set: Option<QuerySet>,
    pub ranked: Option<RankedRetrieval>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestFailure {
    pub request_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub report: MetricReport,
    /// Request ids in the order of the per-sample metric arrays.
    pub judged_ids: Vec<String>,
    pub failures: Vec<RequestFailure>,
}

/// One draft per request (or none without a generator), in request order.
pub fn generate_for_requests(
    requests: &[LabeledRequest],
    generator: Option<&dyn QueryGenerator>,
) -> Vec<GenerationRecord> {
    requests
        .par_iter()
        .map(|r| match generator {
            None => GenerationRecord {
                request_id: r.request_id.clone(),
                generation: None,
                error: None,
            },
            Some(g) => match generate(g, &r.utterance, 1) {
                Ok(mut v) => GenerationRecord {
                    request_id: r.request_id.clone(),
                    generation: Some(v.remove(0)),
                    error: None,
                },
                Err(e) => GenerationRecord {
                    request_id: r.request_id.clone(),
                    generation: None,
                    error: Some(e.to_string()),
                },
            },
        })
        .collect()
}

/// Builds each request's query set and retrieves with it.
pub fn retrieve_for_requests(
    requests: &[LabeledRequest],
    generations: &[GenerationRecord],
    source: QuerySource,
    index: &ToolIndex,
    provider: &dyn EmbeddingProvider,
    retrieval: &RetrievalConfig,
) -> Vec<RetrievalRecord> {
    requests
        .par_iter()
        .zip(generations.par_iter())
        .map(|(r, g)| {
            let fail = |e: String| RetrievalRecord {
                request_id: r.request_id.clone(),
                query_set: None,
                ranked: None,
                error: Some(e),
            };
            if let Some(e) = &g.error {
                return fail(e.clone());
            }
            let qs = match &g.generation {
                None => utterance_only(&r.utterance),
                Some(gen) => match make_query_set(
                    &gen.parsed_queries,
                    &r.utterance,
                    retrieval.append_utterance,
                    retrieval.utterance_position,
                    source,
                ) {
                    Ok(qs) => qs,
                    Err(e) => return fail(e.to_string()),
                },
            };
            match interleave_retrieve(index, &qs, provider, retrieval) {
                Ok(ranked) => RetrievalRecord {
                    request_id: r.request_id.clone(),
                    query_set: Some(qs),
                    ranked: Some(ranked),
                    error: None,
                },
                Err(e) => fail(e.to_string()),
            }
        })
        .collect()
}

/// Judges retrievals against the gold sets and aggregates; failures are excluded
/// and listed.
pub fn judge(
    requests: &[LabeledRequest],
    retrievals: &[RetrievalRecord],
    cutoffs: &[usize],
    numerator: MmrrNumerator,
) -> Result<EvalOutcome, HarnessError> {
    let mut judgments = Vec::new();
    let mut judged_ids = Vec::new();
    let mut failures = Vec::new();
    for (r, ret) in requests.iter().zip(retrievals) {
        let result = match &ret.ranked {
            Some(ranked) => Judgment::from_retrieval(ranked, &r.relevant_api_ids).map_err(|e| e.to_string()),
            None => Err(ret.error.clone().unwrap_or_else(|| "no retrieval".into())),
        };
        match result {
            Ok(j) => {
                judgments.push(j);
                judged_ids.push(r.request_id.clone());
            }
            Err(error) => failures.push(RequestFailure {
                request_id: r.request_id.clone(),
                error,
            }),
        }
    }
    if judgments.is_empty() {
        return Err(HarnessError::EmptyEvaluation { failed: failures.len() });
    }
    Ok(EvalOutcome {
        report: aggregate(&judgments, cutoffs, numerator)?,
        judged_ids,
        failures,
    })
}

/// In-memory evaluation: generate (if a generator is given), retrieve, judge.
pub fn evaluate_requests(
    requests: &[LabeledRequest],
    generator: Option<&dyn QueryGenerator>,
    index: &ToolIndex,
    provider: &dyn EmbeddingProvider,
    retrieval: &RetrievalConfig,
    cutoffs: &[usize],
    numerator: MmrrNumerator,
) -> Result<EvalOutcome, HarnessError> {
    let source = generator.map_or(QuerySource::UtteranceOnly, |g| g.source());
    let gens = generate_for_requests(requests, generator);
    let rets = retrieve_for_requests(requests, &gens, source, index, provider, retrieval);
    judge(requests, &rets, cutoffs, numerator)
}

fn stamp_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".stamp");
    PathBuf::from(s)
}

fn stamp_matches(path: &Path, key: &str) -> bool {
    path.exists() && std::fs::read_to_string(stamp_path(path)).is_ok_and(|s| s.trim() == key)
}

fn write_stamp(path: &Path, key: &str) -> Result<(), HarnessError> {
    let sp = stamp_path(path);
    util::write_atomic(&sp, format!("{key}\n").as_bytes()).map_err(|e| io_err(&sp, e))
}

/// Reuses `path` when its stamp equals `key`; otherwise computes and writes it.
pub(crate) fn resumable_json<T: Serialize + DeserializeOwned>(
    path: &Path,
    key: &str,
    compute: impl FnOnce() -> Result<T, HarnessError>,
) -> Result<T, HarnessError> {
    if stamp_matches(path, key) {
        if let Ok(text) = std::fs::read_to_string(path) {
            if let Ok(v) = serde_json::from_str(&text) {
                return Ok(v);
            }
        }
    }
    let v = compute()?;
    write_json_pretty(path, &v).map_err(|e| io_err(path, e))?;
    write_stamp(path, key)?;
    Ok(v)
}

fn resumable_jsonl<T: Serialize + DeserializeOwned>(
    path: &Path,
    key: &str,
    compute: impl FnOnce() -> Result<Vec<T>, HarnessError>,
) -> Result<Vec<T>, HarnessError> {
    if stamp_matches(path, key) {
        if let Ok(v) = read_jsonl(path) {
            return Ok(v);
        }
    }
    let v = compute()?;
    write_jsonl(path, &v).map_err(|e| io_err(path, e))?;
    write_stamp(path, key)?;
    Ok(v)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

/// Preprocesses `corpus_dir` into `<run_dir>/data`.
pub fn stage_preprocess(
    cfg: &RunConfig,
) -> Result<(Vec<ApiDoc>, Vec<LabeledRequest>, PreprocessReport), HarnessError> {
    let (docs, reqs) = corpus::load_corpus(&cfg.corpus_dir)?;
    let (docs, reqs, report) = preprocess(&docs, &reqs);
    let dir = cfg.run_dir.join("data");
    corpus::write_corpus(&dir, &docs, &reqs)?;
    let p = dir.join("preprocess_report.json");
    write_json_pretty(&p, &report).map_err(|e| io_err(&p, e))?;
    Ok((docs, reqs, report))
}

/// Splits the preprocessed corpus into `<run_dir>/split`.
pub fn stage_split(
    cfg: &RunConfig,
    docs: &[ApiDoc],
    requests: &[LabeledRequest],
    report: Option<PreprocessReport>,
) -> Result<CorpusSplit, HarnessError> {
    let s = split(docs, requests, &cfg.split)?;
    corpus::verify_split(&s, docs)?;
    write_split(&cfg.run_dir.join("split"), &s, docs, requests, report)?;
    Ok(s)
}

pub fn build_provider(cfg: &RunConfig) -> Result<Arc<dyn EmbeddingProvider>, HarnessError> {
    Ok(match &cfg.embedder {
        EmbedderConfig::Hashing { dimension } => {
            if *dimension == 0 {
                return Err(HarnessError::Config("embedder dimension must be positive".into()));
            }
            Arc::new(HashingEmbedder::new(*dimension))
        }
        EmbedderConfig::Http {
            endpoint,
            model,
            dimension,
            batch_size,
            cache_path,
            retry,
        } => {
            let endpoint = endpoint
                .clone()
                .or_else(|| std::env::var(crate::embed::EMBED_ENDPOINT_ENV).ok())
                .ok_or_else(|| {
                    HarnessError::Config(format!(
                        "embedder endpoint not configured; set {}",
                        crate::embed::EMBED_ENDPOINT_ENV
                    ))
                })?;
            let inner = HttpEmbedder::new(HttpEmbedderConfig {
                endpoint,
                model: model.clone(),
                dimension: *dimension,
                batch_size: *batch_size,
                retry: *retry,
            });
            let path = cache_path
                .clone()
                .unwrap_or_else(|| cfg.run_dir.join("cache").join("embeddings.jsonl"));
            Arc::new(CachedEmbedder::open(inner, &path)?)
        }
    })
}

/// Loads a saved index when it matches `docs` and the provider, else builds and
/// saves one.
pub fn stage_index(dir: &Path, docs: &[ApiDoc], provider: &dyn EmbeddingProvider) -> Result<ToolIndex, HarnessError> {
    if let Ok(idx) = ToolIndex::load(dir, docs) {
        if idx.provider_id() == provider.provider_id() && idx.dimension() == provider.dimension() {
            return Ok(idx);
        }
    }
    let idx = ToolIndex::build(docs, provider)?;
    idx.save(dir)?;
    Ok(idx)
}

/// Counts completion calls made through any generator of a workspace.
struct Counted {
    inner: Box<dyn QueryGenerator>,
    calls: Arc<AtomicUsize>,
}

impl QueryGenerator for Counted {
    fn generator_id(&self) -> &str {
        self.inner.generator_id()
    }
    fn template(&self) -> &PromptTemplate {
        self.inner.template()
    }
    fn params(&self) -> &SamplingParams {
        self.inner.params()
    }
    fn source(&self) -> QuerySource {
        self.inner.source()
    }
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<Vec<String>, GenError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.complete(request)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub model_ref: String,
    pub base_model: String,
    pub dataset_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignArtifact {
    pub model_ref: String,
    pub base_model: String,
    /// Recall@5 of the starting model, keyed by split name.
    pub initial_recall_at_5: BTreeMap<String, f64>,
    pub iterations: Vec<IterationRecord>,
}

/// A prepared run: preprocessed corpus, split, provider and both indices.
pub struct Workspace {
    pub config: RunConfig,
    pub config_hash: String,
    pub docs: Vec<ApiDoc>,
    pub requests: Vec<LabeledRequest>,
    pub split: CorpusSplit,
    pub provider: Arc<dyn EmbeddingProvider>,
    pub in_domain_index: ToolIndex,
    pub ood_index: ToolIndex,
    world: Arc<MockWorld>,
    calls: Arc<AtomicUsize>,
}

impl Workspace {
    /// Runs (or reuses) preprocessing, splitting and indexing, and records the
    /// config in `<run_dir>/config.json`.
    pub fn open(config: RunConfig) -> Result<Self, HarnessError> {
        config.validate()?;
        let cp = config.run_dir.join("config.json");
        write_json_pretty(&cp, &config).map_err(|e| io_err(&cp, e))?;
        let (docs, requests, report) = stage_preprocess(&config)?;
        let split = stage_split(&config, &docs, &requests, Some(report))?;
        let provider = build_provider(&config)?;
        let (in_docs, ood_docs) = split.partition_docs(&docs);
        let in_domain_index = stage_index(&config.run_dir.join("index").join("in_domain"), &in_docs, &*provider)?;
        let ood_index = stage_index(&config.run_dir.join("index").join("ood"), &ood_docs, &*provider)?;
        let world = Arc::new(MockWorld::from_corpus(&docs, &requests));
        Ok(Self {
            config_hash: config.hash(),
            config,
            docs,
            requests,
            split,
            provider,
            in_domain_index,
            ood_index,
            world,
            calls: Arc::new(AtomicUsize::new(0)),
        })
    }

    pub fn run_dir(&self) -> &Path {
        &self.config.run_dir
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            config_hash: self.config_hash.clone(),
            corpus_hash: corpus::corpus_hash(&self.docs, &self.requests),
            split_hash: self.split.hash(),
        }
    }

    fn stage_key(&self, parts: &[&str]) -> String {
        let p = self.provenance();
        util::sha256_hex(format!("{}|{}|{}|{}", p.config_hash, p.corpus_hash, p.split_hash, parts.join("|")).as_bytes())
    }

    /// Completion calls issued by generators built from this workspace.
    pub fn generation_calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn requests_for(&self, split: SplitName) -> &[LabeledRequest] {
        match split {
            SplitName::Train => &self.split.train,
            SplitName::TestInDomain => &self.split.test_in_domain,
            SplitName::TestOod => &self.split.test_ood,
        }
    }

    pub fn index_for(&self, split: SplitName) -> &ToolIndex {
        match split {
            SplitName::TestOod => &self.ood_index,
            _ => &self.in_domain_index,
        }
    }

    pub fn template(&self) -> PromptTemplate {
        PromptTemplate::builtin(self.config.template)
    }

    fn mock_base(&self) -> Option<MockConfig> {
        match self.config.generator {
            GeneratorConfig::Mock {
                corruption,
                temperature_optimum,
                temperature_sensitivity,
                chatty,
            } => Some(MockConfig {
                corruption,
                seed: self.config.seed,
                temperature_optimum,
                temperature_sensitivity,
                chatty,
            }),
            GeneratorConfig::Http { .. } => None,
        }
    }

    /// The pretrained model: zero-shot generator and training base.
    pub fn base_model(&self) -> String {
        match &self.config.generator {
            GeneratorConfig::Mock { .. } => self.mock_base().unwrap().model_ref(),
            GeneratorConfig::Http { model, .. } => model.clone(),
        }
    }

    /// Builds a generator for `model_ref`.
    pub fn generator(
        &self,
        model_ref: &str,
        params: &SamplingParams,
        source: QuerySource,
    ) -> Result<Box<dyn QueryGenerator>, GenError> {
        let inner: Box<dyn QueryGenerator> = match &self.config.generator {
            GeneratorConfig::Mock { .. } => {
                let cfg = self.mock_base().unwrap().with_model_ref(model_ref)?;
                Box::new(MockGenerator::new(self.world.clone(), cfg, self.template(), *params, source))
            }
            GeneratorConfig::Http {
                endpoint,
                max_in_flight,
                retry,
                ..
            } => {
                let endpoint = endpoint
                    .clone()
                    .or_else(|| std::env::var(crate::querygen::LLM_ENDPOINT_ENV).ok())
                    .ok_or_else(|| {
                        GenError::ServiceUnavailable(format!(
                            "completion endpoint not configured; set {}",
                            crate::querygen::LLM_ENDPOINT_ENV
                        ))
                    })?;
                let cfg = HttpGeneratorConfig {
                    endpoint,
                    model: model_ref.to_string(),
                    max_in_flight: *max_in_flight,
                    retry: *retry,
                };
                Box::new(HttpGenerator::new(cfg, self.template(), *params, source))
            }
        };
        Ok(Box::new(Counted {
            inner,
            calls: self.calls.clone(),
        }))
    }

    pub fn trainer(&self) -> Result<Box<dyn TrainerClient>, HarnessError> {
        Ok(match &self.config.trainer {
            TrainerConfig::Stub { learning_rate } => {
                let base = self
                    .mock_base()
                    .ok_or_else(|| HarnessError::Config("the stub trainer requires the mock generator".into()))?;
                let mut t = StubTrainer::new(self.world.clone(), &self.requests, base);
                t.learning_rate = *learning_rate;
                Box::new(t)
            }
            TrainerConfig::Http {
                endpoint,
                poll_interval_ms,
                max_polls,
                retry,
            } => {
                let endpoint = endpoint
                    .clone()
                    .or_else(|| std::env::var(TRAINER_ENDPOINT_ENV).ok())
                    .ok_or_else(|| {
                        HarnessError::Config(format!("trainer endpoint not configured; set {TRAINER_ENDPOINT_ENV}"))
                    })?;
                Box::new(HttpTrainer::new(HttpTrainerConfig {
                    endpoint,
                    retry: *retry,
                    poll_interval_ms: *poll_interval_ms,
                    max_polls: *max_polls,
                }))
            }
        })
    }

    /// Model reference used by `mode`; SFT and aligned models must have been trained.
    pub fn model_for(&self, mode: GeneratorMode) -> Result<String, HarnessError> {
        let artifact = |stage: &str, cmd: &str| -> Result<String, HarnessError> {
            let p = self.run_dir().join(stage).join("model_ref.json");
            if !p.exists() {
                return Err(HarnessError::MissingArtifact(format!(
                    "{} not found; run `{cmd}` first",
                    p.display()
                )));
            }
            let v: serde_json::Value = read_json(&p)?;
            v.get("model_ref")
                .and_then(|m| m.as_str())
                .map(str::to_string)
                .ok_or_else(|| io_err(&p, "no model_ref field"))
        };
        match mode {
            GeneratorMode::ZeroShot => Ok(self.base_model()),
            GeneratorMode::Sft => artifact("sft", "align --sft"),
            GeneratorMode::Aligned => artifact("align", "align"),
        }
    }

    /// Generator for evaluating `mode` at `temperature` (or the mode default).
    pub fn mode_generator(
        &self,
        mode: GeneratorMode,
        temperature: Option<f64>,
    ) -> Result<(Box<dyn QueryGenerator>, String, f64), HarnessError> {
        let model = self.model_for(mode)?;
        let t = temperature.unwrap_or(self.config.temperatures.get(mode));
        let g = self.generator(&model, &self.config.sampling.with_temperature(t), mode.source())?;
        Ok((g, model, t))
    }

    /// Gold-description fine-tuning: emits the dataset and trains from the base model.
    pub fn stage_sft(&self) -> Result<ModelArtifact, HarnessError> {
        let dir = self.run_dir().join("sft");
        let key = self.stage_key(&["sft"]);
        resumable_json(&dir.join("model_ref.json"), &key, || {
            let (in_docs, _) = self.split.partition_docs(&self.docs);
            let records = gold_sft_records(&self.split.train, &in_docs, &self.template())?;
            let path = dir.join("sft_gold.jsonl");
            let manifest = align::emit_sft_dataset(&records, &path, 0, None)?;
            let base = self.base_model();
            let model_ref = self.trainer()?.train(&path, &base, &TrainingHyperparams::default())?;
            Ok(ModelArtifact {
                model_ref,
                base_model: base,
                dataset_sha256: manifest.dataset_sha256,
            })
        })
    }

    /// The alignment loop from the base model; artifacts go to `<run_dir>/align`.
    pub fn stage_align(&self) -> Result<AlignArtifact, HarnessError> {
        let dir = self.run_dir().join("align");
        let key = self.stage_key(&["align"]);
        resumable_json(&dir.join("model_ref.json"), &key, || {
            let base = self.base_model();
            let mut initial = BTreeMap::new();
            {
                let (g, _, _) = self.mode_generator(GeneratorMode::ZeroShot, None)?;
                for s in SplitName::TESTS {
                    let reqs = self.requests_for(s);
                    let r = if reqs.is_empty() {
                        0.0
                    } else {
                        evaluate_requests(
                            reqs,
                            Some(g.as_ref()),
                            self.index_for(s),
                            &*self.provider,
                            &self.config.retrieval,
                            &[5],
                            self.config.mmrr_numerator,
                        )?
                        .report
                        .recall(5)
                        .unwrap_or(0.0)
                    };
                    initial.insert(s.as_str().to_string(), r);
                }
            }
            let data = AlignmentData {
                train: &self.split.train,
                test_in_domain: &self.split.test_in_domain,
                test_ood: &self.split.test_ood,
                in_domain_index: &self.in_domain_index,
                ood_index: &self.ood_index,
                provider: &*self.provider,
            };
            let settings = AlignmentSettings {
                filter: self.config.filter,
                retrieval: self.config.retrieval,
                sampling: self.config.sampling,
                eval_temperature: self.config.temperatures.aligned,
                initial_model: base.clone(),
            };
            let factory = |m: &str, p: &SamplingParams| self.generator(m, p, QuerySource::Aligned);
            let trainer = self.trainer()?;
            let outcome = run_alignment(&data, &factory, trainer.as_ref(), &settings, &dir);
            write_recall_curve(&dir, &initial, &outcome.records)?;
            if let Some(source) = outcome.error {
                return Err(HarnessError::Align {
                    completed: outcome.records.len(),
                    source,
                });
            }
            Ok(AlignArtifact {
                model_ref: outcome.final_model,
                base_model: base,
                initial_recall_at_5: initial,
                iterations: outcome.records,
            })
        })
    }

    /// Stage chain generation → retrieval → report for one mode and split.
    pub fn evaluate(&self, mode: EvalMode, split: SplitName) -> Result<EvalReport, HarnessError> {
        let name = format!("{}_{}", mode.as_str(), split.as_str());
        let requests = self.requests_for(split);
        let index = self.index_for(split);
        let (generator, model_ref, temperature) = match mode.generator_mode() {
            None => (None, None, None),
            Some(gm) => {
                let (g, m, t) = self.mode_generator(gm, None)?;
                (Some(g), Some(m), Some(t))
            }
        };
        let model_part = model_ref.clone().unwrap_or_default();
        let key = self.stage_key(&["generation", &name, &model_part]);
        let gens = resumable_jsonl(&self.run_dir().join("generations").join(format!("{name}.jsonl")), &key, || {
            Ok(generate_for_requests(requests, generator.as_deref()))
        })?;
        let source = generator.as_ref().map_or(QuerySource::UtteranceOnly, |g| g.source());
        let key = self.stage_key(&["retrieval", &name, &model_part]);
        let rets = resumable_jsonl(&self.run_dir().join("retrievals").join(format!("{name}.jsonl")), &key, || {
            Ok(retrieve_for_requests(requests, &gens, source, index, &*self.provider, &self.config.retrieval))
        })?;
        let key = self.stage_key(&["eval", &name, &model_part]);
        resumable_json(&self.run_dir().join("eval").join(format!("{name}.json")), &key, || {
            let outcome = judge(requests, &rets, &self.config.cutoffs, self.config.mmrr_numerator)?;
            Ok(EvalReport::new(self, mode, split, model_ref.clone(), temperature, requests.len(), outcome))
        })
    }

    /// Retrieval records of a finished evaluation.
    pub fn retrievals(&self, mode: EvalMode, split: SplitName) -> Result<Vec<RetrievalRecord>, HarnessError> {
        let p = self
            .run_dir()
            .join("retrievals")
            .join(format!("{}_{}.jsonl", mode.as_str(), split.as_str()));
        read_jsonl(&p).map_err(|e| io_err(&p, e))
    }
}

fn write_recall_curve(
    dir: &Path,
    initial: &BTreeMap<String, f64>,
    records: &[IterationRecord],
) -> Result<(), HarnessError> {
    let mut out = String::from("iteration,test_in_domain,test_ood\n");
    let row = |t: u32, m: &BTreeMap<String, f64>| {
        format!(
            "{t},{:.4},{:.4}\n",
            m.get("test_in_domain").copied().unwrap_or(0.0),
            m.get("test_ood").copied().unwrap_or(0.0)
        )
    };
    out.push_str(&row(0, initial));
    for r in records {
        out.push_str(&row(r.iteration, &r.recall_at_5));
    }
    let p = dir.join("recall_curve.csv");
    util::write_atomic(&p, out.as_bytes()).map_err(|e| io_err(&p, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestMetrics {
    pub request_id: String,
    pub mmrr: f64,
    pub map: f64,
    pub recall: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub split: SplitName,
    pub model_ref: Option<String>,
    pub temperature: Option<f64>,
    pub n_requests: usize,
    pub n_evaluated: usize,
    pub n_failed: usize,
    pub failures: Vec<RequestFailure>,
    pub cutoffs: Vec<usize>,
    pub mmrr_numerator: MmrrNumerator,
    pub metrics: MetricMeans,
    pub per_request: Vec<RequestMetrics>,
    pub provenance: Provenance,
    pub config: RunConfig,
}

impl EvalReport {
    fn new(
        ws: &Workspace,
        mode: EvalMode,
        split: SplitName,
        model_ref: Option<String>,
        temperature: Option<f64>,
        n_requests: usize,
        outcome: EvalOutcome,
    ) -> Self {
        let r = &outcome.report;
        let per_request = outcome
            .judged_ids
            .iter()
            .enumerate()
            .map(|(i, id)| RequestMetrics {
                request_id: id.clone(),
                mmrr: r.per_sample.mmrr[i],
                map: r.per_sample.map[i],
                recall: r.per_sample.recall.iter().map(|(c, v)| (*c, v[i])).collect(),
            })
            .collect();
        Self {
            mode,
            split,
            model_ref,
            temperature,
            n_requests,
            n_evaluated: r.n_samples,
            n_failed: outcome.failures.len(),
            failures: outcome.failures,
            cutoffs: r.cutoffs.clone(),
            mmrr_numerator: r.mmrr_numerator,
            metrics: r.means.clone(),
            per_request,
            provenance: ws.provenance(),
            config: ws.config.clone(),
        }
    }

    pub fn recall(&self, cutoff: usize) -> Option<f64> {
        self.metrics.recall.get(&cutoff).copied()
    }
}

/// What a full protocol run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSummary {
    pub reports: Vec<EvalReport>,
    pub sweeps: Vec<SweepReport>,
    pub table: Table1,
}

/// Preprocess, split, index, fine-tune on gold descriptions, align, evaluate every
/// mode on both test splits and write the Table-1 report. With `sweep`, each
/// generator mode is first calibrated and evaluated at its best temperature.
pub fn full_protocol(mut config: RunConfig, sweep: bool) -> Result<ProtocolSummary, HarnessError> {
    let mut sweeps = Vec::new();
    if sweep {
        let ws = Workspace::open(config.clone())?;
        ws.stage_sft()?;
        ws.stage_align()?;
        for gm in [GeneratorMode::ZeroShot, GeneratorMode::Sft, GeneratorMode::Aligned] {
            let s = temperature_sweep(&ws, gm, &default_grid(&config.sweep))?;
            match gm {
                GeneratorMode::ZeroShot => config.temperatures.zero_shot = s.best_temperature,
                GeneratorMode::Sft => config.temperatures.sft = s.best_temperature,
                GeneratorMode::Aligned => config.temperatures.aligned = s.best_temperature,
            }
            sweeps.push(s);
        }
    }
    let ws = Workspace::open(config)?;
    ws.stage_sft()?;
    ws.stage_align()?;
    let mut reports = Vec::new();
    for split in SplitName::TESTS {
        for mode in EvalMode::ALL {
            if ws.requests_for(split).is_empty() {
                continue;
            }
            reports.push(ws.evaluate(mode, split)?);
        }
    }
    let table = write_report(ws.run_dir())?;
    Ok(ProtocolSummary { reports, sweeps, table })
}

/// Generated queries and top retrievals for ad-hoc utterances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoResult {
    pub utterance: String,
    pub raw_text: String,
    pub queries: Vec<String>,
    pub top_apis: Vec<String>,
}

pub fn demo(ws: &Workspace, mode: GeneratorMode, utterances: &[String], k: usize) -> Result<Vec<DemoResult>, HarnessError> {
    let (g, _, _) = ws.mode_generator(mode, None)?;
    let retrieval = RetrievalConfig { k, ..ws.config.retrieval };
    utterances
        .iter()
        .map(|u| {
            let gen = generate(g.as_ref(), u, 1)?.remove(0);
            let qs = make_query_set(
                &gen.parsed_queries,
                u,
                retrieval.append_utterance,
                retrieval.utterance_position,
                g.source(),
            )?;
            let ranked = interleave_retrieve(&ws.in_domain_index, &qs, &*ws.provider, &retrieval)?;
            Ok(DemoResult {
                utterance: u.clone(),
                raw_text: gen.raw_text,
                queries: gen.parsed_queries,
                top_apis: ranked.ids(),
            })
        })
        .collect()
}
