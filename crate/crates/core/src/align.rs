//! Rejection-sampling alignment: draft scoring, the three-stage filter, SFT dataset
//! emission, trainer handoff and the iteration loop.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::{doc_map, ApiDoc, LabeledRequest};
use crate::embed::EmbeddingProvider;
use crate::harness::evaluate_requests;
use crate::index::{interleave_retrieve, make_query_set, IndexError, QuerySet, RetrievalConfig, ToolIndex};
use crate::metrics::{reward_with, Judgment, MmrrNumerator, RewardMetric};
use crate::querygen::{
    generate, GenError, MockConfig, MockWorld, PromptTemplate, QueryGenerator, SamplingParams, DRAFT_TEMPERATURE,
};
use crate::remote::{get_json, post_json, RemoteError, RetryPolicy};
use crate::util::{self, read_jsonl, write_json_pretty, write_jsonl};

pub const ALIGNMENT_LOG: &str = "alignment_log.jsonl";
pub const HISTOGRAM_BUCKETS: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum AlignError {
    #[error("invalid filter config: {0}")]
    InvalidConfig(String),
    #[error("no draft survived filtering at iteration {iteration}")]
    EmptySelection { iteration: u32 },
    #[error("trainer failure: {0}")]
    TrainerFailure(String),
    #[error("generator error: {0}")]
    Generation(#[from] GenError),
    #[error("retrieval error: {0}")]
    Index(#[from] IndexError),
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("io error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> AlignError {
    AlignError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    /// Drafts generated per request.
    pub m: usize,
    /// Top drafts kept per request.
    pub n_draft: usize,
    pub r_min: f64,
    /// Percent of the kept population retained by the percentile stage.
    pub p_top: f64,
    pub reward_metric: RewardMetric,
    #[serde(default)]
    pub mmrr_numerator: MmrrNumerator,
    /// Alignment iterations.
    pub iterations: u32,
    pub draft_temperature: f64,
    /// Retrieval depth used when computing rewards.
    pub reward_k: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            m: 24,
            n_draft: 1,
            r_min: 0.05,
            p_top: 100.0,
            reward_metric: RewardMetric::Mmrr,
            mmrr_numerator: MmrrNumerator::Corrected,
            iterations: 5,
            draft_temperature: DRAFT_TEMPERATURE,
            reward_k: 11,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), AlignError> {
        let bad = |m: String| Err(AlignError::InvalidConfig(m));
        if self.m == 0 || self.n_draft == 0 || self.n_draft > self.m {
            return bad(format!("need 1 <= n_draft <= m, got n_draft={} m={}", self.n_draft, self.m));
        }
        if !(0.0..=1.0).contains(&self.r_min) {
            return bad(format!("r_min must be in [0, 1], got {}", self.r_min));
        }
        if !(self.p_top > 0.0 && self.p_top <= 100.0) {
            return bad(format!("p_top must be in (0, 100], got {}", self.p_top));
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if self.reward_k == 0 || (self.reward_metric == RewardMetric::AvgRecall5_11 && self.reward_k < 11) {
            return bad(format!("reward_k {} too small for {}", self.reward_k, self.reward_metric));
        }
        if !(self.draft_temperature >= 0.0) {
            return bad("draft_temperature must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardedDraft {
    pub request_id: String,
    pub utterance: String,
    pub draft_index: usize,
    /// Absent when the draft failed to generate, parse or retrieve.
    pub query_set: Option<QuerySet>,
    pub reward: f64,
    pub iteration: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl RewardedDraft {
    pub fn failed(&self) -> bool {
        self.query_set.is_none()
    }
}

fn reward_config(cfg: &FilterConfig, retrieval: &RetrievalConfig) -> RetrievalConfig {
    RetrievalConfig {
        k: cfg.reward_k,
        ..*retrieval
    }
}

fn score_query_set(
    qs: &QuerySet,
    request: &LabeledRequest,
    index: &ToolIndex,
    provider: &dyn EmbeddingProvider,
    cfg: &FilterConfig,
    retrieval: &RetrievalConfig,
) -> Result<f64, String> {
    let ranked = interleave_retrieve(index, qs, provider, &reward_config(cfg, retrieval)).map_err(|e| e.to_string())?;
    let j = Judgment::from_retrieval(&ranked, &request.relevant_api_ids).map_err(|e| e.to_string())?;
    reward_with(&j, cfg.reward_metric, cfg.mmrr_numerator).map_err(|e| e.to_string())
}

/// Generates `m` drafts per request and scores each against the gold set.
///
/// Requests run in parallel; output order is request order, then draft index.
/// Drafts that fail anywhere get reward 0 and a failure note.
pub fn score_drafts(
    requests: &[LabeledRequest],
    generator: &dyn QueryGenerator,
    index: &ToolIndex,
    provider: &dyn EmbeddingProvider,
    cfg: &FilterConfig,
    retrieval: &RetrievalConfig,
    iteration: u32,
) -> Vec<RewardedDraft> {
    requests
        .par_iter()
        .flat_map_iter(|req| {
            let failed = |i: usize, why: String| RewardedDraft {
                request_id: req.request_id.clone(),
                utterance: req.utterance.clone(),
                draft_index: i,
                query_set: None,
                reward: 0.0,
                iteration,
                failure: Some(why),
            };
            let drafts: Vec<RewardedDraft> = match generate(generator, &req.utterance, cfg.m) {
                Err(e) => (0..cfg.m).map(|i| failed(i, e.to_string())).collect(),
                Ok(results) => results
                    .into_iter()
                    .map(|g| {
                        if g.parsed_queries.is_empty() {
                            return failed(g.draw_index, "empty generation".into());
                        }
                        let qs = match make_query_set(
                            &g.parsed_queries,
                            &req.utterance,
                            retrieval.append_utterance,
                            retrieval.utterance_position,
                            generator.source(),
                        ) {
                            Ok(qs) => qs,
                            Err(e) => return failed(g.draw_index, e.to_string()),
                        };
                        match score_query_set(&qs, req, index, provider, cfg, retrieval) {
                            Ok(reward) => RewardedDraft {
                                request_id: req.request_id.clone(),
                                utterance: req.utterance.clone(),
                                draft_index: g.draw_index,
                                query_set: Some(qs),
                                reward,
                                iteration,
                                failure: None,
                            },
                            Err(e) => failed(g.draw_index, e),
                        }
                    })
                    .collect(),
            };
            drafts
        })
        .collect()
}

/// Re-scores a stored draft; identical inputs give the identical reward.
pub fn rescore(
    draft: &RewardedDraft,
    request: &LabeledRequest,
    index: &ToolIndex,
    provider: &dyn EmbeddingProvider,
    cfg: &FilterConfig,
    retrieval: &RetrievalConfig,
) -> Result<f64, String> {
    match &draft.query_set {
        Some(qs) => score_query_set(qs, request, index, provider, cfg, retrieval),
        None => Ok(0.0),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterCounts {
    pub total: usize,
    pub failed: usize,
    pub below_top_n: usize,
    pub below_r_min: usize,
    pub below_percentile: usize,
    pub kept: usize,
}

/// Linear-interpolation percentile of `values` (need not be sorted).
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (p.clamp(0.0, 100.0) / 100.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// The three-stage filter: top `n_draft` per request (ties to the lower draft
/// index, failed drafts never kept), then `r_min`, then drafts strictly below the
/// `(100 - p_top)`th percentile of all surviving rewards.
///
/// Survivors are returned grouped by request in first-appearance order, best first.
pub fn select_drafts<'a>(
    drafts: &'a [RewardedDraft],
    cfg: &FilterConfig,
) -> Result<(Vec<&'a RewardedDraft>, FilterCounts), AlignError> {
    cfg.validate()?;
    let mut counts = FilterCounts {
        total: drafts.len(),
        ..Default::default()
    };
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<&RewardedDraft>> = HashMap::new();
    for d in drafts {
        if d.failed() {
            counts.failed += 1;
            continue;
        }
        groups
            .entry(&d.request_id)
            .or_insert_with(|| {
                order.push(&d.request_id);
                Vec::new()
            })
            .push(d);
    }

    let mut kept: Vec<&RewardedDraft> = Vec::new();
    for id in order {
        let mut g = groups.remove(id).unwrap();
        g.sort_by(|a, b| b.reward.total_cmp(&a.reward).then(a.draft_index.cmp(&b.draft_index)));
        counts.below_top_n += g.len().saturating_sub(cfg.n_draft);
        g.truncate(cfg.n_draft);
        kept.extend(g);
    }

    let before = kept.len();
    kept.retain(|d| d.reward >= cfg.r_min);
    counts.below_r_min = before - kept.len();

    if cfg.p_top < 100.0 {
        let rewards: Vec<f64> = kept.iter().map(|d| d.reward).collect();
        if let Some(threshold) = percentile(&rewards, 100.0 - cfg.p_top) {
            let before = kept.len();
            kept.retain(|d| d.reward >= threshold);
            counts.below_percentile = before - kept.len();
        }
    }
    counts.kept = kept.len();
    Ok((kept, counts))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    GoldDescriptions,
    SelectedDraft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub prompt: String,
    pub target: String,
    pub request_id: String,
    /// Reward of the selected draft; null for gold targets.
    pub reward: Option<f64>,
    pub iteration: u32,
    pub provenance: Provenance,
}

/// Filters drafts and turns the survivors into training records whose targets are
/// the generated queries only.
pub fn filter_samples(
    drafts: &[RewardedDraft],
    cfg: &FilterConfig,
    template: &PromptTemplate,
) -> Result<(Vec<SftRecord>, FilterCounts), AlignError> {
    let (kept, counts) = select_drafts(drafts, cfg)?;
    if kept.is_empty() {
        let iteration = drafts.first().map_or(0, |d| d.iteration);
        return Err(AlignError::EmptySelection { iteration });
    }
    let records = kept
        .into_iter()
        .map(|d| {
            let qs = d.query_set.as_ref().expect("kept drafts are scored");
            Ok(SftRecord {
                prompt: template.render(&d.utterance)?,
                target: qs.generated().join("\n"),
                request_id: d.request_id.clone(),
                reward: Some(d.reward),
                iteration: d.iteration,
                provenance: Provenance::SelectedDraft,
            })
        })
        .collect::<Result<Vec<_>, AlignError>>()?;
    Ok((records, counts))
}

/// Plain fine-tuning targets: the relevant descriptions, one per line, in id order.
pub fn gold_sft_records(
    requests: &[LabeledRequest],
    docs: &[ApiDoc],
    template: &PromptTemplate,
) -> Result<Vec<SftRecord>, AlignError> {
    let by_id = doc_map(docs);
    requests
        .iter()
        .map(|r| {
            let lines: Vec<&str> = r
                .relevant_api_ids
                .iter()
                .filter_map(|id| by_id.get(id.as_str()).map(|d| d.description.as_str()))
                .take(crate::index::MAX_GENERATED_QUERIES)
                .collect();
            if lines.is_empty() {
                return Err(AlignError::InvalidConfig(format!(
                    "request {} has no relevant description among the given docs",
                    r.request_id
                )));
            }
            Ok(SftRecord {
                prompt: template.render(&r.utterance)?,
                target: lines.join("\n"),
                request_id: r.request_id.clone(),
                reward: None,
                iteration: 0,
                provenance: Provenance::GoldDescriptions,
            })
        })
        .collect()
}

/// Recommended trainer settings, sent with every training request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHyperparams {
    pub batch_size: u32,
    pub learning_rate: f64,
    pub lr_schedule: String,
    pub weight_decay: f64,
    pub grad_clip: [f64; 2],
    pub loss_on: String,
    pub epochs: u32,
}

impl Default for TrainingHyperparams {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 2e-5,
            lr_schedule: "constant".into(),
            weight_decay: 0.01,
            grad_clip: [-1.0, 1.0],
            loss_on: "generated_tokens".into(),
            epochs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftManifest {
    pub dataset_file: String,
    pub dataset_sha256: String,
    pub record_count: usize,
    pub iteration: u32,
    pub provenance: Provenance,
    pub filter: Option<FilterConfig>,
    pub hyperparams: TrainingHyperparams,
}

pub fn manifest_path(dataset: &Path) -> PathBuf {
    dataset.with_extension("manifest.json")
}

/// Writes the records as JSONL plus a `<name>.manifest.json` beside them.
pub fn emit_sft_dataset(
    records: &[SftRecord],
    path: &Path,
    iteration: u32,
    filter: Option<&FilterConfig>,
) -> Result<SftManifest, AlignError> {
    let first = records
        .first()
        .ok_or_else(|| AlignError::InvalidConfig("no records to emit".into()))?;
    let bytes = util::to_jsonl(records);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    util::write_atomic(path, &bytes).map_err(|e| io_err(path, e))?;
    let manifest = SftManifest {
        dataset_file: path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        dataset_sha256: util::sha256_hex(&bytes),
        record_count: records.len(),
        iteration,
        provenance: first.provenance,
        filter: filter.copied(),
        hyperparams: TrainingHyperparams::default(),
    };
    let mpath = manifest_path(path);
    write_json_pretty(&mpath, &manifest).map_err(|e| io_err(&mpath, e))?;
    Ok(manifest)
}

pub fn load_sft_dataset(path: &Path) -> Result<Vec<SftRecord>, AlignError> {
    read_jsonl(path).map_err(|e| io_err(path, e))
}

pub trait TrainerClient: Send + Sync {
    /// Trains from `base_model` on the dataset and returns the new model reference.
    fn train(&self, dataset: &Path, base_model: &str, hyperparams: &TrainingHyperparams) -> Result<String, AlignError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpTrainerConfig {
    pub endpoint: String,
    #[serde(default)]
    pub retry: RetryPolicy,
    pub poll_interval_ms: u64,
    pub max_polls: u32,
}

impl HttpTrainerConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            retry: RetryPolicy::default(),
            poll_interval_ms: 5_000,
            max_polls: 17_280,
        }
    }
}

/// Remote trainer: submits a job, then polls `<endpoint>/<job_id>` until it
/// reports `succeeded` (with a `model_ref`) or `failed`.
pub struct HttpTrainer {
    pub config: HttpTrainerConfig,
}

fn remote_failure(e: RemoteError) -> AlignError {
    AlignError::TrainerFailure(e.to_string())
}

impl HttpTrainer {
    pub fn new(config: HttpTrainerConfig) -> Self {
        Self { config }
    }

    fn outcome(v: &serde_json::Value) -> Option<Result<String, AlignError>> {
        let status = v.get("status").and_then(|s| s.as_str()).unwrap_or("");
        match status {
            "failed" | "error" | "cancelled" => Some(Err(AlignError::TrainerFailure(format!(
                "job ended with status {status}: {}",
                v.get("error").map(|e| e.to_string()).unwrap_or_default()
            )))),
            "" | "succeeded" | "completed" | "done" => v
                .get("model_ref")
                .and_then(|m| m.as_str())
                .map(|m| Ok(m.to_string())),
            _ => None,
        }
    }
}

impl TrainerClient for HttpTrainer {
    fn train(&self, dataset: &Path, base_model: &str, hyperparams: &TrainingHyperparams) -> Result<String, AlignError> {
        let body = json!({
            "dataset_uri": dataset.to_string_lossy(),
            "base_model": base_model,
            "hyperparams": hyperparams,
        });
        let resp = post_json(&self.config.retry, &self.config.endpoint, &body).map_err(remote_failure)?;
        if let Some(done) = Self::outcome(&resp) {
            return done;
        }
        let job = resp
            .get("job_id")
            .and_then(|j| j.as_str())
            .ok_or_else(|| AlignError::TrainerFailure(format!("no model_ref or job_id in {resp}")))?;
        let url = format!("{}/{job}", self.config.endpoint.trim_end_matches('/'));
        for _ in 0..self.config.max_polls {
            std::thread::sleep(Duration::from_millis(self.config.poll_interval_ms));
            let v = get_json(&self.config.retry, &url).map_err(remote_failure)?;
            if let Some(done) = Self::outcome(&v) {
                return done;
            }
        }
        Err(AlignError::TrainerFailure(format!("job {job} did not finish")))
    }
}

/// Stand-in trainer for the mock generator.
///
/// It measures how far the selected targets are from what the mock intends to say
/// (the fraction of mismatched token positions) and moves the corruption rate toward
/// that value by `learning_rate`.
pub struct StubTrainer {
    world: Arc<MockWorld>,
    utterances: HashMap<String, String>,
    base: MockConfig,
    pub learning_rate: f64,
    calls: AtomicUsize,
}

impl StubTrainer {
    pub fn new(world: Arc<MockWorld>, requests: &[LabeledRequest], base: MockConfig) -> Self {
        Self {
            world,
            utterances: requests
                .iter()
                .map(|r| (r.request_id.clone(), r.utterance.clone()))
                .collect(),
            base,
            learning_rate: 1.0,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    /// Fraction of token positions where the targets differ from the intended text.
    pub fn measured_corruption(&self, records: &[SftRecord]) -> Option<f64> {
        let (mut mismatched, mut total) = (0usize, 0usize);
        for r in records {
            let Some(u) = self.utterances.get(&r.request_id) else {
                continue;
            };
            let intended = self.world.intended(u);
            let target: Vec<&str> = r.target.split('\n').collect();
            for i in 0..intended.len().max(target.len()) {
                let a: Vec<&str> = intended.get(i).map_or(vec![], |l| l.split_whitespace().collect());
                let b: Vec<&str> = target.get(i).map_or(vec![], |l| l.split_whitespace().collect());
                let len = a.len().max(b.len());
                total += len;
                mismatched += (0..len).filter(|&p| a.get(p) != b.get(p)).count();
            }
        }
        (total > 0).then(|| mismatched as f64 / total as f64)
    }
}

impl TrainerClient for StubTrainer {
    fn train(&self, dataset: &Path, base_model: &str, _: &TrainingHyperparams) -> Result<String, AlignError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let current = self
            .base
            .with_model_ref(base_model)
            .map_err(|e| AlignError::TrainerFailure(e.to_string()))?;
        let records = load_sft_dataset(dataset).map_err(|e| AlignError::TrainerFailure(e.to_string()))?;
        let measured = self
            .measured_corruption(&records)
            .ok_or_else(|| AlignError::TrainerFailure("dataset has no records for known requests".into()))?;
        let c = current.corruption + self.learning_rate * (measured - current.corruption);
        Ok(MockConfig {
            corruption: c.clamp(0.0, 1.0),
            ..current
        }
        .model_ref())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSummary {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// Keyed by percentile (10, 25, 50, 75, 90).
    pub percentiles: BTreeMap<u32, f64>,
    /// Counts over `[0, 0.1), [0.1, 0.2), ..., [0.9, 1.0]`.
    pub histogram: Vec<usize>,
}

pub fn summarize_rewards(rewards: &[f64]) -> RewardSummary {
    let mut histogram = vec![0; HISTOGRAM_BUCKETS];
    for &r in rewards {
        let b = ((r * HISTOGRAM_BUCKETS as f64).floor() as usize).min(HISTOGRAM_BUCKETS - 1);
        histogram[b] += 1;
    }
    let n = rewards.len();
    RewardSummary {
        count: n,
        mean: if n == 0 { 0.0 } else { rewards.iter().sum::<f64>() / n as f64 },
        min: if n == 0 { 0.0 } else { rewards.iter().copied().fold(f64::INFINITY, f64::min) },
        max: rewards.iter().copied().fold(0.0, f64::max),
        percentiles: [10, 25, 50, 75, 90]
            .into_iter()
            .map(|p| (p, percentile(rewards, p as f64).unwrap_or(0.0)))
            .collect(),
        histogram,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u32,
    /// Model that generated this iteration's drafts.
    pub model_ref: String,
    /// Model produced by training on this iteration's selection.
    pub trained_model_ref: String,
    pub reward_distribution: RewardSummary,
    pub kept_sample_count: usize,
    pub mean_kept_reward: f64,
    pub filtered_out: FilterCounts,
    pub dataset_sha256: String,
    /// Recall@5 of the trained model, keyed by split name.
    pub recall_at_5: BTreeMap<String, f64>,
}

/// Everything the loop needs from a prepared split.
pub struct AlignmentData<'a> {
    pub train: &'a [LabeledRequest],
    pub test_in_domain: &'a [LabeledRequest],
    pub test_ood: &'a [LabeledRequest],
    pub in_domain_index: &'a ToolIndex,
    pub ood_index: &'a ToolIndex,
    pub provider: &'a dyn EmbeddingProvider,
}

/// Builds a generator for a model reference with the given sampling parameters.
pub type GeneratorFactory<'a> =
    dyn Fn(&str, &SamplingParams) -> Result<Box<dyn QueryGenerator>, GenError> + Sync + 'a;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSettings {
    pub filter: FilterConfig,
    pub retrieval: RetrievalConfig,
    pub sampling: SamplingParams,
    /// Temperature used for the per-iteration test evaluation.
    pub eval_temperature: f64,
    pub initial_model: String,
}

#[derive(Debug)]
pub struct AlignmentOutcome {
    pub records: Vec<IterationRecord>,
    pub final_model: String,
    /// Set when the loop stopped early; `records` holds the completed iterations.
    pub error: Option<AlignError>,
}

fn recall5(
    requests: &[LabeledRequest],
    generator: &dyn QueryGenerator,
    index: &ToolIndex,
    provider: &dyn EmbeddingProvider,
    retrieval: &RetrievalConfig,
) -> Result<f64, AlignError> {
    if requests.is_empty() {
        return Ok(0.0);
    }
    let out = evaluate_requests(requests, Some(generator), index, provider, retrieval, &[5], MmrrNumerator::Corrected)
        .map_err(|e| AlignError::Eval(e.to_string()))?;
    Ok(out.report.recall(5).unwrap_or(0.0))
}

/// Runs the alignment loop for `settings.filter.iterations` iterations, writing
/// `drafts_iter_<t>.jsonl`, `sft_iter_<t>.jsonl` (plus manifest) and the cumulative
/// `alignment_log.jsonl` into `out_dir`.
pub fn run_alignment(
    data: &AlignmentData<'_>,
    factory: &GeneratorFactory<'_>,
    trainer: &dyn TrainerClient,
    settings: &AlignmentSettings,
    out_dir: &Path,
) -> AlignmentOutcome {
    let mut records = Vec::new();
    let mut model = settings.initial_model.clone();
    let error = (|| -> Result<(), AlignError> {
        settings.filter.validate()?;
        std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
        let template = factory(&model, &settings.sampling)?.template().clone();
        for t in 1..=settings.filter.iterations {
            let record = run_iteration(data, factory, trainer, settings, out_dir, &template, &model, t)?;
            model = record.trained_model_ref.clone();
            records.push(record);
            let log = out_dir.join(ALIGNMENT_LOG);
            write_jsonl(&log, &records).map_err(|e| io_err(&log, e))?;
        }
        Ok(())
    })()
    .err();
    AlignmentOutcome {
        records,
        final_model: model,
        error,
    }
}

#[allow(clippy::too_many_arguments)]
fn run_iteration(
    data: &AlignmentData<'_>,
    factory: &GeneratorFactory<'_>,
    trainer: &dyn TrainerClient,
    settings: &AlignmentSettings,
    out_dir: &Path,
    template: &PromptTemplate,
    model: &str,
    t: u32,
) -> Result<IterationRecord, AlignError> {
    let cfg = &settings.filter;
    let draft_params = settings.sampling.with_temperature(cfg.draft_temperature);
    let generator = factory(model, &draft_params)?;
    let drafts = score_drafts(
        data.train,
        generator.as_ref(),
        data.in_domain_index,
        data.provider,
        cfg,
        &settings.retrieval,
        t,
    );
    let drafts_path = out_dir.join(format!("drafts_iter_{t}.jsonl"));
    write_jsonl(&drafts_path, &drafts).map_err(|e| io_err(&drafts_path, e))?;

    let (sft, counts) = match filter_samples(&drafts, cfg, template) {
        Err(AlignError::EmptySelection { .. }) => return Err(AlignError::EmptySelection { iteration: t }),
        other => other?,
    };
    let sft_path = out_dir.join(format!("sft_iter_{t}.jsonl"));
    let manifest = emit_sft_dataset(&sft, &sft_path, t, Some(cfg))?;
    let trained = trainer.train(&sft_path, model, &manifest.hyperparams)?;

    let eval_gen = factory(&trained, &settings.sampling.with_temperature(settings.eval_temperature))?;
    let mut recall_at_5 = BTreeMap::new();
    recall_at_5.insert(
        "test_in_domain".to_string(),
        recall5(data.test_in_domain, eval_gen.as_ref(), data.in_domain_index, data.provider, &settings.retrieval)?,
    );
    recall_at_5.insert(
        "test_ood".to_string(),
        recall5(data.test_ood, eval_gen.as_ref(), data.ood_index, data.provider, &settings.retrieval)?,
    );

    let rewards: Vec<f64> = drafts.iter().map(|d| d.reward).collect();
    let kept: Vec<f64> = sft.iter().filter_map(|r| r.reward).collect();
    Ok(IterationRecord {
        iteration: t,
        model_ref: model.to_string(),
        trained_model_ref: trained,
        reward_distribution: summarize_rewards(&rewards),
        kept_sample_count: sft.len(),
        mean_kept_reward: kept.iter().sum::<f64>() / kept.len() as f64,
        filtered_out: counts,
        dataset_sha256: manifest.dataset_sha256,
        recall_at_5,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::{QuerySource, UtterancePosition};
    use proptest::prelude::*;

    fn draft(req: &str, i: usize, reward: f64) -> RewardedDraft {
        RewardedDraft {
            request_id: req.into(),
            utterance: format!("utterance for {req}"),
            draft_index: i,
            query_set: Some(QuerySet {
                queries: vec![format!("{req} query {i}"), format!("utterance for {req}")],
                includes_utterance: true,
                utterance_position: UtterancePosition::Last,
                source: QuerySource::Mock,
            }),
            reward,
            iteration: 1,
            failure: None,
        }
    }

    fn kept_ids(drafts: &[RewardedDraft], cfg: &FilterConfig) -> Vec<(String, usize)> {
        select_drafts(drafts, cfg)
            .unwrap()
            .0
            .iter()
            .map(|d| (d.request_id.clone(), d.draft_index))
            .collect()
    }

    fn rewards_fixture() -> Vec<RewardedDraft> {
        vec![draft("a", 0, 0.9), draft("a", 1, 0.4), draft("a", 2, 0.02)]
    }

    #[test]
    fn default_filter_keeps_best_draft() {
        let cfg = FilterConfig::default();
        assert_eq!(kept_ids(&rewards_fixture(), &cfg), [("a".to_string(), 0)]);
    }

    #[test]
    fn two_drafts_kept() {
        let cfg = FilterConfig {
            n_draft: 2,
            ..Default::default()
        };
        assert_eq!(kept_ids(&rewards_fixture(), &cfg), [("a".into(), 0), ("a".into(), 1)]);
    }

    #[test]
    fn all_below_r_min_is_empty_selection() {
        let drafts = vec![draft("a", 0, 0.01), draft("b", 0, 0.03)];
        let t = PromptTemplate::builtin(Default::default());
        assert!(matches!(
            filter_samples(&drafts, &FilterConfig::default(), &t),
            Err(AlignError::EmptySelection { .. })
        ));
    }

    #[test]
    fn stage_order_matters() {
        // Top-1 first keeps a's 0.9 draft and b's 0.3 draft; the percentile stage then
        // runs over {0.9, 0.3} only. Filtering by percentile first would have kept
        // a's second draft and dropped b entirely.
        let drafts = vec![draft("a", 0, 0.9), draft("a", 1, 0.85), draft("b", 0, 0.3)];
        let cfg = FilterConfig {
            p_top: 50.0,
            ..Default::default()
        };
        let (kept, counts) = select_drafts(&drafts, &cfg).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].reward, 0.9);
        assert_eq!(counts.below_top_n, 1);
        assert_eq!(counts.below_percentile, 1);
    }

    #[test]
    fn ties_go_to_lower_draft_index() {
        let drafts = vec![draft("a", 3, 0.5), draft("a", 1, 0.5), draft("a", 2, 0.5)];
        assert_eq!(kept_ids(&drafts, &FilterConfig::default()), [("a".into(), 1)]);
    }

    #[test]
    fn failed_drafts_never_selected() {
        let mut f = draft("a", 0, 0.0);
        f.query_set = None;
        f.failure = Some("empty generation".into());
        let drafts = vec![f, draft("a", 1, 0.2)];
        let (kept, counts) = select_drafts(&drafts, &FilterConfig::default()).unwrap();
        assert_eq!(kept[0].draft_index, 1);
        assert_eq!(counts.failed, 1);
    }

    #[test]
    fn sft_target_excludes_utterance() {
        let t = PromptTemplate::builtin(Default::default());
        let (recs, _) = filter_samples(&rewards_fixture(), &FilterConfig::default(), &t).unwrap();
        assert_eq!(recs[0].target, "a query 0");
        assert_eq!(recs[0].provenance, Provenance::SelectedDraft);
        assert!(recs[0].prompt.contains("Human: utterance for a\n"));
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0], 50.0), Some(2.5));
        assert_eq!(percentile(&[5.0], 30.0), Some(5.0));
        assert_eq!(percentile(&[0.0, 10.0], 0.0), Some(0.0));
        assert_eq!(percentile(&[], 10.0), None);
    }

    #[test]
    fn histogram_covers_every_draft() {
        let s = summarize_rewards(&[0.0, 0.05, 0.1, 0.55, 0.99, 1.0]);
        assert_eq!(s.histogram.iter().sum::<usize>(), 6);
        assert_eq!(s.histogram[0], 2);
        assert_eq!(s.histogram[9], 2);
        assert_eq!(s.min, 0.0);
        assert_eq!(s.max, 1.0);
    }

    #[test]
    fn config_validation() {
        for cfg in [
            FilterConfig { n_draft: 25, ..Default::default() },
            FilterConfig { p_top: 0.0, ..Default::default() },
            FilterConfig { r_min: 1.5, ..Default::default() },
            FilterConfig { iterations: 0, ..Default::default() },
            FilterConfig { reward_metric: RewardMetric::AvgRecall5_11, reward_k: 5, ..Default::default() },
        ] {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    fn drafts_strategy() -> impl Strategy<Value = Vec<RewardedDraft>> {
        prop::collection::vec((0usize..6, 0usize..5, 0u32..=20), 1..40).prop_map(|v| {
            let mut seen = std::collections::HashSet::new();
            v.into_iter()
                .filter(|(r, i, _)| seen.insert((*r, *i)))
                .map(|(r, i, q)| draft(&format!("r{r}"), i, q as f64 / 20.0))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn tightening_never_grows_selection(
            drafts in drafts_strategy(),
            n_draft in 1usize..4,
            r1 in 0u32..=20, r2 in 0u32..=20,
            p1 in 1u32..=100, p2 in 1u32..=100,
        ) {
            let base = FilterConfig { m: 24, n_draft, ..Default::default() };
            let lo = |r: u32, p: u32| FilterConfig { r_min: r as f64 / 20.0, p_top: p as f64, ..base };
            let (r_lo, r_hi) = (r1.min(r2), r1.max(r2));
            let (p_lo, p_hi) = (p1.min(p2), p1.max(p2));

            let loose: std::collections::HashSet<_> = kept_ids(&drafts, &lo(r_lo, 100)).into_iter().collect();
            let tight: std::collections::HashSet<_> = kept_ids(&drafts, &lo(r_hi, 100)).into_iter().collect();
            prop_assert!(tight.is_subset(&loose));

            let wide: std::collections::HashSet<_> = kept_ids(&drafts, &lo(0, p_hi)).into_iter().collect();
            let narrow: std::collections::HashSet<_> = kept_ids(&drafts, &lo(0, p_lo)).into_iter().collect();
            prop_assert!(narrow.is_subset(&wide));

            let (kept, _) = select_drafts(&drafts, &lo(r_lo, p_lo)).unwrap();
            let requests: std::collections::HashSet<_> = drafts.iter().map(|d| &d.request_id).collect();
            prop_assert!(kept.len() <= n_draft * requests.len());
            prop_assert!(kept.iter().all(|d| d.reward >= r_lo as f64 / 20.0));
        }
    }
}
