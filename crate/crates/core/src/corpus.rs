//! API documents, labeled requests, preprocessing and the in-domain / out-of-domain
//! split.
//!
//! The split is made over tool names, so every API of a tool lands on the same side.
//! Requests whose relevant APIs straddle both sides are dropped before the in-domain
//! train/test split, which guarantees that no out-of-domain API is ever seen during
//! training. [`verify_split`] re-checks those containment rules on any split.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::util::{self, JsonlError};

/// Inclusive description length bounds, in words.
pub const MIN_DESCRIPTION_WORDS: usize = 5;
pub const MAX_DESCRIPTION_WORDS: usize = 50;
/// Inclusive bounds on the number of relevant APIs per request.
pub const MIN_RELEVANT: usize = 1;
pub const MAX_RELEVANT: usize = 3;

pub const APIS_FILE: &str = "apis.jsonl";
pub const REQUESTS_FILE: &str = "requests.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiDoc {
    pub api_id: String,
    pub tool_name: String,
    pub api_name: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledRequest {
    pub request_id: String,
    pub utterance: String,
    /// Ground-truth relevant APIs.
    pub relevant_api_ids: BTreeSet<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("duplicate {kind} id {id:?}")]
    DuplicateId { kind: &'static str, id: String },
    #[error("degenerate split: {0}")]
    DegenerateSplit(String),
    #[error("invalid split configuration: {0}")]
    InvalidConfig(String),
    #[error("split leakage: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Leakage(Vec<SplitViolation>),
}

impl CorpusError {
    fn from_jsonl(path: &Path, e: JsonlError) -> Self {
        match e {
            JsonlError::Io(source) => CorpusError::Io {
                path: path.to_path_buf(),
                source,
            },
            JsonlError::Parse { line, message } => CorpusError::Parse {
                path: path.to_path_buf(),
                line,
                message,
            },
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub fn load_apis(path: &Path) -> Result<Vec<ApiDoc>, CorpusError> {
    let docs: Vec<ApiDoc> = util::read_jsonl(path).map_err(|e| CorpusError::from_jsonl(path, e))?;
    let mut seen = HashSet::new();
    for d in &docs {
        if !seen.insert(d.api_id.as_str()) {
            return Err(CorpusError::DuplicateId {
                kind: "api",
                id: d.api_id.clone(),
            });
        }
    }
    Ok(docs)
}

pub fn load_requests(path: &Path) -> Result<Vec<LabeledRequest>, CorpusError> {
    let reqs: Vec<LabeledRequest> =
        util::read_jsonl(path).map_err(|e| CorpusError::from_jsonl(path, e))?;
    let mut seen = HashSet::new();
    for r in &reqs {
        if !seen.insert(r.request_id.as_str()) {
            return Err(CorpusError::DuplicateId {
                kind: "request",
                id: r.request_id.clone(),
            });
        }
    }
    Ok(reqs)
}

/// Loads `apis.jsonl` and `requests.jsonl` from a corpus directory.
pub fn load_corpus(dir: &Path) -> Result<(Vec<ApiDoc>, Vec<LabeledRequest>), CorpusError> {
    Ok((
        load_apis(&dir.join(APIS_FILE))?,
        load_requests(&dir.join(REQUESTS_FILE))?,
    ))
}

pub fn write_corpus(
    dir: &Path,
    docs: &[ApiDoc],
    requests: &[LabeledRequest],
) -> Result<(), CorpusError> {
    let apis = dir.join(APIS_FILE);
    util::write_jsonl(&apis, docs).map_err(|e| CorpusError::io(&apis, e))?;
    let reqs = dir.join(REQUESTS_FILE);
    util::write_jsonl(&reqs, requests).map_err(|e| CorpusError::io(&reqs, e))
}

/// Number of maximal non-whitespace runs. Punctuation is not stripped.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub docs_in: usize,
    pub docs_kept: usize,
    pub docs_too_short: usize,
    pub docs_too_long: usize,
    pub requests_in: usize,
    pub requests_kept: usize,
    /// Relevant-id references removed because the referenced doc did not survive.
    pub relevant_refs_dropped: usize,
    pub requests_no_relevant: usize,
    pub requests_too_many_relevant: usize,
}

/// Applies the description-length and relevant-set-size filters.
///
/// Relevant ids pointing at removed (or unknown) docs are dropped from a request
/// first; the `1..=3` bound is checked on what remains.
pub fn preprocess(
    docs: &[ApiDoc],
    requests: &[LabeledRequest],
) -> (Vec<ApiDoc>, Vec<LabeledRequest>, PreprocessReport) {
    let mut report = PreprocessReport {
        docs_in: docs.len(),
        requests_in: requests.len(),
        ..Default::default()
    };
    let mut kept_docs = Vec::with_capacity(docs.len());
    for d in docs {
        let wc = word_count(&d.description);
        if wc < MIN_DESCRIPTION_WORDS {
            report.docs_too_short += 1;
        } else if wc > MAX_DESCRIPTION_WORDS {
            report.docs_too_long += 1;
        } else {
            kept_docs.push(d.clone());
        }
    }
    let surviving: HashSet<&str> = kept_docs.iter().map(|d| d.api_id.as_str()).collect();

    let mut kept_reqs = Vec::with_capacity(requests.len());
    for r in requests {
        let relevant: BTreeSet<String> = r
            .relevant_api_ids
            .iter()
            .filter(|id| surviving.contains(id.as_str()))
            .cloned()
            .collect();
        report.relevant_refs_dropped += r.relevant_api_ids.len() - relevant.len();
        if relevant.len() < MIN_RELEVANT {
            report.requests_no_relevant += 1;
        } else if relevant.len() > MAX_RELEVANT {
            report.requests_too_many_relevant += 1;
        } else {
            kept_reqs.push(LabeledRequest {
                relevant_api_ids: relevant,
                ..r.clone()
            });
        }
    }
    report.docs_kept = kept_docs.len();
    report.requests_kept = kept_reqs.len();
    (kept_docs, kept_reqs, report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    /// Fraction of tools assigned to the out-of-domain partition.
    pub ood_fraction: f64,
    /// Fraction of in-domain requests held out for the in-domain test set.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            ood_fraction: 0.204,
            test_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitStats {
    pub in_domain_tools: usize,
    pub ood_tools: usize,
    /// Requests dropped because their relevant APIs span both partitions.
    pub contaminated_removed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub in_domain_apis: BTreeSet<String>,
    pub ood_apis: BTreeSet<String>,
    pub train: Vec<LabeledRequest>,
    pub test_in_domain: Vec<LabeledRequest>,
    pub test_ood: Vec<LabeledRequest>,
    pub seed: u64,
    pub config: SplitConfig,
    pub stats: SplitStats,
}

impl CorpusSplit {
    /// Docs of each partition, in input order.
    pub fn partition_docs(&self, docs: &[ApiDoc]) -> (Vec<ApiDoc>, Vec<ApiDoc>) {
        let in_domain = docs
            .iter()
            .filter(|d| self.in_domain_apis.contains(&d.api_id))
            .cloned()
            .collect();
        let ood = docs
            .iter()
            .filter(|d| self.ood_apis.contains(&d.api_id))
            .cloned()
            .collect();
        (in_domain, ood)
    }

    pub fn hash(&self) -> String {
        util::json_hash(self)
    }
}

/// Splits tools into in-domain / out-of-domain, drops cross-partition requests and
/// divides the in-domain requests into train and test.
///
/// Tools are shuffled with `seed`; the first `ceil((1 - ood_fraction) * |tools|)` go
/// in-domain. Within each output list, requests keep their input order.
pub fn split(
    docs: &[ApiDoc],
    requests: &[LabeledRequest],
    cfg: &SplitConfig,
) -> Result<CorpusSplit, CorpusError> {
    if !(cfg.ood_fraction > 0.0 && cfg.ood_fraction < 1.0) {
        return Err(CorpusError::InvalidConfig(format!(
            "ood_fraction must be in (0, 1), got {}",
            cfg.ood_fraction
        )));
    }
    if !(0.0..1.0).contains(&cfg.test_fraction) {
        return Err(CorpusError::InvalidConfig(format!(
            "test_fraction must be in [0, 1), got {}",
            cfg.test_fraction
        )));
    }

    let tools: BTreeSet<&str> = docs.iter().map(|d| d.tool_name.as_str()).collect();
    let mut tools: Vec<&str> = tools.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    tools.shuffle(&mut rng);

    let n_in = ((1.0 - cfg.ood_fraction) * tools.len() as f64).ceil() as usize;
    if n_in == 0 || n_in >= tools.len() {
        return Err(CorpusError::DegenerateSplit(format!(
            "{} tool(s) with ood_fraction {} leaves a partition empty",
            tools.len(),
            cfg.ood_fraction
        )));
    }
    let in_tools: HashSet<&str> = tools[..n_in].iter().copied().collect();

    let mut in_domain_apis = BTreeSet::new();
    let mut ood_apis = BTreeSet::new();
    for d in docs {
        if in_tools.contains(d.tool_name.as_str()) {
            in_domain_apis.insert(d.api_id.clone());
        } else {
            ood_apis.insert(d.api_id.clone());
        }
    }

    let mut pool = Vec::new();
    let mut test_ood = Vec::new();
    let mut contaminated = 0;
    for r in requests {
        let all_in = r.relevant_api_ids.iter().all(|id| in_domain_apis.contains(id));
        let all_ood = r.relevant_api_ids.iter().all(|id| ood_apis.contains(id));
        match (all_in, all_ood) {
            (true, false) => pool.push(r),
            (false, true) => test_ood.push(r.clone()),
            // Mixed, or referencing ids outside the corpus (or an empty set).
            _ => contaminated += 1,
        }
    }

    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut req_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    req_rng.set_stream(1);
    order.shuffle(&mut req_rng);
    let n_test = (cfg.test_fraction * pool.len() as f64).round() as usize;
    let test_idx: HashSet<usize> = order[..n_test].iter().copied().collect();

    let mut train = Vec::new();
    let mut test_in_domain = Vec::new();
    for (i, r) in pool.into_iter().enumerate() {
        if test_idx.contains(&i) {
            test_in_domain.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }

    Ok(CorpusSplit {
        in_domain_apis,
        ood_apis,
        train,
        test_in_domain,
        test_ood,
        seed: cfg.seed,
        config: *cfg,
        stats: SplitStats {
            in_domain_tools: n_in,
            ood_tools: tools.len() - n_in,
            contaminated_removed: contaminated,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SplitViolation {
    ApiInBothPartitions(String),
    ToolInBothPartitions(String),
    ToolUnassigned(String),
    InDomainRequestUsesOod { request_id: String, api_id: String },
    OodRequestUsesInDomain { request_id: String, api_id: String },
    TrainTestOverlap(String),
}

impl std::fmt::Display for SplitViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::ApiInBothPartitions(id) => write!(f, "api {id} in both partitions"),
            Self::ToolInBothPartitions(t) => write!(f, "tool {t} in both partitions"),
            Self::ToolUnassigned(t) => write!(f, "tool {t} in neither partition"),
            Self::InDomainRequestUsesOod { request_id, api_id } => {
                write!(f, "in-domain request {request_id} references ood api {api_id}")
            }
            Self::OodRequestUsesInDomain { request_id, api_id } => {
                write!(f, "ood request {request_id} references non-ood api {api_id}")
            }
            Self::TrainTestOverlap(id) => write!(f, "request {id} in both train and test"),
        }
    }
}

/// Checks the zero-leakage rules of a split against the docs it was built from.
pub fn verify_split(split: &CorpusSplit, docs: &[ApiDoc]) -> Result<(), CorpusError> {
    let mut violations = Vec::new();
    for id in split.in_domain_apis.intersection(&split.ood_apis) {
        violations.push(SplitViolation::ApiInBothPartitions(id.clone()));
    }

    let mut tool_sides: BTreeMap<&str, (bool, bool)> = BTreeMap::new();
    for d in docs {
        let e = tool_sides.entry(d.tool_name.as_str()).or_default();
        e.0 |= split.in_domain_apis.contains(&d.api_id);
        e.1 |= split.ood_apis.contains(&d.api_id);
    }
    for (tool, sides) in tool_sides {
        match sides {
            (true, true) => violations.push(SplitViolation::ToolInBothPartitions(tool.into())),
            (false, false) => violations.push(SplitViolation::ToolUnassigned(tool.into())),
            _ => {}
        }
    }

    for r in split.train.iter().chain(&split.test_in_domain) {
        for id in &r.relevant_api_ids {
            if !split.in_domain_apis.contains(id) {
                violations.push(SplitViolation::InDomainRequestUsesOod {
                    request_id: r.request_id.clone(),
                    api_id: id.clone(),
                });
            }
        }
    }
    for r in &split.test_ood {
        for id in &r.relevant_api_ids {
            if !split.ood_apis.contains(id) {
                violations.push(SplitViolation::OodRequestUsesInDomain {
                    request_id: r.request_id.clone(),
                    api_id: id.clone(),
                });
            }
        }
    }

    let train_ids: HashSet<&str> = split.train.iter().map(|r| r.request_id.as_str()).collect();
    for r in &split.test_in_domain {
        if train_ids.contains(r.request_id.as_str()) {
            violations.push(SplitViolation::TrainTestOverlap(r.request_id.clone()));
        }
    }

    if violations.is_empty() {
        Ok(())
    } else {
        Err(CorpusError::Leakage(violations))
    }
}

/// Hash over the canonical serialization of docs and requests.
pub fn corpus_hash(docs: &[ApiDoc], requests: &[LabeledRequest]) -> String {
    let mut bytes = util::to_jsonl(docs);
    bytes.extend(util::to_jsonl(requests));
    util::sha256_hex(&bytes)
}

pub fn docs_hash(docs: &[ApiDoc]) -> String {
    util::sha256_hex(&util::to_jsonl(docs))
}

pub const SPLIT_MANIFEST: &str = "split_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ood_fraction: f64,
    pub test_fraction: f64,
    /// How in-domain requests are assigned to train/test.
    pub train_test_criterion: String,
    pub in_domain_api_count: usize,
    pub ood_api_count: usize,
    pub train_count: usize,
    pub test_in_domain_count: usize,
    pub test_ood_count: usize,
    pub stats: SplitStats,
    pub preprocess: Option<PreprocessReport>,
    pub corpus_hash: String,
    pub split_hash: String,
}

/// Writes the split directory: the five JSONL partitions plus `split_manifest.json`.
pub fn write_split(
    dir: &Path,
    split: &CorpusSplit,
    docs: &[ApiDoc],
    requests: &[LabeledRequest],
    preprocess: Option<PreprocessReport>,
) -> Result<SplitManifest, CorpusError> {
    let (in_docs, ood_docs) = split.partition_docs(docs);
    let files: [(&str, Vec<u8>); 5] = [
        ("in_domain_apis.jsonl", util::to_jsonl(&in_docs)),
        ("ood_apis.jsonl", util::to_jsonl(&ood_docs)),
        ("train.jsonl", util::to_jsonl(&split.train)),
        ("test_in_domain.jsonl", util::to_jsonl(&split.test_in_domain)),
        ("test_ood.jsonl", util::to_jsonl(&split.test_ood)),
    ];
    for (name, bytes) in files {
        let p = dir.join(name);
        util::write_atomic(&p, &bytes).map_err(|e| CorpusError::io(&p, e))?;
    }
    let manifest = SplitManifest {
        seed: split.seed,
        ood_fraction: split.config.ood_fraction,
        test_fraction: split.config.test_fraction,
        train_test_criterion: "random_by_request".into(),
        in_domain_api_count: split.in_domain_apis.len(),
        ood_api_count: split.ood_apis.len(),
        train_count: split.train.len(),
        test_in_domain_count: split.test_in_domain.len(),
        test_ood_count: split.test_ood.len(),
        stats: split.stats.clone(),
        preprocess,
        corpus_hash: corpus_hash(docs, requests),
        split_hash: split.hash(),
    };
    let p = dir.join(SPLIT_MANIFEST);
    util::write_json_pretty(&p, &manifest).map_err(|e| CorpusError::io(&p, e))?;
    Ok(manifest)
}

/// A split read back from disk together with the docs of both partitions.
#[derive(Debug, Clone)]
pub struct LoadedSplit {
    pub split: CorpusSplit,
    pub in_domain_docs: Vec<ApiDoc>,
    pub ood_docs: Vec<ApiDoc>,
    pub manifest: SplitManifest,
}

pub fn read_split(dir: &Path) -> Result<LoadedSplit, CorpusError> {
    let mp = dir.join(SPLIT_MANIFEST);
    let text = std::fs::read_to_string(&mp).map_err(|e| CorpusError::io(&mp, e))?;
    let manifest: SplitManifest = serde_json::from_str(&text).map_err(|e| CorpusError::Parse {
        path: mp.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let in_domain_docs = load_apis(&dir.join("in_domain_apis.jsonl"))?;
    let ood_docs = load_apis(&dir.join("ood_apis.jsonl"))?;
    let split = CorpusSplit {
        in_domain_apis: in_domain_docs.iter().map(|d| d.api_id.clone()).collect(),
        ood_apis: ood_docs.iter().map(|d| d.api_id.clone()).collect(),
        train: load_requests(&dir.join("train.jsonl"))?,
        test_in_domain: load_requests(&dir.join("test_in_domain.jsonl"))?,
        test_ood: load_requests(&dir.join("test_ood.jsonl"))?,
        seed: manifest.seed,
        config: SplitConfig {
            ood_fraction: manifest.ood_fraction,
            test_fraction: manifest.test_fraction,
            seed: manifest.seed,
        },
        stats: manifest.stats.clone(),
    };
    Ok(LoadedSplit {
        split,
        in_domain_docs,
        ood_docs,
        manifest,
    })
}

/// Looks up docs by id.
pub fn doc_map(docs: &[ApiDoc]) -> HashMap<&str, &ApiDoc> {
    docs.iter().map(|d| (d.api_id.as_str(), d)).collect()
}
