//! Network-free synthetic corpora whose gold descriptions are recoverable.
//!
//! Every API gets a signature of pseudo-words, and no two signature words of the
//! whole corpus share a hashing-embedder bucket. Descriptions are the signature plus
//! a fixed filler phrase (whose buckets are reserved), so under the reference
//! embedder a description is similar only to texts containing its own signature
//! words. Utterances are the gold signatures plus noise words borrowed from a few
//! distractor APIs; the noise rate controls how often distractors outrank the gold.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, ApiDoc, CorpusError, LabeledRequest, MAX_RELEVANT, MIN_RELEVANT};
use crate::embed::{HashingEmbedder, HASHING_DIMENSION};

const FILLER: [&str; 4] = ["service", "that", "returns", "data"];
const ONSETS: [&str; 15] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_tools: usize,
    pub apis_per_tool: usize,
    /// Number of candidate pseudo-words drawn before signature assignment.
    pub vocab_size: usize,
    pub n_requests: usize,
    /// Upper bound on relevant APIs per request; each request draws its count
    /// uniformly from `1..=relevant_per_request`.
    pub relevant_per_request: usize,
    /// Fraction of utterance words that are noise, in `[0, 1)`.
    pub utterance_noise_rate: f64,
    pub seed: u64,
    #[serde(default = "default_signature_len")]
    pub signature_len: usize,
    /// Expected noise words contributed by each distractor API.
    #[serde(default = "default_words_per_distractor")]
    pub noise_words_per_distractor: usize,
    /// Dimension of the hashing embedder the signatures are separated under.
    #[serde(default = "default_dimension")]
    pub dimension: usize,
}

fn default_signature_len() -> usize {
    3
}

fn default_words_per_distractor() -> usize {
    4
}

fn default_dimension() -> usize {
    HASHING_DIMENSION
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_tools: 64,
            apis_per_tool: 1,
            vocab_size: 4000,
            n_requests: 128,
            relevant_per_request: 2,
            utterance_noise_rate: 0.0,
            seed: 0,
            signature_len: default_signature_len(),
            noise_words_per_distractor: default_words_per_distractor(),
            dimension: default_dimension(),
        }
    }
}

impl SyntheticSpec {
    /// The desk-scale fixture used by the end-to-end checks.
    pub fn fixture(seed: u64) -> Self {
        Self {
            utterance_noise_rate: 0.85,
            seed,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), SpecError> {
        let bad = |m: &str| Err(SpecError::Invalid(m.to_string()));
        if self.n_tools == 0 || self.apis_per_tool == 0 {
            return bad("n_tools and apis_per_tool must be positive");
        }
        if !(MIN_RELEVANT..=MAX_RELEVANT).contains(&self.relevant_per_request) {
            return bad("relevant_per_request must be in 1..=3");
        }
        if self.relevant_per_request > self.n_tools * self.apis_per_tool {
            return bad("relevant_per_request exceeds the number of APIs");
        }
        if !(0.0..1.0).contains(&self.utterance_noise_rate) {
            return bad("utterance_noise_rate must be in [0, 1)");
        }
        if self.signature_len == 0 || self.signature_len + FILLER.len() > corpus::MAX_DESCRIPTION_WORDS {
            return bad("signature_len out of range");
        }
        if self.noise_words_per_distractor == 0 || self.dimension == 0 {
            return bad("noise_words_per_distractor and dimension must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SpecError {
    #[error("invalid synthetic spec: {0}")]
    Invalid(String),
    #[error("vocabulary too small: {needed} distinct signature words needed, {available} available")]
    VocabTooSmall { needed: usize, available: usize },
    #[error(transparent)]
    Io(#[from] CorpusError),
}

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.gen_range(2..=3);
    (0..syllables)
        .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap()))
        .collect()
}

/// Signature words, one per API, with pairwise distinct embedder buckets.
fn signatures(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<String>>, SpecError> {
    let embedder = HashingEmbedder::new(spec.dimension);
    let mut taken: Vec<bool> = vec![false; spec.dimension];
    for w in FILLER {
        taken[embedder.feature(w).0] = true;
    }
    let mut seen = BTreeSet::new();
    let mut per_bucket: Vec<String> = Vec::new();
    for _ in 0..spec.vocab_size {
        let w = pseudo_word(rng);
        if FILLER.contains(&w.as_str()) || !seen.insert(w.clone()) {
            continue;
        }
        let b = embedder.feature(&w).0;
        if !taken[b] {
            taken[b] = true;
            per_bucket.push(w);
        }
    }
    let n_apis = spec.n_tools * spec.apis_per_tool;
    let needed = n_apis * spec.signature_len;
    if per_bucket.len() < needed {
        return Err(SpecError::VocabTooSmall {
            needed,
            available: per_bucket.len(),
        });
    }
    per_bucket.shuffle(rng);
    Ok(per_bucket[..needed]
        .chunks(spec.signature_len)
        .map(|c| c.to_vec())
        .collect())
}

/// Generates `(apis, requests)`; identical specs give identical corpora.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Vec<ApiDoc>, Vec<LabeledRequest>), SpecError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sigs = signatures(spec, &mut rng)?;

    let mut docs = Vec::with_capacity(sigs.len());
    for t in 0..spec.n_tools {
        for a in 0..spec.apis_per_tool {
            let sig = &sigs[t * spec.apis_per_tool + a];
            let mut words: Vec<&str> = sig.iter().map(String::as_str).collect();
            words.extend(FILLER);
            docs.push(ApiDoc {
                api_id: format!("t{t:03}.a{a}"),
                tool_name: format!("tool_{t:03}"),
                api_name: format!("{}_{a}", sig[0]),
                description: words.join(" "),
            });
        }
    }

    let rho = spec.utterance_noise_rate;
    let all: Vec<usize> = (0..docs.len()).collect();
    let mut requests = Vec::with_capacity(spec.n_requests);
    for r in 0..spec.n_requests {
        let n = rng.gen_range(1..=spec.relevant_per_request);
        let gold: Vec<usize> = all.choose_multiple(&mut rng, n).copied().collect();
        let mut words: Vec<&str> = gold.iter().flat_map(|&g| sigs[g].iter().map(String::as_str)).collect();

        let signal = words.len() as f64;
        let noise = (signal * rho / (1.0 - rho)).round() as usize;
        if noise > 0 {
            let others: Vec<usize> = all.iter().copied().filter(|i| !gold.contains(i)).collect();
            let n_distractors = noise.div_ceil(spec.noise_words_per_distractor).min(others.len());
            let pool: Vec<&str> = others
                .choose_multiple(&mut rng, n_distractors)
                .flat_map(|&d| sigs[d].iter().map(String::as_str))
                .collect();
            if !pool.is_empty() {
                for _ in 0..noise {
                    words.push(pool.choose(&mut rng).unwrap());
                }
            }
        }
        words.shuffle(&mut rng);
        requests.push(LabeledRequest {
            request_id: format!("r{r:05}"),
            utterance: words.join(" "),
            relevant_api_ids: gold.iter().map(|&g| docs[g].api_id.clone()).collect(),
        });
    }
    Ok((docs, requests))
}

/// Generates and writes `apis.jsonl` / `requests.jsonl` into `dir`.
pub fn write_synthetic(spec: &SyntheticSpec, dir: &Path) -> Result<(Vec<ApiDoc>, Vec<LabeledRequest>), SpecError> {
    let (docs, reqs) = generate_synthetic(spec)?;
    corpus::write_corpus(dir, &docs, &reqs)?;
    Ok((docs, reqs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::preprocess;

    #[test]
    fn passes_preprocess_unchanged() {
        let (docs, reqs) = generate_synthetic(&SyntheticSpec::fixture(1)).unwrap();
        let (d2, r2, report) = preprocess(&docs, &reqs);
        assert_eq!((d2, r2), (docs, reqs));
        assert_eq!(report.docs_kept, report.docs_in);
        assert_eq!(report.requests_kept, report.requests_in);
    }

    #[test]
    fn signature_buckets_are_disjoint() {
        let spec = SyntheticSpec::fixture(3);
        let (docs, _) = generate_synthetic(&spec).unwrap();
        let e = HashingEmbedder::new(spec.dimension);
        let filler: BTreeSet<usize> = FILLER.iter().map(|w| e.feature(w).0).collect();
        let mut seen = BTreeSet::new();
        for d in &docs {
            for w in d.description.split_whitespace().take(spec.signature_len) {
                let b = e.feature(w).0;
                assert!(!filler.contains(&b));
                assert!(seen.insert(b), "bucket {b} reused");
            }
        }
    }

    #[test]
    fn deterministic() {
        let spec = SyntheticSpec::fixture(9);
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        let other = SyntheticSpec { seed: 10, ..spec };
        assert_ne!(generate_synthetic(&spec).unwrap().1, generate_synthetic(&other).unwrap().1);
    }

    #[test]
    fn too_many_apis_for_the_embedder() {
        let spec = SyntheticSpec {
            n_tools: 200,
            ..SyntheticSpec::default()
        };
        assert!(matches!(generate_synthetic(&spec), Err(SpecError::VocabTooSmall { .. })));
        let spec = SyntheticSpec {
            vocab_size: 20,
            ..SyntheticSpec::default()
        };
        assert!(matches!(generate_synthetic(&spec), Err(SpecError::VocabTooSmall { .. })));
    }

    #[test]
    fn noise_rate_shapes_utterance_length() {
        let spec = SyntheticSpec {
            relevant_per_request: 1,
            utterance_noise_rate: 0.75,
            ..SyntheticSpec::default()
        };
        let (_, reqs) = generate_synthetic(&spec).unwrap();
        for r in reqs {
            assert_eq!(r.utterance.split_whitespace().count(), 3 + 9);
        }
    }

    #[test]
    fn invalid_specs() {
        for spec in [
            SyntheticSpec {
                relevant_per_request: 4,
                ..Default::default()
            },
            SyntheticSpec {
                utterance_noise_rate: 1.0,
                ..Default::default()
            },
            SyntheticSpec {
                n_tools: 0,
                ..Default::default()
            },
        ] {
            assert!(matches!(generate_synthetic(&spec), Err(SpecError::Invalid(_))));
        }
    }
}
