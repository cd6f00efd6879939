//! Deterministic mock generator with a tunable corruption rate.
//!
//! For a known utterance the mock "intends" to emit the gold descriptions of its
//! relevant APIs. Each token of that intended text is independently replaced, with
//! probability equal to the effective corruption rate, by a token drawn from the
//! utterance itself. The random stream depends only on `(seed, utterance, draw
//! index)`, never on the corruption rate, so lowering the rate corrupts a subset of
//! the positions corrupted at a higher rate (common random numbers). That is what
//! makes alignment-loop convergence checkable.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CompletionRequest, GenError, PromptTemplate, QueryGenerator, SamplingParams};
use crate::corpus::{doc_map, ApiDoc, LabeledRequest};
use crate::index::QuerySource;
use crate::util::derive_seed;

const MODEL_REF_PREFIX: &str = "mock:corruption=";

/// What the mock would say for each utterance if it made no mistakes.
#[derive(Debug, Clone, Default)]
pub struct MockWorld {
    intended: HashMap<String, Vec<String>>,
}

impl MockWorld {
    /// Maps each request's utterance to its relevant descriptions, in id order.
    pub fn from_corpus(docs: &[ApiDoc], requests: &[LabeledRequest]) -> Self {
        let by_id = doc_map(docs);
        let mut intended = HashMap::new();
        for r in requests {
            let lines: Vec<String> = r
                .relevant_api_ids
                .iter()
                .filter_map(|id| by_id.get(id.as_str()).map(|d| d.description.clone()))
                .collect();
            if !lines.is_empty() {
                intended.entry(r.utterance.clone()).or_insert(lines);
            }
        }
        Self { intended }
    }

    pub fn insert(&mut self, utterance: impl Into<String>, lines: Vec<String>) {
        self.intended.insert(utterance.into(), lines);
    }

    /// Intended lines; an unknown utterance is echoed back as its own query.
    pub fn intended(&self, utterance: &str) -> Vec<String> {
        self.intended
            .get(utterance)
            .cloned()
            .unwrap_or_else(|| vec![utterance.to_string()])
    }

    pub fn len(&self) -> usize {
        self.intended.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intended.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MockConfig {
    /// Probability that an intended token is replaced.
    pub corruption: f64,
    pub seed: u64,
    /// Temperature at which the mock is at its best; away from it the effective
    /// corruption grows by `temperature_sensitivity` per unit of distance.
    #[serde(default)]
    pub temperature_optimum: Option<f64>,
    #[serde(default)]
    pub temperature_sensitivity: f64,
    /// Wrap outputs in conversational lead-in and closing lines.
    #[serde(default)]
    pub chatty: bool,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            corruption: 0.0,
            seed: 0,
            temperature_optimum: None,
            temperature_sensitivity: 0.0,
            chatty: false,
        }
    }
}

impl MockConfig {
    pub fn effective_corruption(&self, temperature: f64) -> f64 {
        let c = match self.temperature_optimum {
            Some(t_star) => self.corruption + self.temperature_sensitivity * (temperature - t_star).abs(),
            None => self.corruption,
        };
        c.clamp(0.0, 1.0)
    }

    pub fn model_ref(&self) -> String {
        format!("{MODEL_REF_PREFIX}{}", self.corruption)
    }

    /// Applies a `mock:corruption=<rate>` model reference on top of `self`.
    pub fn with_model_ref(&self, model_ref: &str) -> Result<Self, GenError> {
        let corruption = model_ref
            .strip_prefix(MODEL_REF_PREFIX)
            .and_then(|v| v.parse::<f64>().ok())
            .filter(|c| (0.0..=1.0).contains(c))
            .ok_or_else(|| GenError::InvalidModelRef(model_ref.to_string()))?;
        Ok(Self { corruption, ..*self })
    }
}

pub fn is_mock_model_ref(model_ref: &str) -> bool {
    model_ref.starts_with(MODEL_REF_PREFIX)
}

pub struct MockGenerator {
    world: Arc<MockWorld>,
    config: MockConfig,
    template: PromptTemplate,
    params: SamplingParams,
    source: QuerySource,
    id: String,
    calls: AtomicUsize,
}

impl MockGenerator {
    pub fn new(
        world: Arc<MockWorld>,
        config: MockConfig,
        template: PromptTemplate,
        params: SamplingParams,
        source: QuerySource,
    ) -> Self {
        Self {
            id: config.model_ref(),
            world,
            config,
            template,
            params,
            source,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn config(&self) -> &MockConfig {
        &self.config
    }

    /// Number of `complete` calls served.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    /// One completion; deterministic in `(seed, utterance, draw_index)`.
    pub fn draw(&self, utterance: &str, draw_index: usize, temperature: f64) -> String {
        let draw_index = if temperature == 0.0 { 0 } else { draw_index };
        let c = self.config.effective_corruption(temperature);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
            &self.config.seed.to_le_bytes(),
            utterance.as_bytes(),
            &(draw_index as u64).to_le_bytes(),
        ]));
        let pool: Vec<&str> = utterance.split_whitespace().collect();
        let mut out = String::new();
        if self.config.chatty {
            out.push_str("Sure, I can help with that! Here are the APIs:\n");
        }
        for line in self.world.intended(utterance) {
            let words: Vec<&str> = line
                .split_whitespace()
                .map(|w| {
                    // Both draws happen regardless of the outcome so the stream stays
                    // aligned across corruption rates.
                    let u: f64 = rng.gen();
                    let pick = rng.gen_range(0..pool.len().max(1));
                    if u < c && !pool.is_empty() {
                        pool[pick]
                    } else {
                        w
                    }
                })
                .collect();
            out.push_str("- ");
            out.push_str(&words.join(" "));
            out.push('\n');
        }
        if self.config.chatty {
            out.push_str("These APIs should cover the request.\n");
        }
        out
    }
}

impl QueryGenerator for MockGenerator {
    fn generator_id(&self) -> &str {
        &self.id
    }

    fn template(&self) -> &PromptTemplate {
        &self.template
    }

    fn params(&self) -> &SamplingParams {
        &self.params
    }

    fn source(&self) -> QuerySource {
        self.source
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<Vec<String>, GenError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        Ok((0..request.n)
            .map(|i| self.draw(request.utterance, i, request.params.temperature))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::querygen::{generate, TemplateId};

    fn world() -> Arc<MockWorld> {
        let mut w = MockWorld::default();
        w.insert(
            "find me a weather forecast and a route",
            vec![
                "weather forecast service for cities".into(),
                "maps routing service between places".into(),
            ],
        );
        Arc::new(w)
    }

    fn mock(corruption: f64, temperature: f64) -> MockGenerator {
        MockGenerator::new(
            world(),
            MockConfig {
                corruption,
                seed: 7,
                ..Default::default()
            },
            PromptTemplate::builtin(TemplateId::ToolDescription),
            SamplingParams::default().with_temperature(temperature),
            QuerySource::Mock,
        )
    }

    const U: &str = "find me a weather forecast and a route";

    #[test]
    fn zero_corruption_emits_intended_lines() {
        let r = generate(&mock(0.0, 1.0), U, 1).unwrap();
        assert_eq!(
            r[0].parsed_queries,
            ["weather forecast service for cities", "maps routing service between places"]
        );
    }

    #[test]
    fn drafts_are_deterministic_and_distinct() {
        let g = mock(0.5, 1.0);
        let a = generate(&g, U, 3).unwrap();
        let b = generate(&g, U, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].raw_text, a[1].raw_text);
        assert_ne!(a[1].raw_text, a[2].raw_text);
        assert_eq!(g.calls(), 2);
    }

    #[test]
    fn greedy_drafts_are_identical() {
        let a = generate(&mock(0.5, 0.0), U, 4).unwrap();
        assert!(a.iter().all(|r| r.raw_text == a[0].raw_text));
    }

    #[test]
    fn lower_corruption_corrupts_a_subset() {
        let intended: Vec<String> = world()
            .intended(U)
            .join(" ")
            .split_whitespace()
            .map(str::to_string)
            .collect();
        let tokens = |c: f64, i: usize| -> Vec<String> {
            mock(c, 1.0)
                .draw(U, i, 1.0)
                .lines()
                .flat_map(|l| l.trim_start_matches("- ").split_whitespace().map(str::to_string).collect::<Vec<_>>())
                .collect()
        };
        for i in 0..20 {
            let hi = tokens(0.7, i);
            let lo = tokens(0.3, i);
            for p in 0..intended.len() {
                if lo[p] != intended[p] {
                    assert_eq!(lo[p], hi[p]);
                }
            }
        }
    }

    #[test]
    fn unknown_utterance_echoes() {
        let r = generate(&mock(0.0, 1.0), "something else", 1).unwrap();
        assert_eq!(r[0].parsed_queries, ["something else"]);
    }

    #[test]
    fn chatty_output_is_cleaned_by_parser() {
        let g = MockGenerator::new(
            world(),
            MockConfig {
                chatty: true,
                ..Default::default()
            },
            PromptTemplate::builtin(TemplateId::ToolDescription),
            SamplingParams::default(),
            QuerySource::Mock,
        );
        let r = generate(&g, U, 1).unwrap();
        assert_eq!(r[0].parsed_queries.len(), 2);
        assert!(r[0].raw_text.starts_with("Sure"));
    }

    #[test]
    fn temperature_optimum_shapes_corruption() {
        let cfg = MockConfig {
            corruption: 0.1,
            temperature_optimum: Some(0.8),
            temperature_sensitivity: 0.5,
            ..Default::default()
        };
        assert!((cfg.effective_corruption(0.8) - 0.1).abs() < 1e-12);
        assert!((cfg.effective_corruption(0.0) - 0.5).abs() < 1e-12);
        assert_eq!(cfg.effective_corruption(10.0), 1.0);
    }

    #[test]
    fn model_ref_round_trip() {
        let cfg = MockConfig {
            corruption: 0.35,
            seed: 3,
            ..Default::default()
        };
        let back = MockConfig::default().with_model_ref(&cfg.model_ref()).unwrap();
        assert_eq!(back.corruption, 0.35);
        assert!(MockConfig::default().with_model_ref("mock:corruption=1.5").is_err());
        assert!(MockConfig::default().with_model_ref("llama").is_err());
    }
}
