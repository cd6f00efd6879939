//! Query generation: prompt templates, sampling parameters, the generator interface
//! and output parsing.
//!
//! Zero-shot, fine-tuned and aligned generators all implement [`QueryGenerator`];
//! they differ only in the model behind them and their default temperature.

mod client;
mod mock;
mod parser;

pub use client::{HttpGenerator, HttpGeneratorConfig, LLM_ENDPOINT_ENV};
pub use mock::{is_mock_model_ref, MockConfig, MockGenerator, MockWorld};
pub use parser::{parse_generation, EmptyGeneration, ParseNote};

use serde::{Deserialize, Serialize};

use crate::index::QuerySource;

pub const PLACEHOLDER: &str = "<user request>";

const TOOL_DESCRIPTION_TEXT: &str = include_str!("../../templates/tool_description.txt");
const INTENT_TEXT: &str = include_str!("../../templates/intent.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    #[default]
    ToolDescription,
    Intent,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub template_id: TemplateId,
    text: String,
}

impl PromptTemplate {
    pub fn builtin(id: TemplateId) -> Self {
        let text = match id {
            TemplateId::ToolDescription => TOOL_DESCRIPTION_TEXT,
            TemplateId::Intent => INTENT_TEXT,
        };
        Self {
            template_id: id,
            text: text.to_string(),
        }
    }

    /// A custom template; it must contain the placeholder exactly once and end with
    /// `Answer:`.
    pub fn custom(template_id: TemplateId, text: String) -> Result<Self, GenError> {
        if text.matches(PLACEHOLDER).count() != 1 {
            return Err(GenError::InvalidTemplate(format!(
                "expected exactly one {PLACEHOLDER} placeholder"
            )));
        }
        if !text.ends_with("Answer:") {
            return Err(GenError::InvalidTemplate("template must end with \"Answer:\"".into()));
        }
        Ok(Self { template_id, text })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Substitutes the utterance verbatim for the placeholder.
    pub fn render(&self, utterance: &str) -> Result<String, GenError> {
        if utterance.trim().is_empty() {
            return Err(GenError::EmptyText);
        }
        Ok(self.text.replacen(PLACEHOLDER, utterance, 1))
    }
}

/// Which kind of generator a configuration describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorMode {
    ZeroShot,
    Sft,
    Aligned,
}

impl GeneratorMode {
    /// Calibrated evaluation temperatures.
    pub fn default_temperature(self) -> f64 {
        match self {
            Self::ZeroShot => 1.3,
            Self::Sft => 0.6,
            Self::Aligned => 0.1,
        }
    }

    pub fn source(self) -> QuerySource {
        match self {
            Self::ZeroShot => QuerySource::ZeroShot,
            Self::Sft => QuerySource::Sft,
            Self::Aligned => QuerySource::Aligned,
        }
    }
}

/// Temperature used to sample alignment drafts.
pub const DRAFT_TEMPERATURE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: u32,
    pub n_samples: u32,
    pub max_tokens: u32,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 0.9,
            top_k: 10,
            n_samples: 1,
            max_tokens: 256,
        }
    }
}

impl SamplingParams {
    pub fn with_temperature(self, temperature: f64) -> Self {
        Self {
            temperature,
            ..self
        }
    }

    pub fn validate(&self) -> Result<(), GenError> {
        let ok = self.temperature >= 0.0
            && self.temperature.is_finite()
            && self.top_p > 0.0
            && self.top_p <= 1.0
            && self.top_k >= 1
            && self.n_samples >= 1
            && self.max_tokens >= 1;
        if ok {
            Ok(())
        } else {
            Err(GenError::InvalidParams(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub draw_index: usize,
    pub raw_text: String,
    pub parsed_queries: Vec<String>,
    pub parse_notes: Vec<ParseNote>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GenError {
    #[error("utterance is empty")]
    EmptyText,
    #[error("completion service unavailable: {0}")]
    ServiceUnavailable(String),
    #[error("prompt exceeds the service context limit: {0}")]
    ContextOverflow(String),
    #[error("completion request rejected: {0}")]
    Rejected(String),
    #[error("invalid sampling parameters: {0}")]
    InvalidParams(String),
    #[error("invalid prompt template: {0}")]
    InvalidTemplate(String),
    #[error("invalid model reference {0:?}")]
    InvalidModelRef(String),
}

/// One completion request handed to a generator backend.
#[derive(Debug, Clone, Copy)]
pub struct CompletionRequest<'a> {
    pub utterance: &'a str,
    pub prompt: &'a str,
    pub params: &'a SamplingParams,
    pub n: usize,
}

pub trait QueryGenerator: Send + Sync {
    fn generator_id(&self) -> &str;

    fn template(&self) -> &PromptTemplate;

    fn params(&self) -> &SamplingParams;

    fn source(&self) -> QuerySource;

    /// Returns `request.n` raw completions.
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<Vec<String>, GenError>;
}

/// Samples `n_samples` generations for `utterance` and parses each.
///
/// A generation that parses to nothing is returned with no queries and an
/// [`ParseNote::EmptyAfterParse`] note rather than as an error.
pub fn generate(
    generator: &dyn QueryGenerator,
    utterance: &str,
    n_samples: usize,
) -> Result<Vec<GenerationResult>, GenError> {
    let params = SamplingParams {
        n_samples: n_samples.max(1) as u32,
        ..*generator.params()
    };
    params.validate()?;
    let prompt = generator.template().render(utterance)?;
    let raws = generator.complete(&CompletionRequest {
        utterance,
        prompt: &prompt,
        params: &params,
        n: n_samples.max(1),
    })?;
    if raws.len() != n_samples.max(1) {
        return Err(GenError::ServiceUnavailable(format!(
            "expected {} completions, got {}",
            n_samples.max(1),
            raws.len()
        )));
    }
    Ok(raws
        .into_iter()
        .enumerate()
        .map(|(draw_index, raw_text)| {
            let (parsed_queries, parse_notes) = match parse_generation(&raw_text) {
                Ok(p) => p,
                Err(EmptyGeneration) => (Vec::new(), vec![ParseNote::EmptyAfterParse]),
            };
            GenerationResult {
                draw_index,
                raw_text,
                parsed_queries,
                parse_notes,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tool_description_prompt() {
        let t = PromptTemplate::builtin(TemplateId::ToolDescription);
        let p = t.render("book a cab").unwrap();
        assert!(p.contains("\nHuman: book a cab\n"));
        assert!(p.ends_with("Answer:"));
        assert!(p.starts_with("Given a request by user (Human), generate the description of an API(s)"));
        assert!(p.contains("Return at most 5 descriptions (lines)."));
        assert_eq!(p, t.render("book a cab").unwrap());
    }

    #[test]
    fn intent_prompt_is_distinct() {
        let p = PromptTemplate::builtin(TemplateId::Intent).render("plan a party").unwrap();
        assert!(p.contains("just describe the intents"));
        assert!(p.contains("return just a set of intents."));
        assert!(p.ends_with("Human: plan a party\nAnswer:"));
    }

    #[test]
    fn utterance_is_embedded_verbatim() {
        let u = "first line\nsecond <line>\n";
        let p = PromptTemplate::builtin(TemplateId::ToolDescription).render(u).unwrap();
        assert!(p.contains(&format!("Human: {u}\nAnswer:")));
        assert_eq!(
            PromptTemplate::builtin(TemplateId::ToolDescription).render("  "),
            Err(GenError::EmptyText)
        );
    }

    #[test]
    fn custom_template_validation() {
        assert!(PromptTemplate::custom(TemplateId::Intent, "no placeholder Answer:".into()).is_err());
        assert!(PromptTemplate::custom(TemplateId::Intent, "<user request>".into()).is_err());
        assert!(PromptTemplate::custom(TemplateId::Intent, "Q: <user request>\nAnswer:".into()).is_ok());
    }

    #[test]
    fn defaults() {
        let p = SamplingParams::default();
        assert_eq!((p.top_p, p.top_k, p.max_tokens), (0.9, 10, 256));
        assert_eq!(GeneratorMode::ZeroShot.default_temperature(), 1.3);
        assert_eq!(GeneratorMode::Sft.default_temperature(), 0.6);
        assert_eq!(GeneratorMode::Aligned.default_temperature(), 0.1);
        assert!(p.with_temperature(-0.1).validate().is_err());
    }
}
