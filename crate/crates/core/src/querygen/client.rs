//! Completion-service client.

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{CompletionRequest, GenError, PromptTemplate, QueryGenerator, SamplingParams};
use crate::index::QuerySource;
use crate::remote::{post_json, RemoteError, RetryPolicy};
use crate::util::Semaphore;

pub const LLM_ENDPOINT_ENV: &str = "TOOLQUERY_LLM_ENDPOINT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpGeneratorConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_in_flight() -> usize {
    8
}

impl HttpGeneratorConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            max_in_flight: default_in_flight(),
            retry: RetryPolicy::default(),
        }
    }

    /// Endpoint taken from `TOOLQUERY_LLM_ENDPOINT`.
    pub fn from_env(model: impl Into<String>) -> Option<Self> {
        std::env::var(LLM_ENDPOINT_ENV).ok().map(|e| Self::new(e, model))
    }
}

pub struct HttpGenerator {
    config: HttpGeneratorConfig,
    template: PromptTemplate,
    params: SamplingParams,
    source: QuerySource,
    in_flight: Semaphore,
}

impl HttpGenerator {
    pub fn new(
        config: HttpGeneratorConfig,
        template: PromptTemplate,
        params: SamplingParams,
        source: QuerySource,
    ) -> Self {
        Self {
            in_flight: Semaphore::new(config.max_in_flight.max(1)),
            config,
            template,
            params,
            source,
        }
    }
}

fn map_remote(e: RemoteError) -> GenError {
    match e {
        RemoteError::Unavailable { .. } | RemoteError::Decode(_) => GenError::ServiceUnavailable(e.to_string()),
        RemoteError::Rejected { status, ref body }
            if status == 413 || body.to_lowercase().contains("context") =>
        {
            GenError::ContextOverflow(e.to_string())
        }
        RemoteError::Rejected { .. } => GenError::Rejected(e.to_string()),
    }
}

impl QueryGenerator for HttpGenerator {
    fn generator_id(&self) -> &str {
        &self.config.model
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
        let p = request.params;
        let body = json!({
            "model": self.config.model,
            "prompt": request.prompt,
            "temperature": p.temperature,
            "top_p": p.top_p,
            "top_k": p.top_k,
            "n": request.n,
            "max_tokens": p.max_tokens,
        });
        let _permit = self.in_flight.acquire();
        let resp = post_json(&self.config.retry, &self.config.endpoint, &body).map_err(map_remote)?;
        let choices = resp
            .get("choices")
            .and_then(|c| c.as_array())
            .ok_or_else(|| GenError::ServiceUnavailable("response has no choices array".into()))?;
        choices
            .iter()
            .map(|c| {
                c.get("text")
                    .and_then(|t| t.as_str())
                    .map(str::to_string)
                    .ok_or_else(|| GenError::ServiceUnavailable("choice without text".into()))
            })
            .collect()
    }
}
