mod common;

use std::sync::{Arc, Mutex};

use common::StubServer;
use serde_json::{json, Value};
use toolquery::align::{AlignError, HttpTrainer, HttpTrainerConfig, TrainerClient, TrainingHyperparams};
use toolquery::embed::{CachedEmbedder, EmbedError, EmbeddingProvider, HashingEmbedder, HttpEmbedder, HttpEmbedderConfig};
use toolquery::index::QuerySource;
use toolquery::querygen::{
    generate, GenError, HttpGenerator, HttpGeneratorConfig, PromptTemplate, SamplingParams, TemplateId,
};
use toolquery::remote::RetryPolicy;

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        max_attempts: 3,
        base_delay_ms: 1,
        timeout_ms: 5_000,
    }
}

fn embed_cfg(url: &str, batch_size: usize) -> HttpEmbedderConfig {
    HttpEmbedderConfig {
        endpoint: url.to_string(),
        model: "m".into(),
        dimension: 256,
        batch_size,
        retry: fast_retry(),
    }
}

fn always(status: u16, body: Value) -> StubServer {
    StubServer::start("/", Box::new(move |_, _, _| (status, body.clone())))
}

#[test]
fn remote_embeddings_match_local_and_are_batched() {
    let svc = common::embed_service();
    let remote = HttpEmbedder::new(embed_cfg(&svc.url, 2));
    let local = HashingEmbedder::new(256);
    let texts = ["get weather", "book a flight", "convert currency", "find recipes", "track parcel"];
    let got = remote.embed_batch(&texts).unwrap();
    let want = local.embed_batch(&texts).unwrap();
    for (g, w) in got.iter().zip(&want) {
        for (a, b) in g.values.iter().zip(&w.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    assert_eq!(remote.remote_calls(), 3);
    assert_eq!(svc.hits(), 3);
    assert_eq!(remote.provider_id(), "remote:m:256");
}

#[test]
fn embedding_cache_survives_reopen() {
    let svc = common::embed_service();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.jsonl");
    let texts = ["get weather", "book a flight"];
    let first = {
        let c = CachedEmbedder::open(HttpEmbedder::new(embed_cfg(&svc.url, 64)), &path).unwrap();
        let a = c.embed_batch(&texts).unwrap();
        let b = c.embed_batch(&texts).unwrap();
        assert_eq!(a, b);
        assert_eq!(c.inner().remote_calls(), 1);
        a
    };
    let c = CachedEmbedder::open(HttpEmbedder::new(embed_cfg(&svc.url, 64)), &path).unwrap();
    assert_eq!(c.embed_batch(&texts).unwrap(), first);
    assert_eq!(c.inner().remote_calls(), 0);
    assert_eq!(svc.hits(), 1);
}

#[test]
fn embedding_dimension_mismatch_is_reported() {
    let svc = always(200, json!({ "embeddings": [[1.0, 0.0, 0.0]] }));
    let e = HttpEmbedder::new(embed_cfg(&svc.url, 64));
    match e.embed_text("hello") {
        Err(EmbedError::DimensionMismatch { expected: 256, got: 3, .. }) => {}
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn embedding_server_errors_exhaust_retries() {
    let svc = always(503, json!({ "error": "busy" }));
    let e = HttpEmbedder::new(embed_cfg(&svc.url, 64));
    assert!(matches!(e.embed_text("hello"), Err(EmbedError::ProviderUnavailable(_))));
    assert_eq!(svc.hits(), 3);
}

fn generator(url: &str, params: SamplingParams) -> HttpGenerator {
    let mut cfg = HttpGeneratorConfig::new(url, "llm");
    cfg.retry = fast_retry();
    HttpGenerator::new(cfg, PromptTemplate::builtin(TemplateId::ToolDescription), params, QuerySource::ZeroShot)
}

#[test]
fn completion_request_carries_sampling_parameters() {
    let seen: Arc<Mutex<Vec<Value>>> = Arc::default();
    let log = seen.clone();
    let svc = StubServer::start(
        "/v1/completions",
        Box::new(move |_, _, body| {
            log.lock().unwrap().push(body.clone());
            let n = body["n"].as_u64().unwrap() as usize;
            let text = "Sure, I can help!\n1. Weather API: gets forecast\n2. Maps API: routing\nThese APIs should help.";
            (200, json!({ "choices": vec![json!({ "text": text }); n] }))
        }),
    );
    let g = generator(&svc.url, SamplingParams::default().with_temperature(1.3));
    let out = generate(&g, "plan my trip", 3).unwrap();
    assert_eq!(out.len(), 3);
    assert_eq!(out[2].draw_index, 2);
    assert_eq!(out[0].parsed_queries, ["Weather API: gets forecast", "Maps API: routing"]);
    let body = &seen.lock().unwrap()[0];
    assert_eq!(body["model"], "llm");
    assert_eq!(body["temperature"], 1.3);
    assert_eq!(body["top_p"], 0.9);
    assert_eq!(body["top_k"], 10);
    assert_eq!(body["n"], 3);
    assert_eq!(body["max_tokens"], 256);
    assert!(body["prompt"].as_str().unwrap().contains("\nHuman: plan my trip\n"));
}

#[test]
fn completion_5xx_three_times_is_unavailable() {
    let svc = always(502, json!({ "error": "bad gateway" }));
    let g = generator(&svc.url, SamplingParams::default());
    assert!(matches!(generate(&g, "hello", 1), Err(GenError::ServiceUnavailable(_))));
    assert_eq!(svc.hits(), 3);
}

#[test]
fn context_overflow_and_rejections_are_not_retried() {
    let svc = always(400, json!({ "error": "This model's maximum context length is 4096 tokens" }));
    let g = generator(&svc.url, SamplingParams::default());
    assert!(matches!(generate(&g, "hello", 1), Err(GenError::ContextOverflow(_))));
    assert_eq!(svc.hits(), 1);

    let svc = always(413, json!({ "error": "too large" }));
    let g = generator(&svc.url, SamplingParams::default());
    assert!(matches!(generate(&g, "hello", 1), Err(GenError::ContextOverflow(_))));

    let svc = always(401, json!({ "error": "bad key" }));
    let g = generator(&svc.url, SamplingParams::default());
    assert!(matches!(generate(&g, "hello", 1), Err(GenError::Rejected(_))));
    assert_eq!(svc.hits(), 1);
}

#[test]
fn wrong_completion_count_is_an_error() {
    let svc = always(200, json!({ "choices": [{ "text": "- a" }] }));
    let g = generator(&svc.url, SamplingParams::default());
    assert!(matches!(generate(&g, "hello", 2), Err(GenError::ServiceUnavailable(_))));
}

fn trainer(url: &str) -> HttpTrainer {
    HttpTrainer::new(HttpTrainerConfig {
        endpoint: url.to_string(),
        retry: fast_retry(),
        poll_interval_ms: 1,
        max_polls: 5,
    })
}

fn dataset() -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("sft.jsonl");
    std::fs::write(&p, "{}\n").unwrap();
    (dir, p)
}

#[test]
fn trainer_polls_until_done() {
    let polls = Arc::new(Mutex::new(0));
    let seen = polls.clone();
    let svc = StubServer::start(
        "/train",
        Box::new(move |method, url, body| {
            if method == "POST" {
                assert_eq!(body["base_model"], "base");
                assert_eq!(body["hyperparams"]["batch_size"], 32);
                return (200, json!({ "job_id": "j1", "status": "queued" }));
            }
            assert!(url.ends_with("/train/j1"));
            let mut n = seen.lock().unwrap();
            *n += 1;
            if *n < 2 {
                (200, json!({ "status": "running" }))
            } else {
                (200, json!({ "status": "succeeded", "model_ref": "ft-1" }))
            }
        }),
    );
    let (_d, p) = dataset();
    let got = trainer(&svc.url).train(&p, "base", &TrainingHyperparams::default()).unwrap();
    assert_eq!(got, "ft-1");
    assert_eq!(*polls.lock().unwrap(), 2);
}

#[test]
fn trainer_synchronous_reply_skips_polling() {
    let svc = always(200, json!({ "model_ref": "ft-now" }));
    let (_d, p) = dataset();
    assert_eq!(trainer(&svc.url).train(&p, "base", &TrainingHyperparams::default()).unwrap(), "ft-now");
    assert_eq!(svc.hits(), 1);
}

#[test]
fn trainer_failures() {
    let (_d, p) = dataset();
    let hp = TrainingHyperparams::default();
    let svc = always(200, json!({ "status": "failed", "error": "oom" }));
    assert!(matches!(trainer(&svc.url).train(&p, "b", &hp), Err(AlignError::TrainerFailure(_))));

    let svc = always(200, json!({ "job_id": "j", "status": "running" }));
    assert!(matches!(trainer(&svc.url).train(&p, "b", &hp), Err(AlignError::TrainerFailure(_))));

    // Nothing listens on port 1.
    assert!(matches!(
        trainer("http://127.0.0.1:1/train").train(&p, "b", &hp),
        Err(AlignError::TrainerFailure(_))
    ));
}
