#![allow(dead_code)]

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde_json::{json, Value};
use toolquery::embed::{EmbeddingProvider, HashingEmbedder, HASHING_DIMENSION};
use toolquery::harness::RunConfig;
use toolquery::synthetic::{write_synthetic, SyntheticSpec};

pub type Handler = dyn Fn(&str, &str, Value) -> (u16, Value) + Send + Sync;

/// Minimal JSON service on an ephemeral localhost port.
pub struct StubServer {
    pub url: String,
    hits: Arc<AtomicUsize>,
    server: Arc<tiny_http::Server>,
    thread: Option<JoinHandle<()>>,
}

impl StubServer {
    pub fn start(path: &str, handler: Box<Handler>) -> Self {
        let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").expect("bind stub server"));
        let port = server.server_addr().to_ip().unwrap().port();
        let hits = Arc::new(AtomicUsize::new(0));
        let (s, h) = (server.clone(), hits.clone());
        let thread = std::thread::spawn(move || {
            for mut req in s.incoming_requests() {
                h.fetch_add(1, Ordering::SeqCst);
                let mut body = String::new();
                let _ = req.as_reader().read_to_string(&mut body);
                let value = serde_json::from_str(&body).unwrap_or(Value::Null);
                let method = req.method().as_str().to_string();
                let (status, out) = handler(&method, req.url(), value);
                let resp = tiny_http::Response::from_string(out.to_string())
                    .with_status_code(status)
                    .with_header("Content-Type: application/json".parse::<tiny_http::Header>().unwrap());
                let _ = req.respond(resp);
            }
        });
        Self {
            url: format!("http://127.0.0.1:{port}{path}"),
            hits,
            server,
            thread: Some(thread),
        }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Embedding service backed by the hashing embedder.
pub fn embed_service() -> StubServer {
    let e = HashingEmbedder::new(HASHING_DIMENSION);
    StubServer::start(
        "/embed",
        Box::new(move |_, _, body| {
            let inputs: Vec<String> = serde_json::from_value(body["inputs"].clone()).unwrap_or_default();
            let refs: Vec<&str> = inputs.iter().map(String::as_str).collect();
            match e.embed_batch(&refs) {
                Ok(v) => (200, json!({ "embeddings": v.into_iter().map(|x| x.values).collect::<Vec<_>>() })),
                Err(err) => (400, json!({ "error": err.to_string() })),
            }
        }),
    )
}

/// The utterance of a rendered prompt.
pub fn utterance_of(prompt: &str) -> Option<&str> {
    prompt.lines().rev().find_map(|l| l.strip_prefix("Human: "))
}

/// Completion service answering with `answers[utterance]` (or an echo) as a
/// bulleted list, `n` identical choices per call.
pub fn llm_service(answers: HashMap<String, Vec<String>>) -> StubServer {
    StubServer::start(
        "/v1/completions",
        Box::new(move |_, _, body| {
            let prompt = body["prompt"].as_str().unwrap_or("");
            let n = body["n"].as_u64().unwrap_or(1) as usize;
            let u = utterance_of(prompt).unwrap_or("");
            let lines = answers.get(u).cloned().unwrap_or_else(|| vec![u.to_string()]);
            let text: String = lines.iter().map(|l| format!("- {l}\n")).collect();
            (200, json!({ "choices": vec![json!({ "text": text }); n] }))
        }),
    )
}

/// Trainer that accepts every job and reports it finished on the first poll.
pub fn trainer_service() -> StubServer {
    let jobs = Arc::new(AtomicUsize::new(0));
    StubServer::start(
        "/train",
        Box::new(move |method, url, body| {
            if method == "POST" {
                if !body["dataset_uri"].as_str().is_some_and(|p| Path::new(p).exists()) {
                    return (400, json!({ "error": "dataset not found" }));
                }
                let id = jobs.fetch_add(1, Ordering::SeqCst);
                (200, json!({ "job_id": format!("job-{id}"), "status": "queued" }))
            } else {
                let id = url.rsplit('/').next().unwrap_or("");
                (200, json!({ "status": "succeeded", "model_ref": format!("ft-{id}") }))
            }
        }),
    )
}

/// Writes the synthetic fixture corpus for `seed` under `root/corpus` and returns
/// the matching offline run config rooted at `root/run`.
pub fn fixture_config(root: &Path, seed: u64) -> RunConfig {
    let corpus = root.join("corpus");
    write_synthetic(&SyntheticSpec::fixture(seed), &corpus).expect("fixture corpus");
    RunConfig::fixture(corpus, root.join("run"), seed)
}
