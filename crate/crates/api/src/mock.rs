//! Offline OpenAI-compatible API server for tests and dry runs.
//!
//! Behaviour is driven by a declarative [`Script`] (JSON):
//!
//! ```json
//! {
//!   "path_prefix": "/v1",
//!   "faults": { "create_fine_tune": [ {"status": 500, "commit": true}, {"status": 500}, {"status": 200} ] },
//!   "job_statuses": ["pending", "running", "succeeded"],
//!   "failure_reason": null,
//!   "completions": [" Pros:\n- light\nCons:\nVerdict: Fine.\nEND"],
//!   "models": ["curie"],
//!   "classify": { "default": [-0.105360516, -2.995732274, -2.995732274], "rules": [ {"contains": "hate", "logprobs": [-2.302585093, -2.302585093, -0.223143551]} ] },
//!   "embedding_dim": 8
//! }
//! ```
//!
//! Endpoint keys for `faults` are `upload`, `create_fine_tune`,
//! `get_fine_tune`, `completions`, `classify` and `embeddings`. Each fault
//! entry is consumed by one request, in order. A 2xx entry without a body
//! falls through to the normal handler after its delay. With `commit` set,
//! the normal side effect happens before the fault is returned, which models
//! a response lost after the server acted on the request.
//!
//! Requests carrying an `Idempotency-Key` header are answered from a cache
//! when the key was already processed for that endpoint.
//!
//! Classifier log-probabilities must describe a distribution (their
//! exponentials sum to 1); clients reject anything else.

use std::collections::{BTreeMap, HashMap};
use std::net::{SocketAddr, TcpListener};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use axum::body::to_bytes;
use axum::extract::{Request, State};
use axum::http::{Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Router;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::sync::oneshot;

use crate::http::{now_ms, IDEMPOTENCY_HEADER};

#[derive(Debug, Error)]
pub enum MockError {
    #[error("cannot bind port {port}: {source}")]
    Bind {
        port: u16,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid script: {0}")]
    Script(String),
    #[error("mock server runtime: {0}")]
    Runtime(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResponseSpec {
    pub status: u16,
    pub body: Option<Value>,
    pub delay_ms: u64,
    pub commit: bool,
}

impl Default for ResponseSpec {
    fn default() -> Self {
        Self { status: 200, body: None, delay_ms: 0, commit: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyRule {
    pub contains: String,
    pub logprobs: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifyScript {
    pub default: [f64; 3],
    pub rules: Vec<ClassifyRule>,
}

impl Default for ClassifyScript {
    fn default() -> Self {
        let u = (1.0f64 / 3.0).ln();
        Self { default: [u, u, u], rules: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Script {
    pub path_prefix: String,
    pub faults: BTreeMap<String, Vec<ResponseSpec>>,
    /// Status sequence of every job: the first is reported on creation, each
    /// poll advances one step and the last one sticks.
    pub job_statuses: Vec<String>,
    pub failure_reason: Option<String>,
    /// Canned completion texts; one is chosen by a hash of the prompt.
    pub completions: Vec<String>,
    /// Models that accept completions besides those fine-tuned here.
    pub models: Vec<String>,
    pub classify: ClassifyScript,
    pub embedding_dim: usize,
}

impl Default for Script {
    fn default() -> Self {
        Self {
            path_prefix: "/v1".into(),
            faults: BTreeMap::new(),
            job_statuses: vec!["pending".into(), "running".into(), "succeeded".into()],
            failure_reason: None,
            completions: vec![" Pros:\n- works as described\nCons:\nVerdict: Acceptable.\nEND".into()],
            models: Vec::new(),
            classify: ClassifyScript::default(),
            embedding_dim: 8,
        }
    }
}

const ENDPOINTS: [&str; 6] = ["upload", "create_fine_tune", "get_fine_tune", "completions", "classify", "embeddings"];

impl Script {
    pub fn load(path: &Path) -> Result<Self, MockError> {
        let text = std::fs::read_to_string(path)?;
        let script: Script = serde_json::from_str(&text).map_err(|e| MockError::Script(e.to_string()))?;
        script.validate()?;
        Ok(script)
    }

    pub fn validate(&self) -> Result<(), MockError> {
        if let Some(k) = self.faults.keys().find(|k| !ENDPOINTS.contains(&k.as_str())) {
            return Err(MockError::Script(format!("unknown endpoint key {k:?}")));
        }
        if self.job_statuses.is_empty() {
            return Err(MockError::Script("job_statuses is empty".into()));
        }
        let known = ["pending", "running", "succeeded", "failed", "cancelled"];
        if let Some(s) = self.job_statuses.iter().find(|s| !known.contains(&s.as_str())) {
            return Err(MockError::Script(format!("unknown job status {s:?}")));
        }
        if self.completions.is_empty() {
            return Err(MockError::Script("completions is empty".into()));
        }
        if self.embedding_dim == 0 {
            return Err(MockError::Script("embedding_dim must be positive".into()));
        }
        Ok(())
    }
}

/// A request as received, body bytes untouched.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapturedRequest {
    pub seq: usize,
    pub method: String,
    pub path: String,
    pub headers: BTreeMap<String, String>,
    pub body: Vec<u8>,
    pub received_ms: u64,
}

impl CapturedRequest {
    pub fn body_text(&self) -> String {
        String::from_utf8_lossy(&self.body).into_owned()
    }

    pub fn json(&self) -> Option<Value> {
        serde_json::from_slice(&self.body).ok()
    }
}

#[derive(Debug, Clone)]
struct Job {
    id: String,
    training_file: String,
    model: String,
    hyperparams: Value,
    polls: usize,
    created_s: u64,
    fine_tuned_model: String,
}

#[derive(Default)]
struct Inner {
    faults: HashMap<String, Vec<ResponseSpec>>,
    files: Vec<String>,
    jobs: Vec<Job>,
    models: Vec<String>,
    completions_served: usize,
    idempotent: HashMap<(String, String), (u16, Value)>,
}

struct MockState {
    script: Script,
    inner: Mutex<Inner>,
    captured: Mutex<Vec<CapturedRequest>>,
}

fn error_body(message: &str) -> Value {
    json!({ "error": { "message": message, "type": "mock_error" } })
}

fn status_label(script: &Script, polls: usize) -> &str {
    &script.job_statuses[polls.min(script.job_statuses.len() - 1)]
}

impl MockState {
    fn job_json(&self, job: &Job) -> Value {
        let status = status_label(&self.script, job.polls);
        let mut v = json!({
            "id": job.id,
            "object": "fine-tune",
            "model": job.model,
            "training_file": job.training_file,
            "created_at": job.created_s,
            "status": status,
            "hyperparams": job.hyperparams,
            "fine_tuned_model": Value::Null,
            "events": self.script.job_statuses[..=job.polls.min(self.script.job_statuses.len() - 1)]
                .iter()
                .map(|s| json!({ "object": "fine-tune-event", "created_at": job.created_s, "message": s }))
                .collect::<Vec<_>>(),
        });
        if status == "succeeded" {
            v["fine_tuned_model"] = json!(job.fine_tuned_model);
        }
        if status == "failed" {
            v["failure_reason"] = json!(self.script.failure_reason.clone().unwrap_or_else(|| "job failed".into()));
        }
        v
    }

    /// The normal (fault-free) behaviour of each endpoint.
    fn handle(&self, endpoint: &str, path_rest: &str, body: &[u8]) -> (u16, Value) {
        let mut inner = self.inner.lock().unwrap();
        let parsed: Option<Value> = serde_json::from_slice(body).ok();
        match endpoint {
            "upload" => {
                let id = format!("file-{:04}", inner.files.len() + 1);
                inner.files.push(id.clone());
                let text = String::from_utf8_lossy(body);
                let filename = text
                    .split("filename=\"")
                    .nth(1)
                    .and_then(|s| s.split('"').next())
                    .unwrap_or("upload.jsonl")
                    .to_owned();
                (
                    200,
                    json!({ "id": id, "object": "file", "bytes": body.len(), "purpose": "fine-tune", "filename": filename }),
                )
            }
            "create_fine_tune" => {
                let Some(req) = parsed else { return (400, error_body("body is not JSON")) };
                let Some(file) = req.get("training_file").and_then(Value::as_str) else {
                    return (400, error_body("training_file is required"));
                };
                if !inner.files.iter().any(|f| f == file) {
                    return (404, error_body(&format!("No such File object: {file}")));
                }
                let n = inner.jobs.len() + 1;
                let model = req.get("model").and_then(Value::as_str).unwrap_or("curie").to_owned();
                let mut hyperparams = serde_json::Map::new();
                for key in ["batch_size", "n_epochs", "learning_rate_multiplier", "use_padding"] {
                    if let Some(v) = req.get(key) {
                        hyperparams.insert(key.into(), v.clone());
                    }
                }
                let job = Job {
                    id: format!("ft-{n:04}"),
                    training_file: file.to_owned(),
                    fine_tuned_model: format!("{model}:ft-mock-{n:04}"),
                    model,
                    hyperparams: Value::Object(hyperparams),
                    polls: 0,
                    created_s: now_ms() / 1000,
                };
                inner.jobs.push(job.clone());
                drop(inner);
                (200, self.job_json(&job))
            }
            "get_fine_tune" => {
                let Some(job) = inner.jobs.iter_mut().find(|j| j.id == path_rest) else {
                    return (404, error_body(&format!("No such fine-tune: {path_rest}")));
                };
                job.polls += 1;
                let job = job.clone();
                if status_label(&self.script, job.polls) == "succeeded" && !inner.models.contains(&job.fine_tuned_model)
                {
                    inner.models.push(job.fine_tuned_model.clone());
                }
                drop(inner);
                (200, self.job_json(&job))
            }
            "completions" => {
                let Some(req) = parsed else { return (400, error_body("body is not JSON")) };
                let model = req.get("model").and_then(Value::as_str).unwrap_or_default();
                if !self.script.models.iter().any(|m| m == model) && !inner.models.iter().any(|m| m == model) {
                    return (404, error_body(&format!("The model `{model}` does not exist")));
                }
                let prompt = req.get("prompt").and_then(Value::as_str).unwrap_or_default();
                let digest = Sha256::digest(prompt.as_bytes());
                let pick = u64::from_le_bytes(digest[..8].try_into().unwrap()) as usize % self.script.completions.len();
                inner.completions_served += 1;
                let id = format!("cmpl-{:04}", inner.completions_served);
                (
                    200,
                    json!({
                        "id": id,
                        "object": "text_completion",
                        "model": model,
                        "choices": [{ "text": self.script.completions[pick], "index": 0, "finish_reason": "stop" }],
                    }),
                )
            }
            "classify" => {
                let text = parsed
                    .as_ref()
                    .and_then(|v| v.get("text"))
                    .and_then(Value::as_str)
                    .unwrap_or_default()
                    .to_lowercase();
                let lps = self
                    .script
                    .classify
                    .rules
                    .iter()
                    .find(|r| text.contains(&r.contains.to_lowercase()))
                    .map_or(self.script.classify.default, |r| r.logprobs);
                (200, json!({ "logprobs": lps }))
            }
            "embeddings" => {
                let inputs: Vec<String> = match parsed.as_ref().and_then(|v| v.get("input")) {
                    Some(Value::String(s)) => vec![s.clone()],
                    Some(Value::Array(a)) => a.iter().filter_map(Value::as_str).map(str::to_owned).collect(),
                    _ => return (400, error_body("input is required")),
                };
                let data: Vec<Value> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| json!({ "object": "embedding", "index": i, "embedding": mock_vector(t, self.script.embedding_dim) }))
                    .collect();
                (200, json!({ "object": "list", "data": data }))
            }
            _ => (404, error_body("unknown endpoint")),
        }
    }
}

/// Deterministic vector for a token, derived from its SHA-256 digest.
pub fn mock_vector(token: &str, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let d = Sha256::new().chain_update(token.as_bytes()).chain_update((i as u32).to_le_bytes()).finalize();
            let v = u32::from_le_bytes(d[..4].try_into().unwrap());
            v as f64 / u32::MAX as f64 * 2.0 - 1.0
        })
        .collect()
}

fn route(prefix: &str, method: &Method, path: &str) -> Option<(&'static str, String)> {
    let rest = path.strip_prefix(prefix.trim_end_matches('/'))?;
    let ep = match (method, rest) {
        (&Method::POST, "/files") => "upload",
        (&Method::POST, "/fine-tunes") => "create_fine_tune",
        (&Method::GET, r) if r.starts_with("/fine-tunes/") => {
            return Some(("get_fine_tune", r["/fine-tunes/".len()..].to_owned()))
        }
        (&Method::POST, "/completions") => "completions",
        (&Method::POST, "/classify") => "classify",
        (&Method::POST, "/embeddings") => "embeddings",
        _ => return None,
    };
    Some((ep, String::new()))
}

fn reply(status: u16, body: Value) -> Response {
    let code = StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (code, [("content-type", "application/json")], body.to_string()).into_response()
}

async fn dispatch(State(state): State<Arc<MockState>>, req: Request) -> Response {
    let (parts, body) = req.into_parts();
    let bytes = match to_bytes(body, 64 * 1024 * 1024).await {
        Ok(b) => b.to_vec(),
        Err(e) => return reply(400, error_body(&e.to_string())),
    };
    let headers: BTreeMap<String, String> = parts
        .headers
        .iter()
        .map(|(k, v)| (k.as_str().to_owned(), String::from_utf8_lossy(v.as_bytes()).into_owned()))
        .collect();
    let idem_key = parts.headers.get(IDEMPOTENCY_HEADER).and_then(|v| v.to_str().ok()).map(str::to_owned);
    {
        let mut cap = state.captured.lock().unwrap();
        let seq = cap.len();
        cap.push(CapturedRequest {
            seq,
            method: parts.method.to_string(),
            path: parts.uri.path().to_owned(),
            headers,
            body: bytes.clone(),
            received_ms: now_ms(),
        });
    }

    let Some((endpoint, rest)) = route(&state.script.path_prefix, &parts.method, parts.uri.path()) else {
        return reply(404, error_body(&format!("no route for {} {}", parts.method, parts.uri.path())));
    };

    let fault = {
        let mut inner = state.inner.lock().unwrap();
        let queue = inner.faults.entry(endpoint.to_owned()).or_default();
        (!queue.is_empty()).then(|| queue.remove(0))
    };
    if let Some(spec) = &fault {
        if spec.delay_ms > 0 {
            tokio::time::sleep(Duration::from_millis(spec.delay_ms)).await;
        }
    }

    let normal = |state: &MockState| -> (u16, Value) {
        if let Some(key) = &idem_key {
            let cache_key = (endpoint.to_owned(), key.clone());
            if let Some(hit) = state.inner.lock().unwrap().idempotent.get(&cache_key) {
                return hit.clone();
            }
            let out = state.handle(endpoint, &rest, &bytes);
            if (200..300).contains(&out.0) {
                state.inner.lock().unwrap().idempotent.insert(cache_key, out.clone());
            }
            out
        } else {
            state.handle(endpoint, &rest, &bytes)
        }
    };

    match fault {
        Some(spec) if (200..300).contains(&spec.status) && spec.body.is_none() => {
            let (s, b) = normal(&state);
            reply(s, b)
        }
        Some(spec) => {
            if spec.commit {
                normal(&state);
            }
            reply(spec.status, spec.body.unwrap_or_else(|| error_body("injected fault")))
        }
        None => {
            let (s, b) = normal(&state);
            reply(s, b)
        }
    }
}

/// A running mock server; shuts down on drop.
pub struct MockServer {
    addr: SocketAddr,
    state: Arc<MockState>,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl MockServer {
    /// Binds `127.0.0.1:port` (0 picks a free port) and starts serving.
    pub fn serve(script: Script, port: u16) -> Result<Self, MockError> {
        script.validate()?;
        let listener = TcpListener::bind(("127.0.0.1", port)).map_err(|source| MockError::Bind { port, source })?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let inner = Inner { faults: script.faults.clone().into_iter().collect(), ..Default::default() };
        let state = Arc::new(MockState { script, inner: Mutex::new(inner), captured: Mutex::new(Vec::new()) });
        let runtime = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
        let (tx, rx) = oneshot::channel::<()>();
        let app = Router::new().fallback(dispatch).with_state(state.clone());
        let thread = std::thread::Builder::new().name("mock-api".into()).spawn(move || {
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener).expect("listener registers with runtime");
                let server = axum::serve(listener, app).with_graceful_shutdown(async {
                    let _ = rx.await;
                });
                if let Err(e) = server.await {
                    log::error!("mock server stopped: {e}");
                }
            });
        })?;
        log::info!("mock API listening on {addr}");
        Ok(Self { addr, state, shutdown: Some(tx), thread: Some(thread) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// All requests received so far, in arrival order.
    pub fn capture(&self) -> Vec<CapturedRequest> {
        self.state.captured.lock().unwrap().clone()
    }

    pub fn job_count(&self) -> usize {
        self.state.inner.lock().unwrap().jobs.len()
    }

    pub fn file_count(&self) -> usize {
        self.state.inner.lock().unwrap().files.len()
    }

    /// Blocks until the server thread exits (after [`MockServer::shutdown`]
    /// from elsewhere or a fatal error).
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    pub fn shutdown(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}
