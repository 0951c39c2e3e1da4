use std::path::PathBuf;
use std::time::Duration;

use reviewtune_api::finetune::{FineTuneClient, Hyperparams, JobStatus, Ledger};
use reviewtune_api::http::{ApiClient, ApiConfig, ApiError, RetryPolicy};
use reviewtune_api::inference::{CompletionRequest, InferenceClient, InferenceSettings, SummaryOutcome};
use reviewtune_api::mock::{MockServer, ResponseSpec, Script};
use reviewtune_api::remote::{RemoteClassifier, RemoteEmbedder};
use reviewtune_core::evaluation::Embedder;
use reviewtune_core::moderation::{decide, Action, SafetyClassifier};
use reviewtune_core::prompting::{make_example, to_jsonl, Annotation, SEPARATOR};
use serde_json::json;
use tempfile::TempDir;

fn client(server: &MockServer) -> ApiClient {
    let config = ApiConfig {
        base_url: server.base_url(),
        timeout_ms: 5_000,
        retry: RetryPolicy { max_retries: 4, base_delay_ms: 5, max_delay_ms: 50 },
        ..ApiConfig::default()
    };
    ApiClient::with_token(config, Some("test-token".into())).unwrap()
}

fn fault(status: u16) -> ResponseSpec {
    ResponseSpec { status, ..Default::default() }
}

fn reviews(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("review number {i} says the battery is fine")).collect()
}

fn training_file(dir: &TempDir) -> PathBuf {
    let ann = Annotation { pros: vec!["light".into()], cons: vec![], verdict: "Good.".into() };
    let examples: Vec<_> =
        (0..3).map(|i| make_example("", &[format!("first {i}"), format!("second {i}")], &ann).unwrap()).collect();
    let path = dir.path().join("train.jsonl");
    to_jsonl(&examples, &path).unwrap();
    path
}

#[test]
fn upload_returns_sequential_ids_and_caches() {
    let server = MockServer::serve(Script::default(), 0).unwrap();
    let api = client(&server);
    let dir = TempDir::new().unwrap();
    let path = training_file(&dir);
    let ft = FineTuneClient::new(&api, None);
    assert_eq!(ft.upload_file(&path).unwrap(), "file-0001");
    assert_eq!(ft.upload_file(&path).unwrap(), "file-0001");
    assert_eq!(server.file_count(), 1);
    let cap = server.capture();
    assert_eq!(cap.len(), 1);
    assert_eq!(cap[0].headers.get("authorization").map(String::as_str), Some("Bearer test-token"));
    assert!(cap[0].headers["idempotency-key"].starts_with("upload-"));
    assert!(cap[0].body_text().contains("fine-tune"));
}

#[test]
fn invalid_training_file_never_reaches_the_network() {
    let server = MockServer::serve(Script::default(), 0).unwrap();
    let api = client(&server);
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("bad.jsonl");
    std::fs::write(&path, "{\"prompt\": \"no end marker\", \"completion\": \" x\"}\n").unwrap();
    let err = FineTuneClient::new(&api, None).upload_file(&path).unwrap_err();
    assert!(matches!(err, ApiError::Validation(_)), "{err}");
    assert!(server.capture().is_empty());
}

#[test]
fn create_retries_server_errors_and_sends_defaults() {
    let mut script = Script::default();
    script.faults.insert("create_fine_tune".into(), vec![fault(500), fault(500), fault(200)]);
    let server = MockServer::serve(script, 0).unwrap();
    let api = client(&server);
    let dir = TempDir::new().unwrap();
    let ft = FineTuneClient::new(&api, None);
    let file = ft.upload_file(&training_file(&dir)).unwrap();
    let job = ft.create_finetune(&file, &Hyperparams::default(), None).unwrap();
    assert_eq!(job.job_id, "ft-0001");
    assert_eq!(job.status, JobStatus::Pending);
    let creates: Vec<_> = server.capture().into_iter().filter(|r| r.path == "/v1/fine-tunes").collect();
    assert_eq!(creates.len(), 3);
    let keys: Vec<_> = creates.iter().map(|r| r.headers["idempotency-key"].clone()).collect();
    assert!(keys.iter().all(|k| k == &keys[0]));
    let body = creates[2].json().unwrap();
    assert_eq!(body["model"], "curie");
    assert_eq!(body["batch_size"], 49);
    assert_eq!(body["n_epochs"], 5);
    assert_eq!(body["learning_rate_multiplier"], 0.1);
    assert_eq!(body["use_padding"], true);
    assert_eq!(body["training_file"], "file-0001");
    let attempts: Vec<_> = api.attempts().into_iter().filter(|a| a.endpoint == "fine-tunes").collect();
    assert_eq!(attempts.len(), 3);
}

#[test]
fn lost_response_still_yields_one_job() {
    let mut script = Script::default();
    let lost = ResponseSpec { status: 500, commit: true, ..Default::default() };
    script.faults.insert("create_fine_tune".into(), vec![lost, fault(500), fault(200)]);
    let server = MockServer::serve(script, 0).unwrap();
    let api = client(&server);
    let dir = TempDir::new().unwrap();
    let ft = FineTuneClient::new(&api, None);
    let file = ft.upload_file(&training_file(&dir)).unwrap();
    let job = ft.create_finetune(&file, &Hyperparams::default(), None).unwrap();
    assert_eq!(job.job_id, "ft-0001");
    assert_eq!(server.job_count(), 1);
    // Resubmitting the same request is answered from the idempotency cache.
    let again = ft.create_finetune(&file, &Hyperparams::default(), None).unwrap();
    assert_eq!(again.job_id, "ft-0001");
    assert_eq!(server.job_count(), 1);
}

#[test]
fn distinct_keys_create_distinct_jobs() {
    let server = MockServer::serve(Script::default(), 0).unwrap();
    let api = client(&server);
    let dir = TempDir::new().unwrap();
    let ft = FineTuneClient::new(&api, None);
    let file = ft.upload_file(&training_file(&dir)).unwrap();
    for key in ["a", "b", "c"] {
        ft.create_finetune(&file, &Hyperparams::default(), Some(key)).unwrap();
    }
    assert_eq!(server.job_count(), 3);
}

#[test]
fn retries_exhausted_and_client_errors() {
    let mut script = Script::default();
    script.faults.insert("completions".into(), vec![fault(503); 10]);
    let server = MockServer::serve(script, 0).unwrap();
    let api = client(&server);
    let req = CompletionRequest::new("curie", "x\n\n###\n\n");
    let err = InferenceClient::new(&api).complete(&req).unwrap_err();
    assert!(matches!(err, ApiError::RetriesExhausted { attempts: 5, .. }), "{err}");

    let server = MockServer::serve(Script::default(), 0).unwrap();
    let api = client(&server);
    let err = InferenceClient::new(&api).complete(&CompletionRequest::new("nope", "x\n\n###\n\n")).unwrap_err();
    assert_eq!(err.status(), Some(404));
    assert_eq!(server.capture().len(), 1, "404 must not be retried");
}

#[test]
fn invalid_hyperparams_are_refused_locally() {
    let server = MockServer::serve(Script::default(), 0).unwrap();
    let api = client(&server);
    let ft = FineTuneClient::new(&api, None);
    let hp = Hyperparams { batch_size: 0, ..Hyperparams::default() };
    assert!(matches!(ft.create_finetune("file-0001", &hp, None), Err(ApiError::Validation(_))));
    assert!(server.capture().is_empty());
}

#[test]
fn poll_reaches_success_and_records_ledger() {
    let server = MockServer::serve(Script::default(), 0).unwrap();
    let api = client(&server);
    let dir = TempDir::new().unwrap();
    let ledger = Ledger::new(dir.path().join("jobs.jsonl"));
    let ft = FineTuneClient::new(&api, Some(ledger.clone()));
    let file = ft.upload_file(&training_file(&dir)).unwrap();
    let job = ft.create_finetune(&file, &Hyperparams::default(), None).unwrap();
    let job = ft.poll_job(job, Duration::from_millis(5), Duration::from_secs(5)).unwrap();
    assert_eq!(job.status, JobStatus::Succeeded);
    assert_eq!(job.fine_tuned_model.as_deref(), Some("curie:ft-mock-0001"));
    let seen: Vec<_> = job.events.iter().map(|e| e.status).collect();
    assert_eq!(seen, [JobStatus::Pending, JobStatus::Running, JobStatus::Succeeded]);
    let statuses: Vec<_> = ledger.entries().unwrap().into_iter().map(|e| e.status).collect();
    assert_eq!(statuses, ["uploaded", "pending", "running", "succeeded"]);
    let latest = ledger.latest().unwrap();
    assert!(latest.iter().any(|e| e.job_id == "ft-0001" && e.status == "succeeded"));
}

#[test]
fn poll_reports_failure_reason() {
    let script = Script {
        job_statuses: vec!["pending".into(), "failed".into()],
        failure_reason: Some("training data too small".into()),
        ..Script::default()
    };
    let server = MockServer::serve(script, 0).unwrap();
    let api = client(&server);
    let dir = TempDir::new().unwrap();
    let ft = FineTuneClient::new(&api, None);
    let file = ft.upload_file(&training_file(&dir)).unwrap();
    let job = ft.create_finetune(&file, &Hyperparams::default(), None).unwrap();
    let job = ft.poll_job(job, Duration::from_millis(5), Duration::from_secs(5)).unwrap();
    assert_eq!(job.status, JobStatus::Failed);
    assert_eq!(job.failure_reason.as_deref(), Some("training data too small"));
    assert!(job.fine_tuned_model.is_none());
}

#[test]
fn poll_timeout_returns_last_snapshot() {
    let script = Script { job_statuses: vec!["pending".into(), "running".into()], ..Script::default() };
    let server = MockServer::serve(script, 0).unwrap();
    let api = client(&server);
    let dir = TempDir::new().unwrap();
    let ft = FineTuneClient::new(&api, None);
    let file = ft.upload_file(&training_file(&dir)).unwrap();
    let job = ft.create_finetune(&file, &Hyperparams::default(), None).unwrap();
    let job = ft.poll_job(job, Duration::from_millis(20), Duration::from_millis(200)).unwrap();
    assert!(job.timed_out);
    assert_eq!(job.status, JobStatus::Running);
    let resumed = ft.get_job("ft-0001", Hyperparams::default()).unwrap();
    assert_eq!(resumed.file_id, "file-0001");
}

#[test]
fn unknown_job_is_not_found() {
    let server = MockServer::serve(Script::default(), 0).unwrap();
    let api = client(&server);
    let err = FineTuneClient::new(&api, None).get_job("ft-9999", Hyperparams::default()).unwrap_err();
    assert_eq!(err.status(), Some(404));
}

fn summary_script() -> Script {
    Script {
        models: vec!["curie:ft-test".into()],
        completions: vec![
            " Pros:\n- long battery\n- bright screen\nCons:\n- heavy\nVerdict: Worth it.\nEND trailing".into()
        ],
        ..Script::default()
    }
}

#[test]
fn completions_truncate_at_stop_and_are_deterministic() {
    let server = MockServer::serve(summary_script(), 0).unwrap();
    let api = client(&server);
    let inf = InferenceClient::new(&api);
    let req = CompletionRequest::new("curie:ft-test", "a\n\n###\n\n");
    let first = inf.complete(&req).unwrap();
    assert!(first.ends_with("Verdict: Worth it."));
    assert_eq!(inf.complete(&req).unwrap(), first);
    let body = server.capture()[0].json().unwrap();
    assert_eq!(body["stop"], json!(["\nEND"]));
    assert_eq!(body["max_tokens"], 300);
}

#[test]
fn summarize_parses_pros_and_cons() {
    let server = MockServer::serve(summary_script(), 0).unwrap();
    let api = client(&server);
    let settings = InferenceSettings::default();
    let out = InferenceClient::new(&api).summarize_reviews("curie:ft-test", &reviews(15), &settings).unwrap();
    let ann = out.annotation().expect("parsed");
    assert_eq!(ann.pros, ["long battery", "bright screen"]);
    assert_eq!(ann.cons, ["heavy"]);
    assert_eq!(ann.verdict, "Worth it.");
    let prompt = server.capture()[0].json().unwrap()["prompt"].as_str().unwrap().to_owned();
    assert_eq!(prompt.matches(SEPARATOR).count(), 14);
    assert!(prompt.ends_with("\n\n###\n\n"));
}

#[test]
fn unparseable_completion_is_recorded() {
    let script = Script { models: vec!["m".into()], completions: vec!["just prose".into()], ..Script::default() };
    let server = MockServer::serve(script, 0).unwrap();
    let api = client(&server);
    let out = InferenceClient::new(&api).summarize_reviews("m", &reviews(15), &InferenceSettings::default()).unwrap();
    assert!(matches!(out.outcome, SummaryOutcome::ParseFailure { .. }));
    assert_eq!(out.raw_text, "just prose");
}

#[test]
fn strict_mode_rejects_wrong_review_count() {
    let server = MockServer::serve(summary_script(), 0).unwrap();
    let api = client(&server);
    let inf = InferenceClient::new(&api);
    let err = inf.summarize_reviews("curie:ft-test", &reviews(14), &InferenceSettings::default()).unwrap_err();
    assert!(matches!(err, ApiError::Validation(_)));
    let lenient = InferenceSettings { strict: false, ..InferenceSettings::default() };
    assert!(inf.summarize_reviews("curie:ft-test", &reviews(14), &lenient).is_ok());
}

#[test]
fn batch_keeps_input_order() {
    let server = MockServer::serve(summary_script(), 0).unwrap();
    let api = client(&server);
    let settings = InferenceSettings { group_size: 2, ..InferenceSettings::default() };
    let batch: Vec<Vec<String>> = (0..6).map(|i| vec![format!("a{i}"), format!("b{i}")]).collect();
    let out = InferenceClient::new(&api).summarize_batch("curie:ft-test", &batch, &settings, 3);
    assert_eq!(out.len(), 6);
    assert!(out.iter().all(|r| r.as_ref().unwrap().annotation().is_some()));
}

#[test]
fn remote_classifier_and_embedder() {
    let mut script = Script::default();
    script.classify.default = [0.9f64.ln(), 0.05f64.ln(), 0.05f64.ln()];
    script.classify.rules.push(reviewtune_api::mock::ClassifyRule {
        contains: "awful".into(),
        logprobs: [0.1f64.ln(), 0.1f64.ln(), 0.8f64.ln()],
    });
    let server = MockServer::serve(script, 0).unwrap();
    let api = client(&server);
    let cls = RemoteClassifier::new(&api);
    let safe = cls.classify("a lovely phone").unwrap();
    assert_eq!(decide(safe, -0.355).action, Action::Keep);
    let bad = cls.classify("an AWFUL thing").unwrap();
    assert_eq!(decide(bad, -0.355).action, Action::Reject);

    let emb = RemoteEmbedder::connect(&api, "embed-test").unwrap();
    assert_eq!(emb.dim(), 8);
    let v = emb.embed(&["x".into(), "y".into(), "x".into()]).unwrap();
    assert_eq!(v.len(), 3);
    assert_eq!(v[0], v[2]);
    assert_ne!(v[0], v[1]);
}

#[test]
fn busy_port_is_reported() {
    let server = MockServer::serve(Script::default(), 0).unwrap();
    let port = server.addr().port();
    assert!(MockServer::serve(Script::default(), port).is_err());
}
