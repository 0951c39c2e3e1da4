//! Helpers shared by the CLI test targets.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use reviewtune_api::http::{ApiClient, ApiConfig, RetryPolicy};
use reviewtune_api::mock::Script;
use reviewtune_core::prompting::{make_example, to_jsonl, Annotation};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures").join("e2e").join(name)
}

pub fn fixture_script() -> Script {
    Script::load(&fixture("mock_script.json")).expect("fixture script")
}

/// Pipeline configuration for the 60-review fixture (k = 2, rows of 3).
pub fn write_config(dir: &Path, base_url: &str) -> PathBuf {
    let text = format!(
        r#"seed = 7
work_dir = "work"

[ingest]
inputs = ["{reviews}"]

[cluster]
k = 2
group_size = 3

[prompt]
annotations = "{annotations}"

[api]
base_url = "{base_url}"

[api.retry]
base_delay_ms = 10
max_delay_ms = 100

[finetune]
poll_interval_ms = 20
poll_timeout_s = 10

[eval]
embeddings = "{embeddings}"
"#,
        reviews = fixture("reviews.tsv").display(),
        annotations = fixture("annotations.tsv").display(),
        embeddings = fixture("embeddings.txt").display(),
    );
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

pub fn reviewtune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reviewtune")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

pub fn api_client(base_url: &str) -> ApiClient {
    let config = ApiConfig {
        base_url: base_url.to_owned(),
        timeout_ms: 5_000,
        retry: RetryPolicy { max_retries: 4, base_delay_ms: 5, max_delay_ms: 50 },
        ..ApiConfig::default()
    };
    ApiClient::with_token(config, None).unwrap()
}

pub fn small_training_file(dir: &Path) -> PathBuf {
    let ann = Annotation { pros: vec!["sturdy".into()], cons: vec![], verdict: "Fine.".into() };
    let examples: Vec<_> = (0..4)
        .map(|i| make_example("", &[format!("first review {i}"), format!("second review {i}")], &ann).unwrap())
        .collect();
    let path = dir.join("train.jsonl");
    to_jsonl(&examples, &path).unwrap();
    path
}
