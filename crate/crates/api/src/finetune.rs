//! Fine-tuning workflow against an OpenAI-compatible API: upload a
//! validated JSONL file, create a job, poll it to a terminal state.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use reqwest::blocking::multipart::{Form, Part};
use reviewtune_core::prompting::validate_jsonl;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::http::{now_ms, ApiClient, ApiError, IDEMPOTENCY_HEADER};

/// Training hyperparameters sent with a fine-tune request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub engine: String,
    pub batch_size: u32,
    pub n_epochs: u32,
    /// Passed through as the vendor's learning-rate multiplier.
    pub learning_rate: f64,
    pub use_padding: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self { engine: "curie".into(), batch_size: 49, n_epochs: 5, learning_rate: 0.1, use_padding: true }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), ApiError> {
        if self.engine.trim().is_empty() {
            return Err(ApiError::Validation("engine must be set".into()));
        }
        if self.batch_size < 1 {
            return Err(ApiError::Validation("batch_size must be at least 1".into()));
        }
        if self.n_epochs < 1 {
            return Err(ApiError::Validation("n_epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ApiError::Validation("learning_rate must be positive".into()));
        }
        Ok(())
    }

    /// Request body for `POST /fine-tunes`. `use_padding` is an extension
    /// field that real endpoints may ignore.
    pub fn request_body(&self, file_id: &str) -> Value {
        json!({
            "training_file": file_id,
            "model": self.engine,
            "batch_size": self.batch_size,
            "n_epochs": self.n_epochs,
            "learning_rate_multiplier": self.learning_rate,
            "use_padding": self.use_padding,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Pending,
    Running,
    Succeeded,
    Failed,
    Cancelled,
}

impl JobStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobStatus::Succeeded | JobStatus::Failed | JobStatus::Cancelled)
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "pending" | "queued" | "created" | "validating_files" => JobStatus::Pending,
            "running" => JobStatus::Running,
            "succeeded" => JobStatus::Succeeded,
            "failed" => JobStatus::Failed,
            "cancelled" => JobStatus::Cancelled,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            JobStatus::Pending => "pending",
            JobStatus::Running => "running",
            JobStatus::Succeeded => "succeeded",
            JobStatus::Failed => "failed",
            JobStatus::Cancelled => "cancelled",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobEvent {
    pub ts_ms: u64,
    pub status: JobStatus,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneJob {
    pub file_id: String,
    pub job_id: String,
    pub status: JobStatus,
    pub fine_tuned_model: Option<String>,
    pub hyperparams: Hyperparams,
    /// Observed status transitions, oldest first.
    pub events: Vec<JobEvent>,
    pub failure_reason: Option<String>,
    /// Set when polling stopped before a terminal status.
    pub timed_out: bool,
}

impl FineTuneJob {
    fn observe(&mut self, status: JobStatus, detail: String) -> Result<bool, ApiError> {
        if status == self.status && !self.events.is_empty() {
            return Ok(false);
        }
        if self.status.is_terminal() && !self.events.is_empty() {
            return Err(ApiError::Protocol {
                endpoint: "fine-tunes".into(),
                message: format!(
                    "job {} left terminal status {} for {}",
                    self.job_id,
                    self.status.as_str(),
                    status.as_str()
                ),
            });
        }
        let ts_ms = self.events.last().map_or(0, |e| e.ts_ms).max(now_ms());
        self.status = status;
        self.events.push(JobEvent { ts_ms, status, detail });
        Ok(true)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub ts: u64,
    pub job_id: String,
    pub status: String,
    pub detail: String,
}

/// Append-only JSONL record of job states, one object per line. Appends
/// take an exclusive advisory lock on the file.
#[derive(Debug, Clone)]
pub struct Ledger {
    path: PathBuf,
}

impl Ledger {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, entry: &LedgerEntry) -> Result<(), ApiError> {
        if let Some(dir) = self.path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut file = OpenOptions::new().create(true).append(true).open(&self.path)?;
        file.lock()?;
        let mut line = serde_json::to_string(entry).expect("ledger entries serialize");
        line.push('\n');
        let res = file.write_all(line.as_bytes()).and_then(|_| file.flush());
        file.unlock()?;
        Ok(res?)
    }

    pub fn entries(&self) -> Result<Vec<LedgerEntry>, ApiError> {
        let file = match File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        file.lock_shared()?;
        let mut out = Vec::new();
        for line in BufReader::new(&file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(
                serde_json::from_str(&line)
                    .map_err(|e| ApiError::Protocol { endpoint: "ledger".into(), message: e.to_string() })?,
            );
        }
        file.unlock()?;
        Ok(out)
    }

    /// Most recent status recorded for each job, in first-seen order.
    pub fn latest(&self) -> Result<Vec<LedgerEntry>, ApiError> {
        let mut order: Vec<String> = Vec::new();
        let mut last: HashMap<String, LedgerEntry> = HashMap::new();
        for e in self.entries()? {
            if !last.contains_key(&e.job_id) {
                order.push(e.job_id.clone());
            }
            last.insert(e.job_id.clone(), e);
        }
        Ok(order.into_iter().map(|id| last.remove(&id).unwrap()).collect())
    }
}

pub struct FineTuneClient<'a> {
    api: &'a ApiClient,
    ledger: Option<Ledger>,
    uploads: Mutex<HashMap<String, String>>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl<'a> FineTuneClient<'a> {
    pub fn new(api: &'a ApiClient, ledger: Option<Ledger>) -> Self {
        Self { api, ledger, uploads: Mutex::new(HashMap::new()) }
    }

    fn log(&self, job_id: &str, status: &str, detail: String) -> Result<(), ApiError> {
        match &self.ledger {
            Some(l) => l.append(&LedgerEntry { ts: now_ms(), job_id: job_id.into(), status: status.into(), detail }),
            None => Ok(()),
        }
    }

    /// Uploads a training file after validating it locally. Identical bytes
    /// reuse the id from an earlier upload by this client, and the request
    /// carries a content-hash idempotency key.
    pub fn upload_file(&self, path: &Path) -> Result<String, ApiError> {
        let report = validate_jsonl(path).map_err(|e| ApiError::Validation(e.to_string()))?;
        if !report.is_ok() {
            return Err(ApiError::Validation(format!("{} failed validation:\n{report}", path.display())));
        }
        let bytes = std::fs::read(path)?;
        let hash = sha256_hex(&bytes);
        if let Some(id) = self.uploads.lock().unwrap().get(&hash) {
            log::info!("{} already uploaded as {id}", path.display());
            return Ok(id.clone());
        }
        let filename =
            path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "train.jsonl".into());
        let url = self.api.url("/files");
        let key = format!("upload-{hash}");
        let resp = self.api.send_json("files", |http| {
            let part = Part::bytes(bytes.clone())
                .file_name(filename.clone())
                .mime_str("application/jsonl")
                .map_err(|e| ApiError::Validation(e.to_string()))?;
            let form = Form::new().text("purpose", "fine-tune").part("file", part);
            Ok(http.post(&url).header(IDEMPOTENCY_HEADER, &key).multipart(form))
        })?;
        let id = resp
            .get("id")
            .and_then(Value::as_str)
            .ok_or_else(|| ApiError::Protocol { endpoint: "files".into(), message: "response has no id".into() })?
            .to_owned();
        self.uploads.lock().unwrap().insert(hash.clone(), id.clone());
        self.log(&id, "uploaded", format!("sha256={hash}"))?;
        Ok(id)
    }

    /// Creates a fine-tune job. The idempotency key defaults to a hash of the
    /// request body, so retries and accidental resubmissions map to one job.
    pub fn create_finetune(
        &self,
        file_id: &str,
        hp: &Hyperparams,
        idempotency_key: Option<&str>,
    ) -> Result<FineTuneJob, ApiError> {
        hp.validate()?;
        let body = hp.request_body(file_id);
        let key = idempotency_key
            .map(str::to_owned)
            .unwrap_or_else(|| format!("ft-{}", sha256_hex(body.to_string().as_bytes())));
        let url = self.api.url("/fine-tunes");
        let resp = self
            .api
            .send_json("fine-tunes", |http| Ok(http.post(&url).header(IDEMPOTENCY_HEADER, &key).json(&body)))?;
        let mut job = FineTuneJob {
            file_id: file_id.to_owned(),
            job_id: String::new(),
            status: JobStatus::Pending,
            fine_tuned_model: None,
            hyperparams: hp.clone(),
            events: Vec::new(),
            failure_reason: None,
            timed_out: false,
        };
        job.job_id = resp
            .get("id")
            .and_then(Value::as_str)
            .ok_or_else(|| ApiError::Protocol { endpoint: "fine-tunes".into(), message: "response has no id".into() })?
            .to_owned();
        self.apply(&mut job, &resp)?;
        Ok(job)
    }

    fn apply(&self, job: &mut FineTuneJob, resp: &Value) -> Result<(), ApiError> {
        let protocol = |message: String| ApiError::Protocol { endpoint: "fine-tunes".into(), message };
        let raw =
            resp.get("status").and_then(Value::as_str).ok_or_else(|| protocol("response has no status".into()))?;
        let status = JobStatus::parse(raw).ok_or_else(|| protocol(format!("unknown status {raw:?}")))?;
        let model = resp.get("fine_tuned_model").and_then(Value::as_str).map(str::to_owned);
        match (status, &model) {
            (JobStatus::Succeeded, None) => return Err(protocol("succeeded job without a model".into())),
            (s, Some(_)) if s != JobStatus::Succeeded => {
                return Err(protocol(format!("{} job reports a model", s.as_str())))
            }
            _ => {}
        }
        let reason = resp.get("failure_reason").and_then(Value::as_str).map(str::to_owned);
        let detail = match (&model, &reason) {
            (Some(m), _) => m.clone(),
            (_, Some(r)) => r.clone(),
            _ => String::new(),
        };
        if job.observe(status, detail.clone())? {
            self.log(&job.job_id, status.as_str(), detail)?;
        }
        job.fine_tuned_model = model;
        if reason.is_some() {
            job.failure_reason = reason;
        }
        Ok(())
    }

    pub fn refresh(&self, job: &mut FineTuneJob) -> Result<(), ApiError> {
        let url = self.api.url(&format!("/fine-tunes/{}", job.job_id));
        let resp = self.api.send_json("fine-tunes/get", |http| Ok(http.get(&url)))?;
        self.apply(job, &resp)
    }

    /// Fetches a job by id, e.g. to resume polling after a restart.
    pub fn get_job(&self, job_id: &str, hp: Hyperparams) -> Result<FineTuneJob, ApiError> {
        let mut job = FineTuneJob {
            file_id: String::new(),
            job_id: job_id.to_owned(),
            status: JobStatus::Pending,
            fine_tuned_model: None,
            hyperparams: hp,
            events: Vec::new(),
            failure_reason: None,
            timed_out: false,
        };
        let url = self.api.url(&format!("/fine-tunes/{job_id}"));
        let resp = self.api.send_json("fine-tunes/get", |http| Ok(http.get(&url)))?;
        if let Some(f) = resp.get("training_file").and_then(Value::as_str) {
            job.file_id = f.to_owned();
        }
        self.apply(&mut job, &resp)?;
        Ok(job)
    }

    /// Polls until the job reaches a terminal status or `timeout` elapses;
    /// on timeout the latest snapshot comes back with `timed_out` set.
    pub fn poll_job(
        &self,
        mut job: FineTuneJob,
        interval: Duration,
        timeout: Duration,
    ) -> Result<FineTuneJob, ApiError> {
        let start = Instant::now();
        job.timed_out = false;
        while !job.status.is_terminal() {
            if start.elapsed() + interval > timeout {
                job.timed_out = true;
                log::warn!("polling {} timed out in status {}", job.job_id, job.status.as_str());
                return Ok(job);
            }
            std::thread::sleep(interval);
            self.refresh(&mut job)?;
        }
        Ok(job)
    }
}
