//! Runs a subset of the stages in order, with dependency checks, per-stage
//! reports and hash-guarded skipping of stages whose inputs did not change.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use reviewtune_api::finetune::Ledger;
use reviewtune_api::http::ApiClient;
use reviewtune_api::inference::InferenceSettings;
use reviewtune_core::clustering::KMeansParams;
use reviewtune_core::corpus::InputFormat;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{ClassifierChoice, EmbedderChoice, FormatChoice, PipelineConfig};
use crate::stages::{self, ClassifierSpec, EmbedderSpec, PollSettings, StageOutput, UploadRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Cluster,
    Moderate,
    Prompt,
    Upload,
    Finetune,
    Infer,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Ingest,
        Stage::Cluster,
        Stage::Moderate,
        Stage::Prompt,
        Stage::Upload,
        Stage::Finetune,
        Stage::Infer,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Cluster => "cluster",
            Stage::Moderate => "moderate",
            Stage::Prompt => "prompt",
            Stage::Upload => "upload",
            Stage::Finetune => "finetune",
            Stage::Infer => "infer",
            Stage::Eval => "eval",
        }
    }

    /// Stages whose artifacts this stage reads.
    fn deps(self, cfg: &PipelineConfig) -> Vec<Stage> {
        match self {
            Stage::Ingest => vec![],
            Stage::Cluster => vec![Stage::Ingest],
            Stage::Moderate => vec![Stage::Cluster],
            Stage::Prompt => vec![Stage::Moderate],
            Stage::Upload => vec![Stage::Prompt],
            Stage::Finetune => vec![Stage::Upload],
            Stage::Infer if cfg.infer.model.is_some() => vec![Stage::Moderate],
            Stage::Infer => vec![Stage::Moderate, Stage::Finetune],
            Stage::Eval => vec![Stage::Infer],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s.trim())
            .ok_or_else(|| format!("unknown stage {s:?} (expected one of {})", stage_names()))
    }
}

fn stage_names() -> String {
    Stage::ALL.map(Stage::name).join(", ")
}

/// Parses `all` or a comma-separated stage list; the result is in pipeline
/// order without duplicates.
pub fn parse_stages(spec: &str) -> Result<Vec<Stage>> {
    if spec.trim() == "all" {
        return Ok(Stage::ALL.to_vec());
    }
    let mut out: Vec<Stage> = spec
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.parse::<Stage>().map_err(anyhow::Error::msg))
        .collect::<Result<_>>()?;
    out.sort();
    out.dedup();
    if out.is_empty() {
        bail!("no stages given");
    }
    Ok(out)
}

pub const STATUS_OK: &str = "ok";
pub const STATUS_SKIPPED: &str = "skipped (up-to-date)";
pub const STATUS_FAILED: &str = "failed";
pub const STATUS_NOT_RUN: &str = "not run (upstream failure)";

/// Machine-readable record of one stage execution, stored as
/// `<work_dir>/reports/<stage>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub status: String,
    pub input_hash: String,
    /// Output path (relative to the work directory) to SHA-256 of its bytes.
    pub outputs: BTreeMap<String, String>,
    pub counts: BTreeMap<String, Value>,
    pub warnings: Vec<String>,
    pub error: Option<String>,
    pub duration_ms: u64,
}

impl StageReport {
    fn succeeded(&self) -> bool {
        self.status == STATUS_OK || self.status == STATUS_SKIPPED
    }
}

/// Artifact locations under the work directory.
pub struct Layout {
    pub work: PathBuf,
}

impl Layout {
    pub fn new(work: impl Into<PathBuf>) -> Self {
        Self { work: work.into() }
    }
    pub fn ingest_dir(&self) -> PathBuf {
        self.work.join("ingest")
    }
    pub fn clustered(&self) -> PathBuf {
        self.work.join("cluster").join("dataset.tsv")
    }
    pub fn moderated(&self) -> PathBuf {
        self.work.join("moderate").join("dataset.tsv")
    }
    pub fn train_jsonl(&self) -> PathBuf {
        self.work.join("prompt").join("train.jsonl")
    }
    pub fn upload_record(&self) -> PathBuf {
        self.work.join("upload").join("file.json")
    }
    pub fn job_record(&self) -> PathBuf {
        self.work.join("finetune").join("job.json")
    }
    pub fn results(&self) -> PathBuf {
        self.work.join("infer").join("results.jsonl")
    }
    pub fn eval_dir(&self) -> PathBuf {
        self.work.join("eval")
    }
    pub fn report(&self, stage: Stage) -> PathBuf {
        self.work.join("reports").join(format!("{}.json", stage.name()))
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.work).unwrap_or(p).to_string_lossy().replace('\\', "/")
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn read_report(layout: &Layout, stage: Stage) -> Option<StageReport> {
    let text = std::fs::read_to_string(layout.report(stage)).ok()?;
    serde_json::from_str(&text).ok()
}

/// A report whose outputs are all still on disk with the recorded hashes.
fn intact(layout: &Layout, report: &StageReport) -> bool {
    report.succeeded()
        && report.outputs.iter().all(|(rel, hash)| sha256_file(&layout.work.join(rel)).is_ok_and(|h| &h == hash))
}

fn file_inputs(paths: &[PathBuf]) -> Result<Vec<(String, String)>> {
    paths.iter().map(|p| Ok((p.to_string_lossy().into_owned(), sha256_file(p)?))).collect()
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub layout: Layout,
}

#[derive(Debug)]
pub struct PipelineOutcome {
    pub reports: Vec<StageReport>,
    pub success: bool,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Self {
        let layout = Layout::new(cfg.work_dir.clone());
        Self { cfg, layout }
    }

    fn api(&self) -> Result<ApiClient> {
        Ok(ApiClient::new(self.cfg.api.clone())?)
    }

    fn ledger(&self) -> Ledger {
        Ledger::new(self.cfg.ledger_path())
    }

    fn poll(&self) -> PollSettings {
        PollSettings {
            interval: Duration::from_millis(self.cfg.finetune.poll_interval_ms),
            timeout: Duration::from_secs(self.cfg.finetune.poll_timeout_s),
        }
    }

    fn remote_endpoint(&self) -> Value {
        json!({ "base_url": self.cfg.api.base_url, "path_prefix": self.cfg.api.path_prefix })
    }

    fn infer_settings(&self) -> InferenceSettings {
        InferenceSettings {
            max_tokens: self.cfg.infer.max_tokens,
            temperature: self.cfg.infer.temperature,
            group_size: self.cfg.cluster.group_size,
            strict: self.cfg.infer.strict,
            prompt_prefix: self.cfg.prompt.prefix.clone(),
        }
    }

    /// Everything a stage reads: the relevant configuration and the hashes of
    /// its input files. Fails when an input file is missing.
    fn stage_inputs(&self, stage: Stage) -> Result<Value> {
        let c = &self.cfg;
        let l = &self.layout;
        let (settings, files): (Value, Vec<PathBuf>) = match stage {
            Stage::Ingest => (json!({ "ingest": c.ingest }), c.ingest.inputs.clone()),
            Stage::Cluster => {
                let files = stages::partition_files(&l.ingest_dir())?;
                (json!({ "seed": c.seed, "cluster": c.cluster }), files)
            }
            Stage::Moderate => {
                let mut files = vec![l.clustered()];
                files.extend(c.moderate.lexicon.clone());
                let remote = (c.moderate.classifier == ClassifierChoice::Remote).then(|| self.remote_endpoint());
                (json!({ "moderate": c.moderate, "remote": remote }), files)
            }
            Stage::Prompt => {
                let ann = c.prompt.annotations.clone().context("prompt.annotations is not set")?;
                (json!({ "prefix": c.prompt.prefix }), vec![l.moderated(), ann])
            }
            Stage::Upload => (self.remote_endpoint(), vec![l.train_jsonl()]),
            Stage::Finetune => (
                json!({ "api": self.remote_endpoint(), "hyperparams": c.finetune.hyperparams }),
                vec![l.upload_record()],
            ),
            Stage::Infer => {
                let mut files = vec![l.moderated()];
                if c.infer.model.is_none() {
                    files.push(l.job_record());
                }
                files.extend(c.infer.rows.clone());
                (json!({ "api": self.remote_endpoint(), "infer": c.infer, "prefix": c.prompt.prefix }), files)
            }
            Stage::Eval => {
                let ann = c.prompt.annotations.clone().context("prompt.annotations is not set")?;
                let mut files = vec![l.results(), ann];
                files.extend(c.eval.embeddings.clone());
                let remote = (c.eval.embedder == EmbedderChoice::Remote).then(|| self.remote_endpoint());
                let mut eval = serde_json::to_value(&c.eval)?;
                // The sweep sizes do not affect this stage.
                eval.as_object_mut().map(|o| o.remove("sweep_sizes"));
                (json!({ "eval": eval, "remote": remote }), files)
            }
        };
        Ok(json!({ "stage": stage.name(), "settings": settings, "files": file_inputs(&files)? }))
    }

    fn input_hash(&self, stage: Stage) -> Result<String> {
        let v = self.stage_inputs(stage)?;
        Ok(hex::encode(Sha256::digest(v.to_string().as_bytes())))
    }

    fn execute(&self, stage: Stage) -> Result<StageOutput> {
        let c = &self.cfg;
        let l = &self.layout;
        match stage {
            Stage::Ingest => {
                let format = match c.ingest.format {
                    FormatChoice::Auto => None,
                    FormatChoice::Tsv => Some(InputFormat::Tsv),
                    FormatChoice::Csv => Some(InputFormat::Csv),
                };
                stages::ingest(&c.ingest.inputs, format, &c.ingest.columns, c.ingest.min_len, &l.ingest_dir())
            }
            Stage::Cluster => {
                let params = KMeansParams {
                    k: c.cluster.k,
                    seed: c.seed,
                    max_iter: c.cluster.max_iter,
                    tol: c.cluster.tol,
                    n_init: c.cluster.n_init,
                };
                stages::cluster(&l.ingest_dir(), &params, c.cluster.group_size, &l.clustered())
            }
            Stage::Moderate => {
                let api;
                let spec = match c.moderate.classifier {
                    ClassifierChoice::Local => ClassifierSpec::Local(c.moderate.lexicon.as_deref()),
                    ClassifierChoice::Remote => {
                        api = self.api()?;
                        ClassifierSpec::Remote(&api)
                    }
                };
                stages::moderate(&l.clustered(), spec, c.moderate.thresh, c.moderate.max_in_flight, &l.moderated())
            }
            Stage::Prompt => {
                let ann = c.prompt.annotations.as_deref().context("prompt.annotations is not set")?;
                stages::prompt(&l.moderated(), ann, &c.prompt.prefix, &l.train_jsonl())
            }
            Stage::Upload => stages::upload(&self.api()?, Some(self.ledger()), &l.train_jsonl(), &l.upload_record()),
            Stage::Finetune => {
                let text = std::fs::read_to_string(l.upload_record())?;
                let rec: UploadRecord = serde_json::from_str(&text)?;
                stages::finetune(
                    &self.api()?,
                    Some(self.ledger()),
                    &rec.file_id,
                    &c.finetune.hyperparams,
                    &self.poll(),
                    &l.job_record(),
                )
            }
            Stage::Infer => {
                let model = match &c.infer.model {
                    Some(m) => m.clone(),
                    None => stages::model_from_job(&l.job_record())?,
                };
                let filter = c.infer.rows.as_deref().map(stages::read_row_filter).transpose()?;
                stages::infer(
                    &self.api()?,
                    &model,
                    &l.moderated(),
                    filter.as_ref(),
                    &self.infer_settings(),
                    c.infer.max_in_flight,
                    &l.results(),
                )
            }
            Stage::Eval => {
                let ann = c.prompt.annotations.as_deref().context("prompt.annotations is not set")?;
                let api;
                let spec = match c.eval.embedder {
                    EmbedderChoice::Static => {
                        EmbedderSpec::Static(c.eval.embeddings.as_deref().context("eval.embeddings is not set")?)
                    }
                    EmbedderChoice::Remote => {
                        api = self.api()?;
                        EmbedderSpec::Remote { api: &api, model: &c.eval.embed_model }
                    }
                };
                stages::eval(&l.results(), ann, spec, c.eval.idf, c.eval.max_in_flight, &l.eval_dir())
            }
        }
    }

    /// Every dependency of a requested stage must either be requested too or
    /// have an intact artifact from an earlier run.
    pub fn check_dependencies(&self, stages: &[Stage]) -> Result<()> {
        let mut problems = Vec::new();
        for &s in stages {
            for d in s.deps(&self.cfg) {
                if stages.contains(&d) {
                    continue;
                }
                match read_report(&self.layout, d) {
                    Some(r) if intact(&self.layout, &r) => {}
                    Some(_) => problems.push(format!("{s} needs {d}, whose artifacts are missing or changed")),
                    None => problems.push(format!("{s} needs {d}, which has not run (add it to --stages)")),
                }
            }
        }
        if !problems.is_empty() {
            bail!("dependency check failed:\n  {}", problems.join("\n  "));
        }
        Ok(())
    }

    /// The stage can be skipped: same inputs as the last successful run and
    /// its outputs are untouched.
    fn up_to_date(&self, stage: Stage, input_hash: &str) -> Option<StageReport> {
        let prev = read_report(&self.layout, stage)?;
        (prev.input_hash == input_hash && intact(&self.layout, &prev)).then_some(prev)
    }

    /// What a run would do, without doing it.
    pub fn plan(&self, stages: &[Stage]) -> Result<Vec<(Stage, &'static str)>> {
        self.check_dependencies(stages)?;
        let mut out = Vec::new();
        let mut upstream_changes = false;
        for &s in stages {
            let fresh = !upstream_changes && self.input_hash(s).ok().and_then(|h| self.up_to_date(s, &h)).is_some();
            if fresh {
                out.push((s, STATUS_SKIPPED));
            } else {
                upstream_changes = true;
                out.push((s, "would run"));
            }
        }
        Ok(out)
    }

    fn write_report(&self, report: &StageReport) -> Result<()> {
        let path = self.layout.report(report.stage);
        std::fs::create_dir_all(path.parent().expect("report dir"))?;
        let mut text = serde_json::to_string_pretty(report)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    fn run_stage(&self, stage: Stage) -> Result<StageReport> {
        let start = Instant::now();
        let input_hash = self.input_hash(stage)?;
        if let Some(prev) = self.up_to_date(stage, &input_hash) {
            log::info!("{stage}: inputs unchanged, skipping");
            return Ok(StageReport { status: STATUS_SKIPPED.into(), duration_ms: 0, ..prev });
        }
        let out = self.execute(stage)?;
        let mut outputs = BTreeMap::new();
        for p in &out.outputs {
            outputs.insert(self.layout.rel(p), sha256_file(p)?);
        }
        Ok(StageReport {
            stage,
            status: STATUS_OK.into(),
            input_hash,
            outputs,
            counts: out.counts,
            warnings: out.warnings,
            error: None,
            duration_ms: start.elapsed().as_millis() as u64,
        })
    }

    /// Runs `stages` in pipeline order. Dependency problems fail before any
    /// work; a failing stage stops the run and later stages are not run.
    pub fn run(&self, stages: &[Stage]) -> Result<PipelineOutcome> {
        let mut stages = stages.to_vec();
        stages.sort();
        stages.dedup();
        self.check_dependencies(&stages)?;
        std::fs::create_dir_all(&self.layout.work)
            .with_context(|| format!("creating {}", self.layout.work.display()))?;

        let mut reports = Vec::new();
        let mut failed = false;
        for &stage in &stages {
            if failed {
                reports.push(StageReport {
                    stage,
                    status: STATUS_NOT_RUN.into(),
                    input_hash: String::new(),
                    outputs: BTreeMap::new(),
                    counts: BTreeMap::new(),
                    warnings: Vec::new(),
                    error: None,
                    duration_ms: 0,
                });
                continue;
            }
            let start = Instant::now();
            let report = match self.run_stage(stage) {
                Ok(r) => r,
                Err(e) => {
                    log::error!("{stage} failed: {e:#}");
                    failed = true;
                    StageReport {
                        stage,
                        status: STATUS_FAILED.into(),
                        input_hash: self.input_hash(stage).unwrap_or_default(),
                        outputs: BTreeMap::new(),
                        counts: BTreeMap::new(),
                        warnings: Vec::new(),
                        error: Some(format!("{e:#}")),
                        duration_ms: start.elapsed().as_millis() as u64,
                    }
                }
            };
            self.write_report(&report)?;
            reports.push(report);
        }
        Ok(PipelineOutcome { success: !failed, reports })
    }
}
