//! The pipeline stages. Each stage reads and writes files only, so every stage
//! can run on its own from a subcommand or as part of `run`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use reviewtune_api::finetune::{FineTuneClient, FineTuneJob, Hyperparams, JobStatus, Ledger};
use reviewtune_api::http::ApiClient;
use reviewtune_api::inference::{InferenceClient, InferenceSettings, ModelSource, SummaryOutcome};
use reviewtune_api::remote::{RemoteClassifier, RemoteEmbedder};
use reviewtune_core::clustering::{
    assemble_rows, kmeans_fit, read_dataset, vectorize_tfidf, write_dataset, ClusterError, KMeansParams, ProductRow,
};
use reviewtune_core::corpus::{
    filter_by_length, load_many, partition_by_category, read_reviews, write_partitions, ColumnMap, InputFormat,
    RejectRecord,
};
use reviewtune_core::evaluation::{
    idf_weights, score_pairs, size_sweep, write_pair_scores, write_sweep_report, Embedder, EvalPair, StaticEmbedder,
};
use reviewtune_core::moderation::{filter_rows, write_audit, Lexicon, LexiconClassifier, SafetyClassifier};
use reviewtune_core::prompting::{
    build_prompt_with_prefix, from_jsonl, make_example, read_annotations, render_summary, to_jsonl, validate_jsonl,
    Annotation,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

/// What a stage produced: artifact paths, counts for the stage report and
/// non-fatal warnings.
#[derive(Debug, Default)]
pub struct StageOutput {
    pub outputs: Vec<PathBuf>,
    pub counts: BTreeMap<String, Value>,
    pub warnings: Vec<String>,
}

impl StageOutput {
    fn count(&mut self, key: &str, value: impl Into<Value>) {
        self.counts.insert(key.to_owned(), value.into());
    }

    fn warn(&mut self, msg: String) {
        log::warn!("{msg}");
        self.warnings.push(msg);
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    create_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

// ---------------------------------------------------------------- ingest

pub fn ingest(
    inputs: &[PathBuf],
    format: Option<InputFormat>,
    columns: &ColumnMap,
    min_len: usize,
    outdir: &Path,
) -> Result<StageOutput> {
    if inputs.is_empty() {
        bail!("no input files given");
    }
    let reports = load_many(inputs, format, columns)?;
    let mut out = StageOutput::default();
    let mut reviews = Vec::new();
    let mut rejects = Vec::new();
    let mut data_rows = 0;
    let mut seen_ids = BTreeSet::new();
    for (path, report) in inputs.iter().zip(reports) {
        data_rows += report.data_rows;
        let label = |r: RejectRecord| {
            if inputs.len() > 1 {
                RejectRecord { row: r.row, reason: format!("{}: {}", path.display(), r.reason) }
            } else {
                r
            }
        };
        rejects.extend(report.rejects.into_iter().map(label));
        for review in report.reviews {
            if !seen_ids.insert(review.id.clone()) {
                out.warn(format!("{}: review id {} also appears in an earlier file", path.display(), review.id));
            }
            reviews.push(review);
        }
    }
    let loaded = reviews.len();
    let kept = filter_by_length(reviews, min_len);
    let too_short = loaded - kept.len();
    let n_kept = kept.len();
    let partitions = partition_by_category(kept);

    // Stale partitions from an earlier run would otherwise be clustered too.
    if outdir.is_dir() {
        for entry in std::fs::read_dir(outdir)? {
            let p = entry?.path();
            if p.extension().is_some_and(|e| e == "tsv") {
                std::fs::remove_file(&p)?;
            }
        }
    }
    out.outputs = write_partitions(outdir, &partitions, &rejects)?;
    out.outputs.push(outdir.join("rejects.tsv"));
    out.count("data_rows", data_rows);
    out.count("loaded", loaded);
    out.count("rejected", rejects.len());
    out.count("too_short", too_short);
    out.count("kept", n_kept);
    out.count(
        "categories",
        partitions.iter().map(|(c, p)| (c.clone(), json!(p.reviews.len()))).collect::<serde_json::Map<_, _>>(),
    );
    if n_kept == 0 {
        out.warn("no reviews survived ingest".into());
    }
    Ok(out)
}

/// Category files written by [`ingest`], in name order.
pub fn partition_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "tsv") && p.file_name().is_some_and(|n| n != "rejects.tsv"));
    files.sort();
    Ok(files)
}

// ---------------------------------------------------------------- cluster

pub fn cluster(ingest_dir: &Path, params: &KMeansParams, group_size: usize, dataset: &Path) -> Result<StageOutput> {
    let mut out = StageOutput::default();
    let mut rows: Vec<ProductRow> = Vec::new();
    let mut discarded = 0;
    let mut n_reviews = 0;
    let mut inertia = serde_json::Map::new();
    let assignments_path = dataset.with_file_name("assignments.tsv");
    create_parent(dataset)?;
    let mut assign_out = BufWriter::new(File::create(&assignments_path)?);
    writeln!(assign_out, "category\treview_id\tcluster_id")?;

    for file in partition_files(ingest_dir)? {
        let reviews = read_reviews(&file)?;
        let Some(category) = reviews.first().map(|r| r.category.clone()) else { continue };
        n_reviews += reviews.len();
        let texts: Vec<&str> = reviews.iter().map(|r| r.body.as_str()).collect();
        let tfidf = match vectorize_tfidf(&texts) {
            Ok(t) => t,
            Err(ClusterError::EmptyCorpus) => {
                out.warn(format!("{category}: no tokens in any review; category skipped"));
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let mut p = *params;
        if p.k > reviews.len() {
            out.warn(format!("{category}: k = {} exceeds {} reviews; using k = {}", p.k, reviews.len(), reviews.len()));
            p.k = reviews.len();
        }
        let model = kmeans_fit(&tfidf.matrix, &p)?;
        inertia.insert(category.clone(), json!(model.inertia));
        for (r, c) in reviews.iter().zip(&model.assignments) {
            writeln!(assign_out, "{}\t{}\t{}", category, r.id, c)?;
        }
        let bodies: Vec<String> = reviews.iter().map(|r| r.body.clone()).collect();
        let assembly = assemble_rows(&model.assignments, &bodies, &category, group_size)?;
        discarded += assembly.discarded;
        rows.extend(assembly.rows);
    }
    assign_out.flush()?;
    write_dataset(dataset, &rows, group_size)?;
    out.outputs = vec![dataset.to_path_buf(), assignments_path];
    out.count("reviews", n_reviews);
    out.count("rows", rows.len());
    out.count("discarded", discarded);
    out.count("group_size", group_size);
    out.count("inertia", inertia);
    if rows.is_empty() {
        out.warn("no complete rows were assembled".into());
    }
    Ok(out)
}

// ---------------------------------------------------------------- moderate

pub enum ClassifierSpec<'a> {
    Local(Option<&'a Path>),
    Remote(&'a ApiClient),
}

pub fn moderate(
    dataset: &Path,
    classifier: ClassifierSpec<'_>,
    thresh: f64,
    max_in_flight: usize,
    out_dataset: &Path,
) -> Result<StageOutput> {
    let (group_size, rows) = read_dataset(dataset)?;
    let n = rows.len();
    let local;
    let remote;
    let cls: &dyn SafetyClassifier = match classifier {
        ClassifierSpec::Local(path) => {
            let lexicon = match path {
                Some(p) => Lexicon::load(p)?,
                None => Lexicon::builtin(),
            };
            local = LexiconClassifier { lexicon };
            &local
        }
        ClassifierSpec::Remote(api) => {
            remote = RemoteClassifier::new(api);
            &remote
        }
    };
    let outcome = filter_rows(rows, cls, thresh, max_in_flight);
    create_parent(out_dataset)?;
    write_dataset(out_dataset, &outcome.kept, group_size)?;
    let audit = out_dataset.with_file_name("audit.tsv");
    write_audit(&audit, &outcome.audit)?;
    let quarantine = out_dataset.with_file_name("quarantine.txt");
    let mut text = outcome.quarantined.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    std::fs::write(&quarantine, text)?;

    let mut out = StageOutput { outputs: vec![out_dataset.to_path_buf(), audit, quarantine], ..Default::default() };
    out.count("rows", n);
    out.count("kept", outcome.kept.len());
    out.count("dropped", outcome.dropped.len());
    out.count("quarantined", outcome.quarantined.len());
    out.count("thresh", thresh);
    if !outcome.quarantined.is_empty() {
        out.warn(format!("{} rows quarantined after classifier errors", outcome.quarantined.len()));
    }
    Ok(out)
}

// ---------------------------------------------------------------- prompt

pub fn annotation_map(path: &Path) -> Result<BTreeMap<String, Annotation>> {
    let mut map = BTreeMap::new();
    for (id, ann) in read_annotations(path)? {
        if map.insert(id.clone(), ann).is_some() {
            bail!("{}: row {id} is annotated twice", path.display());
        }
    }
    Ok(map)
}

pub fn prompt(dataset: &Path, annotations: &Path, prefix: &str, out_jsonl: &Path) -> Result<StageOutput> {
    let (_, rows) = read_dataset(dataset)?;
    let anns = annotation_map(annotations)?;
    let mut out = StageOutput::default();
    let mut examples = Vec::new();
    let mut missing = 0;
    for row in &rows {
        match anns.get(&row.row_id) {
            Some(ann) => examples.push(
                make_example(prefix, &row.reviews, ann)
                    .with_context(|| format!("building example for {}", row.row_id))?,
            ),
            None => missing += 1,
        }
    }
    if missing > 0 {
        out.warn(format!("{missing} rows have no annotation and were left out"));
    }
    if examples.is_empty() {
        bail!("no annotated rows in {}; nothing to train on", dataset.display());
    }
    create_parent(out_jsonl)?;
    to_jsonl(&examples, out_jsonl)?;
    let report = validate_jsonl(out_jsonl)?;
    if !report.is_ok() {
        bail!("generated training file failed validation:\n{report}");
    }
    for issue in &report.warnings {
        out.warn(format!("{}: line {}: {}", out_jsonl.display(), issue.line, issue.kind));
    }
    let used: BTreeSet<&str> = rows.iter().map(|r| r.row_id.as_str()).collect();
    out.count("rows", rows.len());
    out.count("examples", examples.len());
    out.count("rows_without_annotation", missing);
    out.count("unused_annotations", anns.keys().filter(|k| !used.contains(k.as_str())).count());
    out.outputs.push(out_jsonl.to_path_buf());
    Ok(out)
}

// ---------------------------------------------------------------- upload

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UploadRecord {
    pub file_id: String,
    pub path: String,
    pub bytes: u64,
}

pub fn upload(api: &ApiClient, ledger: Option<Ledger>, jsonl: &Path, out_json: &Path) -> Result<StageOutput> {
    let client = FineTuneClient::new(api, ledger);
    let file_id = client.upload_file(jsonl)?;
    let record = UploadRecord {
        file_id: file_id.clone(),
        path: jsonl.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        bytes: std::fs::metadata(jsonl)?.len(),
    };
    write_json(out_json, &record)?;
    let mut out = StageOutput { outputs: vec![out_json.to_path_buf()], ..Default::default() };
    out.count("file_id", file_id);
    out.count("bytes", record.bytes);
    Ok(out)
}

// ---------------------------------------------------------------- finetune

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub file_id: String,
    pub job_id: String,
    pub status: JobStatus,
    pub fine_tuned_model: Option<String>,
    pub failure_reason: Option<String>,
    pub hyperparams: Hyperparams,
}

impl From<&FineTuneJob> for JobRecord {
    fn from(j: &FineTuneJob) -> Self {
        Self {
            file_id: j.file_id.clone(),
            job_id: j.job_id.clone(),
            status: j.status,
            fine_tuned_model: j.fine_tuned_model.clone(),
            failure_reason: j.failure_reason.clone(),
            hyperparams: j.hyperparams.clone(),
        }
    }
}

pub struct PollSettings {
    pub interval: Duration,
    pub timeout: Duration,
}

/// Starts (or resumes) a fine-tune job for the uploaded file and waits for a
/// terminal status. A job recorded in `out_json` for the same file and
/// hyperparameters that has not finished yet is resumed instead of
/// resubmitted.
pub fn finetune(
    api: &ApiClient,
    ledger: Option<Ledger>,
    file_id: &str,
    hp: &Hyperparams,
    poll: &PollSettings,
    out_json: &Path,
) -> Result<StageOutput> {
    let client = FineTuneClient::new(api, ledger);
    let previous: Option<JobRecord> = out_json.exists().then(|| read_json(out_json)).transpose().ok().flatten();
    let mut out = StageOutput { outputs: vec![out_json.to_path_buf()], ..Default::default() };
    let job = match previous {
        Some(prev) if prev.file_id == file_id && &prev.hyperparams == hp && !prev.status.is_terminal() => {
            log::info!("resuming job {} (last seen {})", prev.job_id, prev.status.as_str());
            out.count("resumed", true);
            client.get_job(&prev.job_id, hp.clone())?
        }
        _ => client.create_finetune(file_id, hp, None)?,
    };
    let job = client.poll_job(job, poll.interval, poll.timeout)?;
    write_json(out_json, &JobRecord::from(&job))?;
    out.count("job_id", job.job_id.clone());
    out.count("status", job.status.as_str());
    match job.status {
        JobStatus::Succeeded => {
            out.count("fine_tuned_model", job.fine_tuned_model.clone().unwrap_or_default());
            Ok(out)
        }
        JobStatus::Failed | JobStatus::Cancelled => Err(anyhow!(
            "job {} {}: {}",
            job.job_id,
            job.status.as_str(),
            job.failure_reason.as_deref().unwrap_or("no reason given")
        )),
        _ => Err(anyhow!(
            "job {} still {} after {:?}; rerun to resume polling",
            job.job_id,
            job.status.as_str(),
            poll.timeout
        )),
    }
}

pub fn model_from_job(path: &Path) -> Result<String> {
    let rec: JobRecord = read_json(path)?;
    rec.fine_tuned_model.ok_or_else(|| {
        anyhow!("job {} in {} has no fine-tuned model ({})", rec.job_id, path.display(), rec.status.as_str())
    })
}

// ---------------------------------------------------------------- infer

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InferOutcome {
    Parsed { annotation: Annotation },
    ParseFailure { reason: String },
    Error { message: String },
}

/// One line of the inference results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferRecord {
    pub row_id: String,
    pub model: String,
    #[serde(flatten)]
    pub outcome: InferOutcome,
    pub raw_text: String,
}

pub fn read_row_filter(path: &Path) -> Result<BTreeSet<String>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut ids = BTreeSet::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        let id = line.trim();
        if !id.is_empty() && !id.starts_with('#') {
            ids.insert(id.to_owned());
        }
    }
    Ok(ids)
}

pub fn select_rows(rows: Vec<ProductRow>, filter: Option<&BTreeSet<String>>) -> Vec<ProductRow> {
    match filter {
        Some(ids) => rows.into_iter().filter(|r| ids.contains(&r.row_id)).collect(),
        None => rows,
    }
}

pub fn infer(
    api: &ApiClient,
    model: &str,
    dataset: &Path,
    filter: Option<&BTreeSet<String>>,
    settings: &InferenceSettings,
    max_in_flight: usize,
    out_jsonl: &Path,
) -> Result<StageOutput> {
    let (group_size, rows) = read_dataset(dataset)?;
    let rows = select_rows(rows, filter);
    if rows.is_empty() {
        bail!("no rows selected for inference from {}", dataset.display());
    }
    let settings = InferenceSettings { group_size, ..settings.clone() };
    let batch: Vec<Vec<String>> = rows.iter().map(|r| r.reviews.clone()).collect();
    let results = InferenceClient::new(api).summarize_batch(model, &batch, &settings, max_in_flight);

    let mut out = StageOutput::default();
    let (mut parsed, mut failures, mut errors) = (0, 0, 0);
    create_parent(out_jsonl)?;
    let mut w = BufWriter::new(File::create(out_jsonl)?);
    for (row, res) in rows.iter().zip(results) {
        let rec = match res {
            Ok(r) => {
                let outcome = match r.outcome {
                    SummaryOutcome::Parsed { annotation } => {
                        parsed += 1;
                        InferOutcome::Parsed { annotation }
                    }
                    SummaryOutcome::ParseFailure { reason } => {
                        failures += 1;
                        InferOutcome::ParseFailure { reason }
                    }
                };
                InferRecord { row_id: row.row_id.clone(), model: model.to_owned(), outcome, raw_text: r.raw_text }
            }
            Err(e) => {
                errors += 1;
                out.warn(format!("{}: {e}", row.row_id));
                InferRecord {
                    row_id: row.row_id.clone(),
                    model: model.to_owned(),
                    outcome: InferOutcome::Error { message: e.to_string() },
                    raw_text: String::new(),
                }
            }
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    out.outputs.push(out_jsonl.to_path_buf());
    out.count("rows", rows.len());
    out.count("parsed", parsed);
    out.count("parse_failures", failures);
    out.count("errors", errors);
    if errors == rows.len() {
        bail!("every inference request failed");
    }
    Ok(out)
}

pub fn read_results(path: &Path) -> Result<Vec<InferRecord>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

// ---------------------------------------------------------------- eval

pub enum EmbedderSpec<'a> {
    Static(&'a Path),
    Remote { api: &'a ApiClient, model: &'a str },
}

fn with_embedder<T>(spec: EmbedderSpec<'_>, f: impl FnOnce(&dyn Embedder) -> Result<T>) -> Result<T> {
    match spec {
        EmbedderSpec::Static(path) => f(&StaticEmbedder::load(path)?),
        EmbedderSpec::Remote { api, model } => f(&RemoteEmbedder::connect(api, model)?),
    }
}

/// Text compared by the metrics for one inference result.
fn candidate_text(rec: &InferRecord) -> Result<String> {
    Ok(match &rec.outcome {
        InferOutcome::Parsed { annotation } => render_summary(annotation)?,
        InferOutcome::ParseFailure { .. } => rec.raw_text.clone(),
        InferOutcome::Error { .. } => String::new(),
    })
}

pub fn eval(
    results: &Path,
    references: &Path,
    embedder: EmbedderSpec<'_>,
    use_idf: bool,
    max_in_flight: usize,
    out_dir: &Path,
) -> Result<StageOutput> {
    let records = read_results(results)?;
    let refs = annotation_map(references)?;
    let mut out = StageOutput::default();
    let mut triples = Vec::new();
    let mut unreferenced = 0;
    for rec in &records {
        match refs.get(&rec.row_id) {
            Some(ann) => triples.push((rec.row_id.clone(), candidate_text(rec)?, render_summary(ann)?)),
            None => unreferenced += 1,
        }
    }
    if unreferenced > 0 {
        out.warn(format!("{unreferenced} results have no reference annotation and were not scored"));
    }
    if triples.is_empty() {
        bail!("no results in {} have a reference in {}", results.display(), references.display());
    }
    let idf: Option<HashMap<String, f64>> =
        use_idf.then(|| idf_weights(&triples.iter().map(|t| t.2.as_str()).collect::<Vec<_>>()));
    let summary = with_embedder(embedder, |e| Ok(score_pairs(&triples, e, idf.as_ref(), max_in_flight)?))?;

    std::fs::create_dir_all(out_dir)?;
    let scores = out_dir.join("scores.tsv");
    write_pair_scores(&scores, &summary)?;
    let summary_path = out_dir.join("summary.json");
    write_json(
        &summary_path,
        &json!({ "pairs": summary.pairs.len(), "rouge1": summary.rouge1, "embed": summary.embed }),
    )?;
    let failures = records.iter().filter(|r| !matches!(r.outcome, InferOutcome::Parsed { .. })).count();
    out.outputs = vec![scores, summary_path];
    out.count("pairs", summary.pairs.len());
    out.count("unparsed_results", failures);
    out.count("rouge1_f1", summary.rouge1.f1);
    out.count("embed_f1", summary.embed.f1);
    Ok(out)
}

// ---------------------------------------------------------------- sweep

pub struct SweepInputs<'a> {
    pub train_jsonl: &'a Path,
    pub dataset: &'a Path,
    pub references: &'a Path,
    pub rows: Option<&'a BTreeSet<String>>,
    pub prefix: &'a str,
    /// Models already trained for some sizes; other sizes are fine-tuned.
    pub known_models: BTreeMap<usize, String>,
}

#[allow(clippy::too_many_arguments)]
pub fn sweep(
    api: &ApiClient,
    ledger: Option<Ledger>,
    sizes: &[usize],
    inputs: SweepInputs<'_>,
    hp: &Hyperparams,
    poll: &PollSettings,
    settings: &InferenceSettings,
    embedder: EmbedderSpec<'_>,
    max_in_flight: usize,
    out_dir: &Path,
) -> Result<StageOutput> {
    let sizes = reviewtune_core::evaluation::normalize_sweep_sizes(sizes);
    let examples = from_jsonl(inputs.train_jsonl)?;
    let client = FineTuneClient::new(api, ledger);
    let mut out = StageOutput::default();
    std::fs::create_dir_all(out_dir)?;
    let mut models = inputs.known_models.clone();
    for &size in &sizes {
        if models.contains_key(&size) {
            continue;
        }
        if examples.len() < size {
            out.warn(format!("only {} training examples; no model trained for size {size}", examples.len()));
            continue;
        }
        let subset = out_dir.join(format!("train_{size}.jsonl"));
        to_jsonl(&examples[..size], &subset)?;
        let file_id = client.upload_file(&subset)?;
        let job = client.create_finetune(&file_id, hp, None)?;
        let job = client.poll_job(job, poll.interval, poll.timeout)?;
        match (job.status, job.fine_tuned_model) {
            (JobStatus::Succeeded, Some(m)) => {
                models.insert(size, m);
            }
            (status, _) => out.warn(format!("size {size}: job {} ended {}", job.job_id, status.as_str())),
        }
    }

    let (_, rows) = read_dataset(inputs.dataset)?;
    let refs = annotation_map(inputs.references)?;
    let mut eval_set = Vec::new();
    for row in select_rows(rows, inputs.rows) {
        if let Some(ann) = refs.get(&row.row_id) {
            eval_set.push(EvalPair {
                id: row.row_id.clone(),
                prompt: build_prompt_with_prefix(inputs.prefix, &row.reviews)?,
                reference: render_summary(ann)?,
            });
        }
    }
    let source = ModelSource { client: InferenceClient::new(api), settings: settings.clone() };
    let report = with_embedder(embedder, |e| Ok(size_sweep(&sizes, &models, &eval_set, &source, e, max_in_flight)?))?;
    for w in &report.warnings {
        out.warnings.push(w.clone());
    }
    let table = out_dir.join("sweep.tsv");
    let plot = out_dir.join("sweep_plot.tsv");
    write_sweep_report(&report, &table, &plot)?;
    out.outputs = vec![table, plot];
    out.count("sizes", sizes.len());
    out.count("rows_reported", report.rows.len());
    out.count("eval_pairs", eval_set.len());
    Ok(out)
}
