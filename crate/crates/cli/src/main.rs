use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use reviewtune_api::finetune::{FineTuneClient, Ledger};
use reviewtune_api::http::ApiClient;
use reviewtune_api::mock::{MockServer, Script};
use reviewtune_cli::config::{ClassifierChoice, EmbedderChoice, PipelineConfig};
use reviewtune_cli::pipeline::{parse_stages, Pipeline, STATUS_OK, STATUS_SKIPPED};
use reviewtune_cli::stages::{self, ClassifierSpec, EmbedderSpec, PollSettings, StageOutput, SweepInputs};
use reviewtune_core::clustering::KMeansParams;
use reviewtune_core::corpus::InputFormat;
use reviewtune_core::prompting::validate_jsonl;

#[derive(Parser)]
#[command(name = "reviewtune", version, about = "Prepare review data, fine-tune a summarizer and evaluate it")]
struct Cli {
    /// TOML configuration; command-line flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// API base URL (overrides [api].base_url).
    #[arg(long, global = true)]
    api_url: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Tsv,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Load review dumps, drop short reviews and split them by category.
    Ingest(IngestArgs),
    /// Cluster each category and assemble fixed-size product rows.
    Cluster(ClusterArgs),
    /// Drop rows containing reviews the safety classifier rejects.
    Moderate(ModerateArgs),
    /// Build the prompt/completion training file from rows and annotations.
    Prompt(PromptArgs),
    /// Check a training file without uploading it.
    Validate {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Upload a training file and print its file id.
    Upload {
        #[arg(long)]
        file: PathBuf,
    },
    /// Start a fine-tune job and wait for it to finish.
    Finetune(FinetuneArgs),
    /// Show the current state of a fine-tune job.
    Status { job_id: String },
    /// Summarize product rows with a model.
    Infer(InferArgs),
    /// Score inference results against reference annotations.
    Eval(EvalArgs),
    /// Fine-tune on growing training subsets and score each model.
    Sweep(SweepArgs),
    /// Serve the offline mock API until interrupted.
    MockServer {
        #[arg(long)]
        script: Option<PathBuf>,
        #[arg(long, default_value_t = 8089)]
        port: u16,
    },
    /// Run pipeline stages with dependency checks and up-to-date skipping.
    Run(RunArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Input review files (TSV, or CSV by extension).
    #[arg(long = "input", num_args = 1..)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    format: Option<Format>,
    #[arg(long)]
    col_id: Option<String>,
    #[arg(long)]
    col_category: Option<String>,
    #[arg(long)]
    col_body: Option<String>,
    #[arg(long)]
    col_rating: Option<String>,
    #[arg(long)]
    min_len: Option<usize>,
}

#[derive(Args)]
struct ClusterArgs {
    /// Directory written by `ingest`.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output dataset file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_init: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Classifier {
    Local,
    Remote,
}

#[derive(Args)]
struct ModerateArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Kept rows; audit.tsv and quarantine.txt are written next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, allow_negative_numbers = true)]
    thresh: Option<f64>,
    #[arg(long, value_enum)]
    classifier: Option<Classifier>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
}

#[derive(Args)]
struct PromptArgs {
    /// Dataset of product rows.
    #[arg(long)]
    rows: PathBuf,
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    prefix: Option<String>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    file_id: String,
    #[arg(long)]
    engine: Option<String>,
    #[arg(long)]
    batch_size: Option<u32>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    padding: Option<bool>,
    /// Where to record the job; printed to stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    model: String,
    /// Dataset of product rows to summarize.
    #[arg(long)]
    reviews: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// File of row ids (one per line) to restrict inference to.
    #[arg(long)]
    rows: Option<PathBuf>,
    /// Accept rows whose review count differs from the dataset's group size.
    #[arg(long)]
    lenient: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Inference results (JSON lines).
    #[arg(long)]
    candidates: PathBuf,
    /// Reference annotation table.
    #[arg(long)]
    references: PathBuf,
    /// Static embedding file; the remote embedder is used when omitted and
    /// configured.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    idf: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated training sizes; 485 is always included.
    #[arg(long, value_delimiter = ',')]
    sizes: Vec<usize>,
    #[arg(long)]
    train: PathBuf,
    /// Dataset of product rows to evaluate on.
    #[arg(long)]
    eval_rows: PathBuf,
    #[arg(long)]
    references: PathBuf,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Restrict evaluation to these row ids (one per line).
    #[arg(long)]
    rows: Option<PathBuf>,
    /// Use an existing model for a size instead of training: SIZE=MODEL.
    #[arg(long = "model")]
    models: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// `all` or a comma-separated list of stages.
    #[arg(long, default_value = "all")]
    stages: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Print what would run and exit.
    #[arg(long)]
    dry_run: bool,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(url) = &cli.api_url {
        cfg.api.base_url = url.clone();
    }
    Ok(cfg)
}

fn print_output(stage: &str, out: &StageOutput) {
    println!("{stage}: {}", serde_json::to_string(&out.counts).unwrap_or_default());
    for p in &out.outputs {
        println!("  wrote {}", p.display());
    }
}

fn embedder_spec<'a>(
    cfg: &'a PipelineConfig,
    file: Option<&'a Path>,
    api: &'a Option<ApiClient>,
) -> Result<EmbedderSpec<'a>> {
    if let Some(f) = file.or(cfg.eval.embeddings.as_deref()) {
        if cfg.eval.embedder == EmbedderChoice::Static || file.is_some() {
            return Ok(EmbedderSpec::Static(f));
        }
    }
    match (cfg.eval.embedder, api) {
        (EmbedderChoice::Remote, Some(api)) => Ok(EmbedderSpec::Remote { api, model: &cfg.eval.embed_model }),
        _ => bail!("no embeddings: pass --embeddings or configure [eval]"),
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Ingest(a) => {
            let mut columns = cfg.ingest.columns.clone();
            if let Some(v) = a.col_id {
                columns.id = v;
            }
            if let Some(v) = a.col_category {
                columns.category = v;
            }
            if let Some(v) = a.col_body {
                columns.body = v;
            }
            if let Some(v) = a.col_rating {
                columns.rating = Some(v);
            }
            let inputs = if a.inputs.is_empty() { cfg.ingest.inputs.clone() } else { a.inputs };
            let format = a.format.map(|f| match f {
                Format::Tsv => InputFormat::Tsv,
                Format::Csv => InputFormat::Csv,
            });
            let out = stages::ingest(&inputs, format, &columns, a.min_len.unwrap_or(cfg.ingest.min_len), &a.out)?;
            print_output("ingest", &out);
        }
        Command::Cluster(a) => {
            let params = KMeansParams {
                k: a.k.unwrap_or(cfg.cluster.k),
                seed: a.seed.unwrap_or(cfg.seed),
                max_iter: cfg.cluster.max_iter,
                tol: cfg.cluster.tol,
                n_init: a.n_init.unwrap_or(cfg.cluster.n_init),
            };
            let out = stages::cluster(&a.input, &params, a.group_size.unwrap_or(cfg.cluster.group_size), &a.out)?;
            print_output("cluster", &out);
        }
        Command::Moderate(a) => {
            let choice = match a.classifier {
                Some(Classifier::Local) => ClassifierChoice::Local,
                Some(Classifier::Remote) => ClassifierChoice::Remote,
                None => cfg.moderate.classifier,
            };
            let lexicon = a.lexicon.or(cfg.moderate.lexicon.clone());
            let api;
            let spec = match choice {
                ClassifierChoice::Local => ClassifierSpec::Local(lexicon.as_deref()),
                ClassifierChoice::Remote => {
                    api = ApiClient::new(cfg.api.clone())?;
                    ClassifierSpec::Remote(&api)
                }
            };
            let thresh = a.thresh.unwrap_or(cfg.moderate.thresh);
            let out = stages::moderate(&a.input, spec, thresh, cfg.moderate.max_in_flight, &a.out)?;
            print_output("moderate", &out);
        }
        Command::Prompt(a) => {
            let ann = a.annotations.or(cfg.prompt.annotations.clone()).context("--annotations is required")?;
            let prefix = a.prefix.unwrap_or(cfg.prompt.prefix.clone());
            let out = stages::prompt(&a.rows, &ann, &prefix, &a.out)?;
            print_output("prompt", &out);
        }
        Command::Validate { input } => {
            let report = validate_jsonl(&input)?;
            print!("{report}");
            if !report.is_ok() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Upload { file } => {
            let api = ApiClient::new(cfg.api.clone())?;
            let id = FineTuneClient::new(&api, Some(Ledger::new(cfg.ledger_path()))).upload_file(&file)?;
            println!("{id}");
        }
        Command::Finetune(a) => {
            let hp = &mut cfg.finetune.hyperparams;
            if let Some(v) = a.engine {
                hp.engine = v;
            }
            if let Some(v) = a.batch_size {
                hp.batch_size = v;
            }
            if let Some(v) = a.epochs {
                hp.n_epochs = v;
            }
            if let Some(v) = a.lr {
                hp.learning_rate = v;
            }
            if let Some(v) = a.padding {
                hp.use_padding = v;
            }
            let api = ApiClient::new(cfg.api.clone())?;
            let poll = PollSettings {
                interval: std::time::Duration::from_millis(cfg.finetune.poll_interval_ms),
                timeout: std::time::Duration::from_secs(cfg.finetune.poll_timeout_s),
            };
            let out_path = a.out.unwrap_or_else(|| cfg.work_dir.join("finetune").join("job.json"));
            let ledger = Some(Ledger::new(cfg.ledger_path()));
            let out = stages::finetune(&api, ledger, &a.file_id, &cfg.finetune.hyperparams, &poll, &out_path)?;
            print_output("finetune", &out);
        }
        Command::Status { job_id } => {
            let api = ApiClient::new(cfg.api.clone())?;
            let job = FineTuneClient::new(&api, None).get_job(&job_id, cfg.finetune.hyperparams.clone())?;
            println!("{}", serde_json::to_string_pretty(&stages::JobRecord::from(&job))?);
        }
        Command::Infer(a) => {
            let api = ApiClient::new(cfg.api.clone())?;
            let filter = a.rows.or(cfg.infer.rows.clone()).as_deref().map(stages::read_row_filter).transpose()?;
            let settings = reviewtune_api::inference::InferenceSettings {
                max_tokens: cfg.infer.max_tokens,
                temperature: cfg.infer.temperature,
                group_size: cfg.cluster.group_size,
                strict: cfg.infer.strict && !a.lenient,
                prompt_prefix: cfg.prompt.prefix.clone(),
            };
            let out =
                stages::infer(&api, &a.model, &a.reviews, filter.as_ref(), &settings, cfg.infer.max_in_flight, &a.out)?;
            print_output("infer", &out);
        }
        Command::Eval(a) => {
            let api =
                (cfg.eval.embedder == EmbedderChoice::Remote).then(|| ApiClient::new(cfg.api.clone())).transpose()?;
            let spec = embedder_spec(&cfg, a.embeddings.as_deref(), &api)?;
            let out = stages::eval(
                &a.candidates,
                &a.references,
                spec,
                a.idf || cfg.eval.idf,
                cfg.eval.max_in_flight,
                &a.out,
            )?;
            print_output("eval", &out);
        }
        Command::Sweep(a) => {
            let api = ApiClient::new(cfg.api.clone())?;
            let mut known = BTreeMap::new();
            for m in &a.models {
                let (size, model) = m.split_once('=').with_context(|| format!("--model {m:?} is not SIZE=MODEL"))?;
                known.insert(
                    size.trim().parse::<usize>().with_context(|| format!("bad size in {m:?}"))?,
                    model.to_owned(),
                );
            }
            let sizes = if a.sizes.is_empty() { cfg.eval.sweep_sizes.clone() } else { a.sizes.clone() };
            let filter = a.rows.as_deref().map(stages::read_row_filter).transpose()?;
            let embed_api =
                (cfg.eval.embedder == EmbedderChoice::Remote).then(|| ApiClient::new(cfg.api.clone())).transpose()?;
            let spec = embedder_spec(&cfg, a.embeddings.as_deref(), &embed_api)?;
            let poll = PollSettings {
                interval: std::time::Duration::from_millis(cfg.finetune.poll_interval_ms),
                timeout: std::time::Duration::from_secs(cfg.finetune.poll_timeout_s),
            };
            let settings = reviewtune_api::inference::InferenceSettings {
                max_tokens: cfg.infer.max_tokens,
                temperature: cfg.infer.temperature,
                group_size: cfg.cluster.group_size,
                strict: false,
                prompt_prefix: cfg.prompt.prefix.clone(),
            };
            let inputs = SweepInputs {
                train_jsonl: &a.train,
                dataset: &a.eval_rows,
                references: &a.references,
                rows: filter.as_ref(),
                prefix: &cfg.prompt.prefix,
                known_models: known,
            };
            let out = stages::sweep(
                &api,
                Some(Ledger::new(cfg.ledger_path())),
                &sizes,
                inputs,
                &cfg.finetune.hyperparams,
                &poll,
                &settings,
                spec,
                cfg.eval.max_in_flight,
                &a.out,
            )?;
            print_output("sweep", &out);
        }
        Command::MockServer { script, port } => {
            let script = match script {
                Some(p) => Script::load(&p)?,
                None => Script::default(),
            };
            let server = MockServer::serve(script, port)?;
            println!("mock API listening on {}", server.base_url());
            server.wait();
        }
        Command::Run(a) => {
            if let Some(seed) = a.seed {
                cfg.seed = seed;
            }
            let stages = parse_stages(&a.stages)?;
            let pipeline = Pipeline::new(cfg);
            if a.dry_run {
                for (stage, action) in pipeline.plan(&stages)? {
                    println!("{stage}: {action}");
                }
                return Ok(ExitCode::SUCCESS);
            }
            let outcome = pipeline.run(&stages)?;
            for r in &outcome.reports {
                match &r.error {
                    Some(e) => println!("{}: {} ({e})", r.stage, r.status),
                    None if r.status == STATUS_OK || r.status == STATUS_SKIPPED => {
                        println!("{}: {} {}", r.stage, r.status, serde_json::to_string(&r.counts).unwrap_or_default())
                    }
                    None => println!("{}: {}", r.stage, r.status),
                }
            }
            if !outcome.success {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
