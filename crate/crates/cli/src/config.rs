//! Pipeline configuration, read from a TOML file. Every field has a default,
//! so an empty file (or no file) is a valid configuration.

use std::path::{Path, PathBuf};

use anyhow::Context;
use reviewtune_api::finetune::Hyperparams;
use reviewtune_api::http::ApiConfig;
use reviewtune_api::inference::{DEFAULT_MAX_TOKENS, DEFAULT_TEMPERATURE};
use reviewtune_core::clustering::{DEFAULT_GROUP_SIZE, DEFAULT_K};
use reviewtune_core::corpus::{ColumnMap, DEFAULT_MIN_LEN};
use reviewtune_core::evaluation::DEFAULT_SWEEP_SIZES;
use reviewtune_core::moderation::DEFAULT_THRESHOLD;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Stage artifacts and reports live under this directory.
    pub work_dir: PathBuf,
    pub ingest: IngestConfig,
    pub cluster: ClusterConfig,
    pub moderate: ModerateConfig,
    pub prompt: PromptConfig,
    pub api: ApiConfig,
    pub finetune: FinetuneConfig,
    pub infer: InferConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            work_dir: PathBuf::from("work"),
            ingest: IngestConfig::default(),
            cluster: ClusterConfig::default(),
            moderate: ModerateConfig::default(),
            prompt: PromptConfig::default(),
            api: ApiConfig::default(),
            finetune: FinetuneConfig::default(),
            infer: InferConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormatChoice {
    /// Pick by file extension (`.csv` is comma-separated, anything else TSV).
    Auto,
    Tsv,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub inputs: Vec<PathBuf>,
    pub format: FormatChoice,
    pub columns: ColumnMap,
    pub min_len: usize,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self { inputs: Vec::new(), format: FormatChoice::Auto, columns: ColumnMap::default(), min_len: DEFAULT_MIN_LEN }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub k: usize,
    pub group_size: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub n_init: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self { k: DEFAULT_K, group_size: DEFAULT_GROUP_SIZE, max_iter: 300, tol: 1e-4, n_init: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierChoice {
    Local,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModerateConfig {
    pub thresh: f64,
    pub classifier: ClassifierChoice,
    /// Lexicon for the local classifier; the built-in one when unset.
    pub lexicon: Option<PathBuf>,
    pub max_in_flight: usize,
}

impl Default for ModerateConfig {
    fn default() -> Self {
        Self { thresh: DEFAULT_THRESHOLD, classifier: ClassifierChoice::Local, lexicon: None, max_in_flight: 8 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    /// Annotation table (row_id, pros, cons, verdict); also the evaluation
    /// references.
    pub annotations: Option<PathBuf>,
    pub prefix: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub hyperparams: Hyperparams,
    pub poll_interval_ms: u64,
    pub poll_timeout_s: u64,
    /// Append-only job ledger; `<work_dir>/finetune/ledger.jsonl` when unset.
    pub ledger: Option<PathBuf>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { hyperparams: Hyperparams::default(), poll_interval_ms: 5_000, poll_timeout_s: 3_600, ledger: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    /// Model to query; the model produced by the finetune stage when unset.
    pub model: Option<String>,
    /// File with one row id per line selecting the rows to summarize; all
    /// moderated rows when unset.
    pub rows: Option<PathBuf>,
    pub max_tokens: u32,
    pub temperature: f64,
    pub strict: bool,
    pub max_in_flight: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            model: None,
            rows: None,
            max_tokens: DEFAULT_MAX_TOKENS,
            temperature: DEFAULT_TEMPERATURE,
            strict: true,
            max_in_flight: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderChoice {
    Static,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub embedder: EmbedderChoice,
    /// Static embedding file (token followed by floats, one per line).
    pub embeddings: Option<PathBuf>,
    pub embed_model: String,
    /// Weight tokens by inverse document frequency over the references.
    pub idf: bool,
    pub sweep_sizes: Vec<usize>,
    pub max_in_flight: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            embedder: EmbedderChoice::Static,
            embeddings: None,
            embed_model: "text-embedding-mock".into(),
            idf: false,
            sweep_sizes: DEFAULT_SWEEP_SIZES.to_vec(),
            max_in_flight: 8,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: Self = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.resolve_relative_to(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Makes relative paths in the file relative to the file's directory.
    fn resolve_relative_to(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.work_dir);
        self.ingest.inputs.iter_mut().for_each(fix);
        for p in [
            &mut self.moderate.lexicon,
            &mut self.prompt.annotations,
            &mut self.finetune.ledger,
            &mut self.infer.rows,
            &mut self.eval.embeddings,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn ledger_path(&self) -> PathBuf {
        self.finetune.ledger.clone().unwrap_or_else(|| self.work_dir.join("finetune").join("ledger.jsonl"))
    }
}
