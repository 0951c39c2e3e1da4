//! Summary metrics: unigram ROUGE and greedy embedding matching, plus the
//! training-size sweep report.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::tsv_writer;
use crate::par::bounded_map;
pub use crate::text::tokenize;

pub const DEFAULT_SWEEP_SIZES: [usize; 5] = [50, 100, 200, 350, 485];
/// Training size that every sweep reports.
pub const REQUIRED_SWEEP_SIZE: usize = 485;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("embedding failed: {0}")]
    Embed(String),
    #[error("embedding file {path} line {line}: {detail}")]
    EmbeddingFormat { path: PathBuf, line: usize, detail: String },
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("delimited file error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreTriple {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ScoreTriple {
    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Self { precision, recall, f1 }
    }

    pub const ONE: ScoreTriple = ScoreTriple { precision: 1.0, recall: 1.0, f1: 1.0 };

    pub fn mean(items: &[ScoreTriple]) -> ScoreTriple {
        if items.is_empty() {
            return ScoreTriple::default();
        }
        let n = items.len() as f64;
        let sum = items.iter().fold([0.0; 3], |acc, s| [acc[0] + s.precision, acc[1] + s.recall, acc[2] + s.f1]);
        ScoreTriple { precision: sum[0] / n, recall: sum[1] / n, f1: sum[2] / n }
    }
}

fn counts(tokens: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

/// Unigram ROUGE with clipped counts. Both sides empty scores 1, one side
/// empty scores 0.
pub fn rouge1(candidate: &str, reference: &str) -> ScoreTriple {
    let cand = tokenize(candidate);
    let refr = tokenize(reference);
    match (cand.is_empty(), refr.is_empty()) {
        (true, true) => return ScoreTriple::ONE,
        (true, false) | (false, true) => return ScoreTriple::default(),
        _ => {}
    }
    let rc = counts(&refr);
    let overlap: usize = counts(&cand).iter().map(|(t, &c)| c.min(rc.get(t).copied().unwrap_or(0))).sum();
    ScoreTriple::from_pr(overlap as f64 / cand.len() as f64, overlap as f64 / refr.len() as f64)
}

/// Maps tokens to fixed-dimension vectors.
pub trait Embedder: Sync {
    fn dim(&self) -> usize;
    fn embed(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>, EvalError>;
}

/// Word vectors loaded from a text file of `token v1 v2 ...` lines.
///
/// Tokens missing from the table get a deterministic pseudo-random unit
/// vector derived from the token bytes, so a token always matches itself.
#[derive(Debug, Clone, Default)]
pub struct StaticEmbedder {
    dim: usize,
    table: HashMap<String, Vec<f64>>,
}

impl StaticEmbedder {
    pub fn new(dim: usize, table: HashMap<String, Vec<f64>>) -> Self {
        assert!(table.values().all(|v| v.len() == dim), "inconsistent vector dimension");
        Self { dim, table }
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let file = File::open(path).map_err(|source| EvalError::Io { path: path.into(), source })?;
        let mut dim = None;
        let mut table = HashMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| EvalError::Io { path: path.into(), source })?;
            let fmt = |detail: String| EvalError::EmbeddingFormat { path: path.into(), line: i + 1, detail };
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let vector: Vec<f64> =
                parts.map(|p| p.parse::<f64>().map_err(|e| fmt(format!("{p:?}: {e}")))).collect::<Result<_, _>>()?;
            // A leading "<count> <dim>" header line as written by word2vec.
            if i == 0 && vector.len() == 1 && token.parse::<usize>().is_ok() {
                continue;
            }
            if vector.is_empty() {
                return Err(fmt("token without a vector".into()));
            }
            match dim {
                None => dim = Some(vector.len()),
                Some(d) if d != vector.len() => {
                    return Err(fmt(format!("expected {d} components, found {}", vector.len())))
                }
                _ => {}
            }
            table.insert(token.to_lowercase(), vector);
        }
        let dim =
            dim.ok_or_else(|| EvalError::EmbeddingFormat { path: path.into(), line: 0, detail: "no vectors".into() })?;
        Ok(Self { dim, table })
    }

    fn fallback(&self, token: &str) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim);
        let mut counter = 0u32;
        while out.len() < self.dim {
            let digest = Sha256::new().chain_update(token.as_bytes()).chain_update(counter.to_le_bytes()).finalize();
            for chunk in digest.chunks_exact(4) {
                if out.len() == self.dim {
                    break;
                }
                let v = u32::from_le_bytes(chunk.try_into().unwrap());
                out.push(v as f64 / u32::MAX as f64 * 2.0 - 1.0);
            }
            counter += 1;
        }
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            out.iter_mut().for_each(|v| *v /= norm);
        }
        out
    }
}

impl Embedder for StaticEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>, EvalError> {
        Ok(tokens.iter().map(|t| self.table.get(t).cloned().unwrap_or_else(|| self.fallback(t))).collect())
    }
}

/// Cosine similarity; 0 when either vector is zero, exactly 1 for equal
/// non-zero vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else if a == b {
        1.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbedScore {
    pub score: ScoreTriple,
    /// Set when either side had no tokens.
    pub empty: bool,
}

/// Greedy matching: each token takes its best cosine similarity against the
/// other side. Recall averages over reference tokens, precision over
/// candidate tokens; with `idf` the averages are weighted (tokens missing from
/// the map weigh 1). Best matches are clamped to `[0, 1]`.
pub fn embed_score(
    candidate: &str,
    reference: &str,
    embedder: &dyn Embedder,
    idf: Option<&HashMap<String, f64>>,
) -> Result<EmbedScore, EvalError> {
    let cand = tokenize(candidate);
    let refr = tokenize(reference);
    if cand.is_empty() || refr.is_empty() {
        let score = if cand.is_empty() && refr.is_empty() { ScoreTriple::ONE } else { ScoreTriple::default() };
        return Ok(EmbedScore { score, empty: true });
    }
    let cv = embedder.embed(&cand)?;
    let rv = embedder.embed(&refr)?;
    if cv.len() != cand.len() || rv.len() != refr.len() {
        return Err(EvalError::Embed("embedder returned the wrong number of vectors".into()));
    }
    let dim = embedder.dim();
    if cv.iter().chain(&rv).any(|v| v.len() != dim) {
        return Err(EvalError::Embed(format!("embedder returned vectors not of dimension {dim}")));
    }

    let mut best_for_cand = vec![f64::NEG_INFINITY; cand.len()];
    let mut best_for_ref = vec![f64::NEG_INFINITY; refr.len()];
    for (i, c) in cv.iter().enumerate() {
        for (j, r) in rv.iter().enumerate() {
            let s = cosine(c, r);
            best_for_cand[i] = best_for_cand[i].max(s);
            best_for_ref[j] = best_for_ref[j].max(s);
        }
    }
    let weighted = |tokens: &[String], best: &[f64]| -> f64 {
        let weights: Vec<f64> = tokens.iter().map(|t| idf.map_or(1.0, |m| m.get(t).copied().unwrap_or(1.0))).collect();
        let total: f64 = weights.iter().sum();
        let (weights, total) =
            if total > 0.0 { (weights, total) } else { (vec![1.0; tokens.len()], tokens.len() as f64) };
        let sum: f64 = best.iter().zip(&weights).map(|(b, w)| b.clamp(0.0, 1.0) * w).sum();
        (sum / total).clamp(0.0, 1.0)
    };
    let precision = weighted(&cand, &best_for_cand);
    let recall = weighted(&refr, &best_for_ref);
    Ok(EmbedScore { score: ScoreTriple::from_pr(precision, recall), empty: false })
}

/// Inverse document frequencies over a reference collection, smoothed the
/// same way as the vectorizer.
pub fn idf_weights<S: AsRef<str>>(documents: &[S]) -> HashMap<String, f64> {
    let mut df: HashMap<String, usize> = HashMap::new();
    for d in documents {
        let mut toks = tokenize(d.as_ref());
        toks.sort();
        toks.dedup();
        for t in toks {
            *df.entry(t).or_insert(0) += 1;
        }
    }
    let n = documents.len() as f64;
    df.into_iter().map(|(t, d)| (t, ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0)).collect()
}

/// One scored candidate/reference pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub id: String,
    pub rouge1: ScoreTriple,
    pub embed: EmbedScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub pairs: Vec<PairScore>,
    pub rouge1: ScoreTriple,
    pub embed: ScoreTriple,
}

/// Scores `(id, candidate, reference)` triples in parallel; means are reduced
/// in input order.
pub fn score_pairs(
    pairs: &[(String, String, String)],
    embedder: &dyn Embedder,
    idf: Option<&HashMap<String, f64>>,
    max_in_flight: usize,
) -> Result<EvalSummary, EvalError> {
    let scored: Vec<Result<PairScore, EvalError>> = bounded_map(pairs, max_in_flight, |(id, c, r)| {
        Ok(PairScore { id: id.clone(), rouge1: rouge1(c, r), embed: embed_score(c, r, embedder, idf)? })
    });
    let pairs = scored.into_iter().collect::<Result<Vec<_>, _>>()?;
    let rouge: Vec<ScoreTriple> = pairs.iter().map(|p| p.rouge1).collect();
    let embed: Vec<ScoreTriple> = pairs.iter().map(|p| p.embed.score).collect();
    Ok(EvalSummary { rouge1: ScoreTriple::mean(&rouge), embed: ScoreTriple::mean(&embed), pairs })
}

/// Produces candidate summaries for the sweep (a served model or a stub).
pub trait CompletionSource: Sync {
    fn generate(&self, model: &str, prompt: &str) -> Result<String, String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub id: String,
    pub prompt: String,
    pub reference: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub train_size: usize,
    pub model: String,
    pub rouge1: ScoreTriple,
    pub embed_score: ScoreTriple,
    pub n_eval: usize,
    pub generation_failures: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub warnings: Vec<String>,
}

/// Sweep sizes with the required 485 size added when absent, sorted and
/// deduplicated.
pub fn normalize_sweep_sizes(sizes: &[usize]) -> Vec<usize> {
    let mut s = sizes.to_vec();
    s.push(REQUIRED_SWEEP_SIZE);
    s.sort_unstable();
    s.dedup();
    s
}

/// Scores every model in `models` (keyed by training size) against the
/// evaluation set. Sizes without a model are skipped with a warning;
/// candidates that fail to generate score as empty text.
pub fn size_sweep(
    sizes: &[usize],
    models: &BTreeMap<usize, String>,
    eval_set: &[EvalPair],
    source: &dyn CompletionSource,
    embedder: &dyn Embedder,
    max_in_flight: usize,
) -> Result<SweepReport, EvalError> {
    if eval_set.is_empty() {
        return Err(EvalError::EmptyEvalSet);
    }
    let mut report = SweepReport::default();
    for size in normalize_sweep_sizes(sizes) {
        let Some(model) = models.get(&size) else {
            let msg = format!("no model for train_size {size}; row skipped");
            log::warn!("{msg}");
            report.warnings.push(msg);
            continue;
        };
        let generated = bounded_map(eval_set, max_in_flight, |p| source.generate(model, &p.prompt));
        let mut failures = 0;
        let triples: Vec<(String, String, String)> = eval_set
            .iter()
            .zip(generated)
            .map(|(p, g)| {
                let cand = g.unwrap_or_else(|e| {
                    log::warn!("generation failed for {} with {model}: {e}", p.id);
                    failures += 1;
                    String::new()
                });
                (p.id.clone(), cand, p.reference.clone())
            })
            .collect();
        let summary = score_pairs(&triples, embedder, None, max_in_flight)?;
        report.rows.push(SweepRow {
            train_size: size,
            model: model.clone(),
            rouge1: summary.rouge1,
            embed_score: summary.embed,
            n_eval: eval_set.len(),
            generation_failures: failures,
        });
    }
    Ok(report)
}

fn fmt_score(v: f64) -> String {
    format!("{v:.6}")
}

pub fn write_sweep_report(report: &SweepReport, table: &Path, plot: &Path) -> Result<(), EvalError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| EvalError::Io { path, source }
    };
    let mut w = tsv_writer(File::create(table).map_err(io(table))?);
    w.write_record([
        "train_size",
        "model",
        "n_eval",
        "rouge1_p",
        "rouge1_r",
        "rouge1_f1",
        "embed_p",
        "embed_r",
        "embed_f1",
        "generation_failures",
    ])?;
    for r in &report.rows {
        w.write_record([
            r.train_size.to_string(),
            r.model.clone(),
            r.n_eval.to_string(),
            fmt_score(r.rouge1.precision),
            fmt_score(r.rouge1.recall),
            fmt_score(r.rouge1.f1),
            fmt_score(r.embed_score.precision),
            fmt_score(r.embed_score.recall),
            fmt_score(r.embed_score.f1),
            r.generation_failures.to_string(),
        ])?;
    }
    w.flush().map_err(io(table))?;

    let mut f = File::create(plot).map_err(io(plot))?;
    writeln!(f, "train_size\trouge1_f1\tembed_f1").map_err(io(plot))?;
    for r in &report.rows {
        writeln!(f, "{}\t{}\t{}", r.train_size, fmt_score(r.rouge1.f1), fmt_score(r.embed_score.f1))
            .map_err(io(plot))?;
    }
    Ok(())
}

pub fn write_pair_scores(path: &Path, summary: &EvalSummary) -> Result<(), EvalError> {
    let mut w = tsv_writer(File::create(path).map_err(|source| EvalError::Io { path: path.into(), source })?);
    w.write_record(["id", "rouge1_p", "rouge1_r", "rouge1_f1", "embed_p", "embed_r", "embed_f1", "embed_empty"])?;
    let mut rows: Vec<(String, ScoreTriple, ScoreTriple, String)> =
        summary.pairs.iter().map(|p| (p.id.clone(), p.rouge1, p.embed.score, p.embed.empty.to_string())).collect();
    rows.push(("MEAN".into(), summary.rouge1, summary.embed, String::new()));
    for (id, r, e, empty) in rows {
        w.write_record([
            id,
            fmt_score(r.precision),
            fmt_score(r.recall),
            fmt_score(r.f1),
            fmt_score(e.precision),
            fmt_score(e.recall),
            fmt_score(e.f1),
            empty,
        ])?;
    }
    w.flush().map_err(|source| EvalError::Io { path: path.into(), source })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(entries: &[(&str, Vec<f64>)]) -> StaticEmbedder {
        let dim = entries[0].1.len();
        StaticEmbedder::new(dim, entries.iter().map(|(t, v)| (t.to_string(), v.clone())).collect())
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge1("good phone", "Good, phone!"), ScoreTriple::ONE);
        let s = rouge1("the cat sat", "the cat ran");
        assert!((s.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(rouge1("a b", "c d"), ScoreTriple::default());
        assert_eq!(rouge1("", ""), ScoreTriple::ONE);
        assert_eq!(rouge1("", "x"), ScoreTriple::default());
        // Clipping: "the the the" vs "the cat" overlaps once.
        let s = rouge1("the the the", "the cat");
        assert_eq!((s.precision, s.recall), (1.0 / 3.0, 0.5));
    }

    #[test]
    fn embed_examples() {
        let e = table(&[("v1", vec![1.0, 0.0]), ("v2", vec![0.0, 1.0]), ("z", vec![0.0, 0.0])]);
        let s = embed_score("v1", "v1 v2", &e, None).unwrap();
        assert_eq!((s.score.precision, s.score.recall), (1.0, 0.5));
        assert!((s.score.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(embed_score("v1", "v2", &e, None).unwrap().score, ScoreTriple::default());
        assert_eq!(embed_score("z", "z", &e, None).unwrap().score, ScoreTriple::default());
        let same = embed_score("unseen words here", "unseen words here", &e, None).unwrap();
        assert!((same.score.f1 - 1.0).abs() < 1e-12);
        let empty = embed_score("", "v1", &e, None).unwrap();
        assert!(empty.empty && empty.score == ScoreTriple::default());
        assert_eq!(embed_score("...", "", &e, None).unwrap().score, ScoreTriple::ONE);
    }

    #[test]
    fn embed_idf_weighting() {
        let e = table(&[("v1", vec![1.0, 0.0]), ("v2", vec![0.0, 1.0])]);
        let idf: HashMap<String, f64> = [("v1".to_string(), 3.0), ("v2".to_string(), 1.0)].into();
        let s = embed_score("v1", "v1 v2", &e, Some(&idf)).unwrap();
        assert!((s.score.recall - 0.75).abs() < 1e-15);
    }

    #[test]
    fn static_embedder_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vec.txt");
        std::fs::write(&p, "2 3\nGood 1 0 0\nbad -1 0.5 0\n").unwrap();
        let e = StaticEmbedder::load(&p).unwrap();
        assert_eq!(e.dim(), 3);
        let v = e.embed(&["good".into(), "zzz".into()]).unwrap();
        assert_eq!(v[0], vec![1.0, 0.0, 0.0]);
        assert!((v[1].iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(e.embed(&["zzz".into()]).unwrap()[0], v[1]);
        std::fs::write(&p, "a 1 2\nb 1\n").unwrap();
        assert!(StaticEmbedder::load(&p).unwrap_err().to_string().contains("line 2"));
    }

    struct Canned(&'static str);

    impl CompletionSource for Canned {
        fn generate(&self, _model: &str, _prompt: &str) -> Result<String, String> {
            Ok(self.0.to_owned())
        }
    }

    #[test]
    fn sweep_rows() {
        let e = table(&[("a", vec![1.0])]);
        let eval = vec![
            EvalPair { id: "1".into(), prompt: "p".into(), reference: "good battery".into() },
            EvalPair { id: "2".into(), prompt: "q".into(), reference: "good battery".into() },
        ];
        let models: BTreeMap<usize, String> =
            [(50, "m50".to_string()), (100, "m100".to_string()), (485, "m485".to_string())].into();
        let rep = size_sweep(&[50, 100, 200], &models, &eval, &Canned("good battery"), &e, 2).unwrap();
        let sizes: Vec<usize> = rep.rows.iter().map(|r| r.train_size).collect();
        assert_eq!(sizes, [50, 100, 485]);
        assert_eq!(rep.rows[0].rouge1, rep.rows[1].rouge1);
        assert_eq!(rep.rows[0].rouge1, ScoreTriple::ONE);
        assert!((rep.rows[2].embed_score.f1 - 1.0).abs() < 1e-12);
        assert_eq!(rep.warnings.len(), 1);
        assert!(matches!(size_sweep(&[50], &models, &[], &Canned(""), &e, 1), Err(EvalError::EmptyEvalSet)));
        assert_eq!(normalize_sweep_sizes(&[100, 50, 100]), vec![50, 100, 485]);
    }

    #[test]
    fn sweep_report_files() {
        let dir = tempfile::tempdir().unwrap();
        let rep = SweepReport {
            rows: vec![SweepRow {
                train_size: 485,
                model: "m".into(),
                rouge1: ScoreTriple::ONE,
                embed_score: ScoreTriple::from_pr(0.5, 1.0),
                n_eval: 3,
                generation_failures: 0,
            }],
            warnings: vec![],
        };
        let (t, p) = (dir.path().join("t.tsv"), dir.path().join("p.tsv"));
        write_sweep_report(&rep, &t, &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "train_size\trouge1_f1\tembed_f1\n485\t1.000000\t0.666667\n");
        assert_eq!(std::fs::read_to_string(&t).unwrap().lines().count(), 2);
    }
}
