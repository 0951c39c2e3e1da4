//! Content moderation: per-label log-probabilities, the log-probability
//! threshold rule and row-level filtering.
//!
//! Labels are 0 (safe), 1 (sensitive) and 2 (unsafe). A review is rejected
//! when `ln P(2) >= thresh`; otherwise it is kept and labelled with whichever
//! of 0 and 1 has the higher log-probability.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::ProductRow;
use crate::corpus::{tsv_reader, tsv_writer};
use crate::par::bounded_map;
use crate::text::tokenize;

pub const DEFAULT_THRESHOLD: f64 = -0.355;

#[derive(Debug, Error)]
pub enum ModerationError {
    #[error("invalid log-probabilities ({0}, {1}, {2}): {3}")]
    InvalidLogProbs(f64, f64, f64, &'static str),
    #[error("lexicon has no terms for label {0}")]
    EmptyLexiconLabel(u8),
    #[error("lexicon {path} line {line}: {detail}")]
    LexiconFormat { path: PathBuf, line: usize, detail: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("delimited file error: {0}")]
    Csv(#[from] csv::Error),
}

/// A classifier failure; carries a human-readable reason for the audit log.
#[derive(Debug, Clone, Error)]
#[error("{0}")]
pub struct ClassifyError(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelLogProbs {
    pub lp0: f64,
    pub lp1: f64,
    pub lp2: f64,
}

impl LabelLogProbs {
    pub const SUM_TOLERANCE: f64 = 1e-6;

    pub fn new(lp0: f64, lp1: f64, lp2: f64) -> Result<Self, ModerationError> {
        let lp = Self { lp0, lp1, lp2 };
        lp.validate()?;
        Ok(lp)
    }

    pub fn uniform() -> Self {
        let v = (1.0f64 / 3.0).ln();
        Self { lp0: v, lp1: v, lp2: v }
    }

    /// Normalizes unnormalized log-scores with log-sum-exp.
    pub fn from_log_scores(scores: [f64; 3]) -> Self {
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        Self { lp0: (scores[0] - lse).min(0.0), lp1: (scores[1] - lse).min(0.0), lp2: (scores[2] - lse).min(0.0) }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.lp0, self.lp1, self.lp2]
    }

    pub fn validate(&self) -> Result<(), ModerationError> {
        let [a, b, c] = self.as_array();
        if !(a.is_finite() || a == f64::NEG_INFINITY)
            || !(b.is_finite() || b == f64::NEG_INFINITY)
            || !(c.is_finite() || c == f64::NEG_INFINITY)
        {
            return Err(ModerationError::InvalidLogProbs(a, b, c, "not a number"));
        }
        if a > 0.0 || b > 0.0 || c > 0.0 {
            return Err(ModerationError::InvalidLogProbs(a, b, c, "positive log-probability"));
        }
        let total = a.exp() + b.exp() + c.exp();
        if (total - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(ModerationError::InvalidLogProbs(a, b, c, "probabilities do not sum to 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Reject,
    Keep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModerationResult {
    pub logprobs: LabelLogProbs,
    pub action: Action,
    pub final_label: u8,
    pub thresh: f64,
}

/// Applies the threshold rule. A tie between labels 0 and 1 resolves to 1.
///
/// When the hold branch is taken only labels 0 and 1 are compared, even if
/// label 2 has the highest log-probability overall.
pub fn decide(logprobs: LabelLogProbs, thresh: f64) -> ModerationResult {
    if logprobs.lp2 >= thresh {
        ModerationResult { logprobs, action: Action::Reject, final_label: 2, thresh }
    } else {
        let final_label = if logprobs.lp0 > logprobs.lp1 { 0 } else { 1 };
        ModerationResult { logprobs, action: Action::Keep, final_label, thresh }
    }
}

pub trait SafetyClassifier: Sync {
    fn classify(&self, text: &str) -> Result<LabelLogProbs, ClassifyError>;
}

/// Weighted term lists for the three labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    terms: [BTreeMap<String, f64>; 3],
    vocab_size: usize,
    totals: [f64; 3],
}

const BUILTIN_LEXICON: &str = include_str!("default_lexicon.tsv");

impl Lexicon {
    pub fn new(terms: [BTreeMap<String, f64>; 3]) -> Result<Self, ModerationError> {
        for (label, t) in terms.iter().enumerate() {
            if t.is_empty() {
                return Err(ModerationError::EmptyLexiconLabel(label as u8));
            }
        }
        let vocab: BTreeSet<&String> = terms.iter().flat_map(|t| t.keys()).collect();
        let vocab_size = vocab.len();
        let totals = [0, 1, 2].map(|l| terms[l].values().sum());
        Ok(Self { terms, vocab_size, totals })
    }

    /// Parses `label<TAB>term<TAB>weight` lines with a header row.
    pub fn parse(text: &str, origin: &Path) -> Result<Self, ModerationError> {
        let mut terms: [BTreeMap<String, f64>; 3] = Default::default();
        let mut rdr = tsv_reader(text.as_bytes());
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let bad = |detail: String| ModerationError::LexiconFormat { path: origin.to_path_buf(), line, detail };
            if rec.len() != 3 {
                return Err(bad(format!("expected 3 fields, found {}", rec.len())));
            }
            let label: usize = rec[0]
                .trim()
                .parse()
                .ok()
                .filter(|l| *l < 3)
                .ok_or_else(|| bad(format!("label {:?} is not 0, 1 or 2", &rec[0])))?;
            let toks = tokenize(&rec[1]);
            if toks.len() != 1 {
                return Err(bad(format!("term {:?} must be a single token", &rec[1])));
            }
            let weight: f64 = rec[2]
                .trim()
                .parse()
                .ok()
                .filter(|w: &f64| w.is_finite() && *w > 0.0)
                .ok_or_else(|| bad(format!("weight {:?} must be a positive number", &rec[2])))?;
            *terms[label].entry(toks[0].clone()).or_insert(0.0) += weight;
        }
        Self::new(terms)
    }

    pub fn load(path: &Path) -> Result<Self, ModerationError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ModerationError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text, path)
    }

    pub fn builtin() -> Self {
        Self::parse(BUILTIN_LEXICON, Path::new("<builtin>")).expect("builtin lexicon is valid")
    }

    fn term_log_prob(&self, label: usize, term: &str) -> f64 {
        let w = self.terms[label].get(term).copied().unwrap_or(0.0);
        ((w + 1.0) / (self.totals[label] + self.vocab_size as f64)).ln()
    }

    fn contains(&self, term: &str) -> bool {
        self.terms.iter().any(|t| t.contains_key(term))
    }
}

/// Multinomial scoring under a uniform prior with add-one smoothing over the
/// lexicon vocabulary. Tokens outside the vocabulary carry no evidence; text
/// without any in-vocabulary token yields the uniform distribution.
pub fn classify_local(text: &str, lexicon: &Lexicon) -> LabelLogProbs {
    let mut scores = [0.0; 3];
    let mut evidence = false;
    for tok in tokenize(text) {
        if !lexicon.contains(&tok) {
            continue;
        }
        evidence = true;
        for (label, s) in scores.iter_mut().enumerate() {
            *s += lexicon.term_log_prob(label, &tok);
        }
    }
    if !evidence {
        return LabelLogProbs::uniform();
    }
    LabelLogProbs::from_log_scores(scores)
}

#[derive(Debug, Clone)]
pub struct LexiconClassifier {
    pub lexicon: Lexicon,
}

impl SafetyClassifier for LexiconClassifier {
    fn classify(&self, text: &str) -> Result<LabelLogProbs, ClassifyError> {
        Ok(classify_local(text, &self.lexicon))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AuditAction {
    Reject,
    Quarantine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub row_id: String,
    /// 1-based, matching the `review_<n>` dataset columns.
    pub review_index: usize,
    pub logprobs: Option<LabelLogProbs>,
    pub action: AuditAction,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<ProductRow>,
    pub dropped: Vec<String>,
    pub quarantined: Vec<String>,
    pub audit: Vec<AuditEntry>,
}

/// Classifies every review of every row with at most `max_in_flight`
/// concurrent classifier calls. A row with any rejected review is dropped; a
/// row where the classifier failed on any review is quarantined.
pub fn filter_rows(
    rows: Vec<ProductRow>,
    classifier: &dyn SafetyClassifier,
    thresh: f64,
    max_in_flight: usize,
) -> FilterOutcome {
    let jobs: Vec<(usize, usize)> =
        rows.iter().enumerate().flat_map(|(r, row)| (0..row.reviews.len()).map(move |i| (r, i))).collect();
    let results = bounded_map(&jobs, max_in_flight, |&(r, i)| {
        classifier.classify(&rows[r].reviews[i]).and_then(|lp| {
            lp.validate().map_err(|e| ClassifyError(e.to_string()))?;
            Ok(lp)
        })
    });

    let mut per_row: Vec<Vec<AuditEntry>> = vec![Vec::new(); rows.len()];
    let mut failed = vec![false; rows.len()];
    let mut rejected = vec![false; rows.len()];
    for (&(r, i), res) in jobs.iter().zip(results) {
        match res {
            Ok(lp) => {
                let decision = decide(lp, thresh);
                if decision.action == Action::Reject {
                    rejected[r] = true;
                    per_row[r].push(AuditEntry {
                        row_id: rows[r].row_id.clone(),
                        review_index: i + 1,
                        logprobs: Some(lp),
                        action: AuditAction::Reject,
                        detail: String::new(),
                    });
                }
            }
            Err(e) => {
                failed[r] = true;
                per_row[r].push(AuditEntry {
                    row_id: rows[r].row_id.clone(),
                    review_index: i + 1,
                    logprobs: None,
                    action: AuditAction::Quarantine,
                    detail: e.0,
                });
            }
        }
    }

    let mut out = FilterOutcome::default();
    for (r, row) in rows.into_iter().enumerate() {
        out.audit.append(&mut per_row[r]);
        if failed[r] {
            out.quarantined.push(row.row_id);
        } else if rejected[r] {
            out.dropped.push(row.row_id);
        } else {
            out.kept.push(row);
        }
    }
    out
}

pub fn write_audit(path: &Path, audit: &[AuditEntry]) -> Result<(), ModerationError> {
    let io = |source| ModerationError::Io { path: path.to_path_buf(), source };
    let mut w = tsv_writer(File::create(path).map_err(io)?);
    w.write_record(["row_id", "review_index", "lp0", "lp1", "lp2", "action"])?;
    for e in audit {
        let lps = match e.logprobs {
            Some(lp) => lp.as_array().map(|v| format!("{v:.6}")),
            None => [String::new(), String::new(), String::new()],
        };
        let action = match e.action {
            AuditAction::Reject => "reject".to_string(),
            AuditAction::Quarantine => format!("quarantine: {}", e.detail),
        };
        w.write_record([e.row_id.as_str(), &e.review_index.to_string(), &lps[0], &lps[1], &lps[2], &action])?;
    }
    w.flush().map_err(io)?;
    Ok(())
}
