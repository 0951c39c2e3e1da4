//! Prompt and completion construction, completion parsing and the JSONL
//! training-file format.
//!
//! Prompt layout: the reviews joined by [`SEPARATOR`], followed by
//! [`PROMPT_END`]. Completion layout:
//!
//! ```text
//!  Pros:
//! - <pro>
//! Cons:
//! - <con>
//! Verdict: <verdict>
//! END
//! ```
//!
//! with a leading space and the final `"\nEND"` being [`STOP`].

use std::collections::HashMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{tsv_reader, tsv_writer};
use crate::text::count_overlapping;

pub const SEPARATOR: &str = "\n\n*******\n\n";
pub const PROMPT_END: &str = "\n\n###\n\n";
pub const STOP: &str = "\nEND";
/// Separator between list items in annotation files.
pub const ITEM_SEPARATOR: &str = "||";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("review {index} collides with the {marker} marker")]
    Collision { index: usize, marker: &'static str },
    #[error("cannot build a prompt from zero reviews")]
    NoReviews,
    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {detail}")]
    Format { path: PathBuf, line: usize, detail: String },
    #[error("delimited file error: {0}")]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PromptError + '_ {
    move |source| PromptError::Io { path: path.to_path_buf(), source }
}

/// Completion text that could not be parsed; keeps the raw text for audit.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("unparseable completion: {reason}")]
pub struct ParseError {
    pub reason: String,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Annotation {
    pub pros: Vec<String>,
    pub cons: Vec<String>,
    pub verdict: String,
}

impl Annotation {
    pub fn validate(&self) -> Result<(), PromptError> {
        let bad = |m: String| Err(PromptError::InvalidAnnotation(m));
        if self.verdict.trim().is_empty() {
            return bad("verdict is empty".into());
        }
        if self.verdict.contains(STOP) {
            return bad("verdict contains the stop sequence".into());
        }
        for item in self.pros.iter().chain(&self.cons) {
            if item.trim().is_empty() {
                return bad("empty list item".into());
            }
            if item.contains('\n') || item.contains('\r') {
                return bad(format!("list item {item:?} spans several lines"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingExample {
    pub prompt: String,
    pub completion: String,
}

pub fn build_prompt<S: AsRef<str>>(reviews: &[S]) -> Result<String, PromptError> {
    build_prompt_with_prefix("", reviews)
}

/// Like [`build_prompt`] with an instruction `prefix` placed before the
/// first review.
pub fn build_prompt_with_prefix<S: AsRef<str>>(prefix: &str, reviews: &[S]) -> Result<String, PromptError> {
    if reviews.is_empty() {
        return Err(PromptError::NoReviews);
    }
    for (i, r) in reviews.iter().enumerate() {
        let r = r.as_ref();
        if r.contains(SEPARATOR) {
            return Err(PromptError::Collision { index: i + 1, marker: "separator" });
        }
        if r.contains(PROMPT_END) {
            return Err(PromptError::Collision { index: i + 1, marker: "prompt-end" });
        }
    }
    if prefix.contains(SEPARATOR) || prefix.contains(PROMPT_END) {
        return Err(PromptError::Collision { index: 0, marker: "prefix" });
    }
    let mut prompt = String::from(prefix);
    for (i, r) in reviews.iter().enumerate() {
        if i > 0 {
            prompt.push_str(SEPARATOR);
        }
        prompt.push_str(r.as_ref());
    }
    prompt.push_str(PROMPT_END);

    // A marker can also form across a join, e.g. a review ending in "\n\n###".
    if count_overlapping(&prompt, SEPARATOR) != reviews.len() - 1 {
        return Err(PromptError::Collision { index: 0, marker: "separator" });
    }
    if count_overlapping(&prompt, PROMPT_END) != 1 {
        return Err(PromptError::Collision { index: 0, marker: "prompt-end" });
    }
    Ok(prompt)
}

pub fn build_completion(ann: &Annotation) -> Result<String, PromptError> {
    ann.validate()?;
    let mut out = String::from(" Pros:\n");
    for p in &ann.pros {
        out.push_str("- ");
        out.push_str(p);
        out.push('\n');
    }
    out.push_str("Cons:\n");
    for c in &ann.cons {
        out.push_str("- ");
        out.push_str(c);
        out.push('\n');
    }
    out.push_str("Verdict: ");
    out.push_str(&ann.verdict);
    out.push_str(STOP);
    Ok(out)
}

/// Renders an annotation without the leading space and stop sequence; this is
/// the text the metrics compare.
pub fn render_summary(ann: &Annotation) -> Result<String, PromptError> {
    let full = build_completion(ann)?;
    Ok(full[1..full.len() - STOP.len()].to_owned())
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    Preamble,
    Pros,
    Cons,
    Verdict,
}

fn strip_head<'a>(line: &'a str, head: &str) -> Option<&'a str> {
    let n = head.len();
    (line.len() >= n && line.is_char_boundary(n) && line[..n].eq_ignore_ascii_case(head)).then(|| &line[n..])
}

fn list_item(line: &str) -> &str {
    line.strip_prefix(['-', '*', '•']).unwrap_or(line).trim()
}

/// Tolerant parse of a generated completion.
///
/// Section heads are matched case-insensitively at line start; list lines may
/// use `-`, `*` or `•` bullets; text after the first stop sequence is ignored.
pub fn parse_completion(text: &str) -> Result<Annotation, ParseError> {
    let fail = |reason: &str| ParseError { reason: reason.to_owned(), raw: text.to_owned() };
    let body = match text.find(STOP) {
        Some(pos) => &text[..pos],
        None => text,
    };
    let mut section = Section::Preamble;
    let mut pros = Vec::new();
    let mut cons = Vec::new();
    let mut verdict: Option<Vec<&str>> = None;
    for line in body.lines() {
        let t = line.trim();
        if let Some(rest) = strip_head(t, "pros:") {
            section = Section::Pros;
            if !rest.trim().is_empty() {
                pros.push(list_item(rest.trim()).to_owned());
            }
        } else if let Some(rest) = strip_head(t, "cons:") {
            section = Section::Cons;
            if !rest.trim().is_empty() {
                cons.push(list_item(rest.trim()).to_owned());
            }
        } else if let Some(rest) = strip_head(t, "verdict:") {
            section = Section::Verdict;
            verdict.get_or_insert_with(Vec::new).push(rest.trim());
        } else if t.is_empty() {
            continue;
        } else {
            match section {
                Section::Preamble => {}
                Section::Pros | Section::Cons => {
                    let item = list_item(t);
                    if !item.is_empty() {
                        let list = if section == Section::Pros { &mut pros } else { &mut cons };
                        list.push(item.to_owned());
                    }
                }
                Section::Verdict => verdict.get_or_insert_with(Vec::new).push(t),
            }
        }
    }
    let lines = verdict.ok_or_else(|| fail("no Verdict section"))?;
    let verdict = lines.join("\n").trim().to_owned();
    if verdict.is_empty() {
        return Err(fail("empty verdict"));
    }
    Ok(Annotation { pros, cons, verdict })
}

pub fn make_example<S: AsRef<str>>(
    prefix: &str,
    reviews: &[S],
    ann: &Annotation,
) -> Result<TrainingExample, PromptError> {
    Ok(TrainingExample { prompt: build_prompt_with_prefix(prefix, reviews)?, completion: build_completion(ann)? })
}

pub fn to_jsonl_string(examples: &[TrainingExample]) -> String {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&serde_json::to_string(ex).expect("strings always serialize"));
        out.push('\n');
    }
    out
}

/// Writes one `{"prompt": .., "completion": ..}` object per line.
pub fn to_jsonl(examples: &[TrainingExample], path: &Path) -> Result<(), PromptError> {
    std::fs::write(path, to_jsonl_string(examples)).map_err(io_err(path))
}

pub fn from_jsonl(path: &Path) -> Result<Vec<TrainingExample>, PromptError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| PromptError::Format {
                path: path.to_path_buf(),
                line: i + 1,
                detail: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IssueKind {
    BadJson(String),
    NotAnObject,
    MissingKey(&'static str),
    NotAString(&'static str),
    UnexpectedKey(String),
    EmptyLine,
    CarriageReturn,
    MissingPromptEnd,
    MissingLeadingSpace,
    MissingStop,
    DuplicatePrompt { first_line: usize },
    NoTrailingNewline,
    NoExamples,
}

impl std::fmt::Display for IssueKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            IssueKind::BadJson(e) => write!(f, "invalid JSON: {e}"),
            IssueKind::NotAnObject => f.write_str("line is not a JSON object"),
            IssueKind::MissingKey(k) => write!(f, "missing key \"{k}\""),
            IssueKind::NotAString(k) => write!(f, "\"{k}\" is not a string"),
            IssueKind::UnexpectedKey(k) => write!(f, "unexpected key \"{k}\""),
            IssueKind::EmptyLine => f.write_str("empty line"),
            IssueKind::CarriageReturn => f.write_str("CRLF line ending"),
            IssueKind::MissingPromptEnd => f.write_str("prompt does not end with the prompt-end marker"),
            IssueKind::MissingLeadingSpace => f.write_str("completion does not start with a space"),
            IssueKind::MissingStop => f.write_str("completion does not end with the stop sequence"),
            IssueKind::DuplicatePrompt { first_line } => {
                write!(f, "duplicate prompt (first seen on line {first_line})")
            }
            IssueKind::NoTrailingNewline => f.write_str("file does not end with a newline"),
            IssueKind::NoExamples => f.write_str("file contains no examples"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Issue {
    /// 1-based line number; 0 for whole-file issues.
    pub line: usize,
    pub kind: IssueKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub lines: usize,
    pub valid_examples: usize,
    pub errors: Vec<Issue>,
    pub warnings: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for i in &self.errors {
            writeln!(f, "error: line {}: {}", i.line, i.kind)?;
        }
        for i in &self.warnings {
            writeln!(f, "warning: line {}: {}", i.line, i.kind)?;
        }
        write!(
            f,
            "{} lines, {} valid examples, {} errors, {} warnings",
            self.lines,
            self.valid_examples,
            self.errors.len(),
            self.warnings.len()
        )
    }
}

pub fn validate_jsonl(path: &Path) -> Result<ValidationReport, PromptError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    match String::from_utf8(bytes) {
        Ok(text) => Ok(validate_jsonl_str(&text)),
        Err(e) => Ok(ValidationReport {
            errors: vec![Issue { line: 0, kind: IssueKind::BadJson(format!("file is not UTF-8: {e}")) }],
            ..Default::default()
        }),
    }
}

/// Duplicate prompts and a missing final newline are warnings; everything
/// else is an error.
pub fn validate_jsonl_str(text: &str) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let body = text.strip_suffix('\n').unwrap_or(text);
    if !text.is_empty() && !text.ends_with('\n') {
        report.warnings.push(Issue { line: 0, kind: IssueKind::NoTrailingNewline });
    }
    if body.is_empty() {
        report.errors.push(Issue { line: 0, kind: IssueKind::NoExamples });
        return report;
    }
    for (i, line) in body.split('\n').enumerate() {
        let n = i + 1;
        report.lines += 1;
        let mut err = |kind| report.errors.push(Issue { line: n, kind });
        if line.ends_with('\r') {
            err(IssueKind::CarriageReturn);
            continue;
        }
        if line.trim().is_empty() {
            err(IssueKind::EmptyLine);
            continue;
        }
        let value: serde_json::Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(e) => {
                err(IssueKind::BadJson(e.to_string()));
                continue;
            }
        };
        let Some(obj) = value.as_object() else {
            err(IssueKind::NotAnObject);
            continue;
        };
        let before = report.errors.len();
        let get = |key: &'static str, report: &mut ValidationReport| match obj.get(key) {
            None => {
                report.errors.push(Issue { line: n, kind: IssueKind::MissingKey(key) });
                None
            }
            Some(serde_json::Value::String(s)) => Some(s.clone()),
            Some(_) => {
                report.errors.push(Issue { line: n, kind: IssueKind::NotAString(key) });
                None
            }
        };
        let prompt = get("prompt", &mut report);
        let completion = get("completion", &mut report);
        for key in obj.keys().filter(|k| *k != "prompt" && *k != "completion") {
            report.errors.push(Issue { line: n, kind: IssueKind::UnexpectedKey(key.clone()) });
        }
        if let Some(p) = &prompt {
            if !p.ends_with(PROMPT_END) {
                report.errors.push(Issue { line: n, kind: IssueKind::MissingPromptEnd });
            }
            if let Some(&first_line) = seen.get(p) {
                report.warnings.push(Issue { line: n, kind: IssueKind::DuplicatePrompt { first_line } });
            } else {
                seen.insert(p.clone(), n);
            }
        }
        if let Some(c) = &completion {
            if !c.starts_with(' ') {
                report.errors.push(Issue { line: n, kind: IssueKind::MissingLeadingSpace });
            }
            if !c.ends_with(STOP) {
                report.errors.push(Issue { line: n, kind: IssueKind::MissingStop });
            }
        }
        if report.errors.len() == before {
            report.valid_examples += 1;
        }
    }
    report
}

fn split_items(cell: &str) -> Vec<String> {
    cell.split(ITEM_SEPARATOR).map(str::trim).filter(|s| !s.is_empty()).map(str::to_owned).collect()
}

/// Reads an annotation file with columns `row_id, pros, cons, verdict`, list
/// items separated by `||`. Order of the file is preserved.
pub fn read_annotations(path: &Path) -> Result<Vec<(String, Annotation)>, PromptError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut rdr = tsv_reader(file);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header != ["row_id", "pros", "cons", "verdict"] {
        return Err(PromptError::Format {
            path: path.to_path_buf(),
            line: 1,
            detail: format!("unexpected header {header:?}"),
        });
    }
    let mut out = Vec::new();
    let mut ids = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let ann =
            Annotation { pros: split_items(&rec[1]), cons: split_items(&rec[2]), verdict: rec[3].trim().to_owned() };
        let fmt = |detail: String| PromptError::Format { path: path.to_path_buf(), line, detail };
        ann.validate().map_err(|e| fmt(e.to_string()))?;
        if let Some(prev) = ids.insert(rec[0].to_owned(), line) {
            return Err(fmt(format!("row_id {} already annotated on line {prev}", &rec[0])));
        }
        out.push((rec[0].to_owned(), ann));
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, rows: &[(String, Annotation)]) -> Result<(), PromptError> {
    let mut w = tsv_writer(File::create(path).map_err(io_err(path))?);
    w.write_record(["row_id", "pros", "cons", "verdict"])?;
    for (id, a) in rows {
        w.write_record([id.as_str(), &a.pros.join(ITEM_SEPARATOR), &a.cons.join(ITEM_SEPARATOR), &a.verdict])?;
    }
    w.flush().map_err(io_err(path))
}
