//! Review corpus ingestion: delimited-file loading, the minimum-length filter
//! and per-category partitioning.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default minimum review length, in Unicode scalar values.
pub const DEFAULT_MIN_LEN: usize = 120;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing required column \"{0}\"")]
    MissingColumn(String),
    #[error("malformed delimited input: {0}")]
    Csv(#[from] csv::Error),
    #[error("categories {0:?} and {1:?} map to the same output file name")]
    CategoryCollision(String, String),
}

impl IngestError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}

/// One raw product review.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Review {
    pub id: String,
    pub category: String,
    pub body: String,
    pub rating: Option<u8>,
}

impl Review {
    /// Body length in Unicode scalar values.
    pub fn len_chars(&self) -> usize {
        self.body.chars().count()
    }
}

/// All reviews of one product category, in input order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryCorpus {
    pub category: String,
    pub reviews: Vec<Review>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    Tsv,
    Csv,
}

impl InputFormat {
    pub fn delimiter(self) -> u8 {
        match self {
            InputFormat::Tsv => b'\t',
            InputFormat::Csv => b',',
        }
    }

    /// Guesses the format from a file extension, defaulting to TSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => InputFormat::Csv,
            _ => InputFormat::Tsv,
        }
    }
}

/// Header names of the columns holding each review field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub id: String,
    pub category: String,
    pub body: String,
    /// Optional; a header without this column yields reviews with no rating.
    pub rating: Option<String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self { id: "id".into(), category: "category".into(), body: "body".into(), rating: Some("rating".into()) }
    }
}

/// A data row that did not become a [`Review`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectRecord {
    /// 1-based data row number (the header is not counted).
    pub row: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub reviews: Vec<Review>,
    pub rejects: Vec<RejectRecord>,
    pub data_rows: usize,
}

pub fn load_reviews(path: &Path, format: InputFormat, columns: &ColumnMap) -> Result<LoadReport, IngestError> {
    let file = File::open(path).map_err(|e| IngestError::io(path, e))?;
    load_reviews_from_reader(file, format, columns)
}

/// Loads several files concurrently; reports come back in input order.
pub fn load_many(
    paths: &[PathBuf],
    format: Option<InputFormat>,
    columns: &ColumnMap,
) -> Result<Vec<LoadReport>, IngestError> {
    paths.par_iter().map(|p| load_reviews(p, format.unwrap_or_else(|| InputFormat::from_path(p)), columns)).collect()
}

pub fn load_reviews_from_reader<R: Read>(
    reader: R,
    format: InputFormat,
    columns: &ColumnMap,
) -> Result<LoadReport, IngestError> {
    let mut rdr =
        csv::ReaderBuilder::new().delimiter(format.delimiter()).has_headers(true).flexible(true).from_reader(reader);

    let headers = rdr.byte_headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| String::from_utf8_lossy(h).trim() == name);
    let id_col = find(&columns.id).ok_or_else(|| IngestError::MissingColumn(columns.id.clone()))?;
    let cat_col = find(&columns.category).ok_or_else(|| IngestError::MissingColumn(columns.category.clone()))?;
    let body_col = find(&columns.body).ok_or_else(|| IngestError::MissingColumn(columns.body.clone()))?;
    let rating_col = columns.rating.as_deref().and_then(find);

    let mut report = LoadReport::default();
    let mut seen_ids = HashSet::new();
    let mut record = csv::ByteRecord::new();
    loop {
        let row = report.data_rows + 1;
        match rdr.read_byte_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                // Positional errors leave the reader usable; anything else is fatal.
                if e.position().is_none() {
                    return Err(e.into());
                }
                report.data_rows += 1;
                report.rejects.push(RejectRecord { row, reason: format!("malformed row: {e}") });
                continue;
            }
        }
        report.data_rows += 1;
        match parse_record(&record, headers.len(), id_col, cat_col, body_col, rating_col) {
            Ok(review) => {
                if !seen_ids.insert(review.id.clone()) {
                    report.rejects.push(RejectRecord { row, reason: format!("duplicate id {}", review.id) });
                } else {
                    report.reviews.push(review);
                }
            }
            Err(reason) => {
                log::debug!("rejecting data row {row}: {reason}");
                report.rejects.push(RejectRecord { row, reason });
            }
        }
    }
    Ok(report)
}

fn parse_record(
    record: &csv::ByteRecord,
    n_headers: usize,
    id_col: usize,
    cat_col: usize,
    body_col: usize,
    rating_col: Option<usize>,
) -> Result<Review, String> {
    if record.len() != n_headers {
        return Err(format!("expected {n_headers} fields, found {}", record.len()));
    }
    let field = |idx: usize, name: &str| -> Result<String, String> {
        std::str::from_utf8(&record[idx]).map(str::to_owned).map_err(|_| format!("invalid UTF-8 in {name}"))
    };
    let id = field(id_col, "id")?.trim().to_owned();
    if id.is_empty() {
        return Err("empty id".into());
    }
    let category = field(cat_col, "category")?.trim().to_owned();
    if category.is_empty() {
        return Err("empty category".into());
    }
    let body = field(body_col, "body")?;
    if body.trim().is_empty() {
        return Err("empty body".into());
    }
    let rating = match rating_col {
        None => None,
        Some(c) => {
            let raw = field(c, "rating")?;
            let raw = raw.trim();
            if raw.is_empty() {
                None
            } else {
                match raw.parse::<u8>() {
                    Ok(r @ 1..=5) => Some(r),
                    _ => return Err(format!("rating {raw:?} outside 1-5")),
                }
            }
        }
    };
    Ok(Review { id, category, body, rating })
}

/// Keeps reviews whose body has at least `min_len` characters, in order.
pub fn filter_by_length(reviews: Vec<Review>, min_len: usize) -> Vec<Review> {
    reviews.into_iter().filter(|r| r.len_chars() >= min_len).collect()
}

pub fn partition_by_category(reviews: Vec<Review>) -> BTreeMap<String, CategoryCorpus> {
    let mut out: BTreeMap<String, CategoryCorpus> = BTreeMap::new();
    for review in reviews {
        out.entry(review.category.clone())
            .or_insert_with(|| CategoryCorpus { category: review.category.clone(), reviews: Vec::new() })
            .reviews
            .push(review);
    }
    out
}

/// File stem used for a category's output file.
pub fn category_file_stem(category: &str) -> String {
    category.chars().map(|c| if c.is_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

pub(crate) fn tsv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().delimiter(b'\t').terminator(csv::Terminator::Any(b'\n')).from_writer(w)
}

pub(crate) fn tsv_reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().delimiter(b'\t').has_headers(true).from_reader(r)
}

/// Writes `<outdir>/<category>.tsv` for each partition plus `<outdir>/rejects.tsv`.
/// Returns the written category files in category order.
pub fn write_partitions(
    outdir: &Path,
    partitions: &BTreeMap<String, CategoryCorpus>,
    rejects: &[RejectRecord],
) -> Result<Vec<PathBuf>, IngestError> {
    std::fs::create_dir_all(outdir).map_err(|e| IngestError::io(outdir, e))?;
    let mut stems: BTreeMap<String, &str> = BTreeMap::new();
    let mut written = Vec::new();
    for (category, corpus) in partitions {
        let stem = category_file_stem(category);
        if let Some(other) = stems.insert(stem.clone(), category) {
            return Err(IngestError::CategoryCollision(other.to_owned(), category.clone()));
        }
        let path = outdir.join(format!("{stem}.tsv"));
        write_reviews(&path, &corpus.reviews)?;
        written.push(path);
    }
    let rejects_path = outdir.join("rejects.tsv");
    let file = File::create(&rejects_path).map_err(|e| IngestError::io(&rejects_path, e))?;
    let mut w = tsv_writer(file);
    w.write_record(["row", "reason"])?;
    for r in rejects {
        w.write_record([r.row.to_string(), r.reason.clone()])?;
    }
    w.flush().map_err(|e| IngestError::io(&rejects_path, e))?;
    Ok(written)
}

pub fn write_reviews(path: &Path, reviews: &[Review]) -> Result<(), IngestError> {
    let file = File::create(path).map_err(|e| IngestError::io(path, e))?;
    let mut w = tsv_writer(file);
    w.write_record(["id", "category", "body", "rating"])?;
    for r in reviews {
        let rating = r.rating.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([r.id.as_str(), r.category.as_str(), r.body.as_str(), rating.as_str()])?;
    }
    w.flush().map_err(|e| IngestError::io(path, e))?;
    Ok(())
}

/// Reads a per-category file produced by [`write_partitions`].
pub fn read_reviews(path: &Path) -> Result<Vec<Review>, IngestError> {
    let report = load_reviews(path, InputFormat::Tsv, &ColumnMap::default())?;
    if let Some(first) = report.rejects.first() {
        return Err(IngestError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("row {}: {}", first.row, first.reason),
            ),
        });
    }
    Ok(report.reviews)
}
