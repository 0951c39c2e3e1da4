//! TF-IDF vectorization, seeded k-means and assembly of clusters into
//! fixed-size product rows.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{tsv_reader, tsv_writer};
use crate::text::tokenize;

pub const DEFAULT_K: usize = 90;
pub const DEFAULT_GROUP_SIZE: usize = 15;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("cannot vectorize: every text is empty")]
    EmptyCorpus,
    #[error("invalid k-means arguments: {0}")]
    Argument(String),
    #[error("{assignments} assignments for {reviews} reviews")]
    Misaligned { assignments: usize, reviews: usize },
    #[error("schema mismatch in {path}: {detail}")]
    Schema { path: PathBuf, detail: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("delimited file error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

/// A sparse row: sorted column indices with their weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseVec {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseVec {
    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    fn dot_dense(&self, dense: &[f64]) -> f64 {
        self.indices.iter().zip(&self.values).map(|(&i, v)| v * dense[i]).sum()
    }

    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            out[i] = v;
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseMatrix {
    pub dim: usize,
    pub rows: Vec<SparseVec>,
}

impl SparseMatrix {
    /// Builds a matrix from dense rows, keeping only non-zero entries.
    pub fn from_dense(rows: &[Vec<f64>]) -> Self {
        let dim = rows.first().map_or(0, Vec::len);
        let rows = rows
            .iter()
            .map(|r| {
                assert_eq!(r.len(), dim, "ragged dense rows");
                let mut sv = SparseVec::default();
                for (i, &v) in r.iter().enumerate() {
                    if v != 0.0 {
                        sv.indices.push(i);
                        sv.values.push(v);
                    }
                }
                sv
            })
            .collect();
        Self { dim, rows }
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }
}

/// Document-term matrix with L2-normalized rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TfidfMatrix {
    pub vocab: Vec<String>,
    pub idf: Vec<f64>,
    pub matrix: SparseMatrix,
}

/// Smoothed TF-IDF: `tf * (ln((1 + N) / (1 + df)) + 1)`, raw-count tf,
/// lexicographically ordered vocabulary, rows scaled to unit L2 norm.
/// Documents with no tokens get an all-zero row.
pub fn vectorize_tfidf<S: AsRef<str>>(texts: &[S]) -> Result<TfidfMatrix, ClusterError> {
    let docs: Vec<Vec<String>> = texts.iter().map(|t| tokenize(t.as_ref())).collect();
    if docs.iter().all(Vec::is_empty) {
        return Err(ClusterError::EmptyCorpus);
    }
    let vocab: Vec<String> = docs.iter().flatten().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let index: HashMap<&str, usize> = vocab.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();

    let counts: Vec<BTreeMap<usize, f64>> = docs
        .iter()
        .map(|doc| {
            let mut tf = BTreeMap::new();
            for tok in doc {
                *tf.entry(index[tok.as_str()]).or_insert(0.0) += 1.0;
            }
            tf
        })
        .collect();

    let mut df = vec![0usize; vocab.len()];
    for tf in &counts {
        for &col in tf.keys() {
            df[col] += 1;
        }
    }
    let n = docs.len() as f64;
    let idf: Vec<f64> = df.iter().map(|&d| ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0).collect();

    let rows = counts
        .into_iter()
        .map(|tf| {
            let mut row = SparseVec {
                indices: tf.keys().copied().collect(),
                values: tf.iter().map(|(&c, &count)| count * idf[c]).collect(),
            };
            let norm = row.norm_sq().sqrt();
            if norm > 0.0 {
                row.values.iter_mut().for_each(|v| *v /= norm);
            }
            row
        })
        .collect();

    Ok(TfidfMatrix { matrix: SparseMatrix { dim: vocab.len(), rows }, vocab, idf })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
    /// Independent k-means++ restarts; the lowest-inertia run wins.
    pub n_init: usize,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self { k: DEFAULT_K, seed: 0, max_iter: 300, tol: 1e-4, n_init: 10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub stream: u64,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after every assignment step, starting with the initial centroids.
    pub inertia_history: Vec<f64>,
}

/// A fitted k-means model.
///
/// Cluster ids are numbered in order of first appearance in the input, so
/// they do not depend on which restart won.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub seed: u64,
    pub runs: Vec<RunTrace>,
}

impl ClusterModel {
    pub fn best_run(&self) -> &RunTrace {
        self.runs.iter().min_by(|a, b| a.inertia.total_cmp(&b.inertia)).expect("at least one run")
    }
}

fn sq_dist(x: &SparseVec, x_norm: f64, c: &[f64], c_norm: f64) -> f64 {
    (x_norm - 2.0 * x.dot_dense(c) + c_norm).max(0.0)
}

struct Assignment {
    labels: Vec<usize>,
    dists: Vec<f64>,
    inertia: f64,
}

fn assign(data: &SparseMatrix, norms: &[f64], centroids: &[Vec<f64>]) -> Assignment {
    let c_norms: Vec<f64> = centroids.iter().map(|c| c.iter().map(|v| v * v).sum()).collect();
    let pairs: Vec<(usize, f64)> = data
        .rows
        .par_iter()
        .zip(norms.par_iter())
        .map(|(x, &xn)| {
            let mut best = (0, f64::INFINITY);
            for (j, (c, &cn)) in centroids.iter().zip(&c_norms).enumerate() {
                let d = sq_dist(x, xn, c, cn);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .collect();
    let (labels, dists): (Vec<usize>, Vec<f64>) = pairs.into_iter().unzip();
    // Sequential sum keeps the result independent of the worker count.
    let inertia = dists.iter().sum();
    Assignment { labels, dists, inertia }
}

fn kmeans_pp_init(data: &SparseMatrix, norms: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = data.n_rows();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut centroids = vec![data.rows[chosen[0]].to_dense(data.dim)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| {
            let c = &centroids[0];
            sq_dist(&data.rows[i], norms[i], c, c.iter().map(|v| v * v).sum())
        })
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `acc` just short of `target`.
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).expect("positive total"))
        } else {
            // Every point coincides with a centroid: take the first unused one.
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        let c = data.rows[next].to_dense(data.dim);
        let cn: f64 = c.iter().map(|v| v * v).sum();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(&data.rows[i], norms[i], &c, cn));
        }
        centroids.push(c);
    }
    centroids
}

fn update_centroids(data: &SparseMatrix, norms: &[f64], labels: &mut [usize], k: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; data.dim]; k];
    let mut counts = vec![0usize; k];
    for (x, &l) in data.rows.iter().zip(labels.iter()) {
        counts[l] += 1;
        for (&i, &v) in x.indices.iter().zip(&x.values) {
            sums[l][i] += v;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            s.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    let empty: Vec<usize> = (0..k).filter(|&j| counts[j] == 0).collect();
    if !empty.is_empty() {
        let c_norms: Vec<f64> = sums.iter().map(|c| c.iter().map(|v| v * v).sum()).collect();
        let mut dists: Vec<f64> = (0..data.n_rows())
            .map(|i| sq_dist(&data.rows[i], norms[i], &sums[labels[i]], c_norms[labels[i]]))
            .collect();
        for j in empty {
            let mut far = 0;
            for (i, &d) in dists.iter().enumerate() {
                if d > dists[far] {
                    far = i;
                }
            }
            log::debug!("re-seeding empty cluster {j} with point {far}");
            sums[j] = data.rows[far].to_dense(data.dim);
            labels[far] = j;
            dists[far] = f64::NEG_INFINITY;
        }
    }
    sums
}

/// One sweep of single-point transfers: a point moves to another cluster
/// when that lowers the total squared error once both means are updated.
/// Singleton clusters never lose their point. Returns whether anything moved.
fn hartigan_pass(data: &SparseMatrix, norms: &[f64], labels: &mut [usize], k: usize) -> bool {
    let mut counts = vec![0usize; k];
    let mut means = vec![vec![0.0; data.dim]; k];
    for (x, &l) in data.rows.iter().zip(labels.iter()) {
        counts[l] += 1;
        for (&i, &v) in x.indices.iter().zip(&x.values) {
            means[l][i] += v;
        }
    }
    for (m, &c) in means.iter_mut().zip(&counts) {
        if c > 0 {
            m.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    let sq_norm = |m: &[f64]| m.iter().map(|v| v * v).sum::<f64>();
    let mut m_norms: Vec<f64> = means.iter().map(|m| sq_norm(m)).collect();

    let mut moved = false;
    for (i, x) in data.rows.iter().enumerate() {
        let a = labels[i];
        let na = counts[a] as f64;
        if counts[a] <= 1 {
            continue;
        }
        let remove_gain = na / (na - 1.0) * sq_dist(x, norms[i], &means[a], m_norms[a]);
        let mut target = None;
        let mut best = remove_gain * (1.0 - 1e-12);
        for b in (0..k).filter(|&b| b != a) {
            let nb = counts[b] as f64;
            let add_cost = nb / (nb + 1.0) * sq_dist(x, norms[i], &means[b], m_norms[b]);
            if add_cost < best {
                best = add_cost;
                target = Some(b);
            }
        }
        let Some(b) = target else { continue };
        let nb = counts[b] as f64;
        means[a].iter_mut().for_each(|v| *v *= na / (na - 1.0));
        means[b].iter_mut().for_each(|v| *v *= nb / (nb + 1.0));
        for (&j, &v) in x.indices.iter().zip(&x.values) {
            means[a][j] -= v / (na - 1.0);
            means[b][j] += v / (nb + 1.0);
        }
        m_norms[a] = sq_norm(&means[a]);
        m_norms[b] = sq_norm(&means[b]);
        counts[a] -= 1;
        counts[b] += 1;
        labels[i] = b;
        moved = true;
    }
    moved
}

/// Lloyd iterations until the centroid shift is within `tol`, then a
/// transfer pass; the two alternate until the transfer pass finds nothing.
/// The final assignment is always a Lloyd assignment step.
fn lloyd_run(
    data: &SparseMatrix,
    norms: &[f64],
    params: &KMeansParams,
    stream: u64,
) -> (Vec<Vec<f64>>, Assignment, RunTrace) {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(stream);
    let mut centroids = kmeans_pp_init(data, norms, params.k, &mut rng);
    let mut current = assign(data, norms, &centroids);
    let mut history = vec![current.inertia];
    let mut iterations = 0;
    let mut refinements = 0;
    loop {
        while iterations < params.max_iter {
            iterations += 1;
            let mut labels = current.labels.clone();
            let next = update_centroids(data, norms, &mut labels, params.k);
            let shift: f64 = centroids
                .iter()
                .zip(&next)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
                .sum();
            centroids = next;
            current = assign(data, norms, &centroids);
            history.push(current.inertia);
            if shift <= params.tol {
                break;
            }
        }
        if refinements >= params.max_iter {
            break;
        }
        refinements += 1;
        let mut labels = current.labels.clone();
        if !hartigan_pass(data, norms, &mut labels, params.k) {
            break;
        }
        centroids = update_centroids(data, norms, &mut labels, params.k);
        current = assign(data, norms, &centroids);
        history.push(current.inertia);
    }
    let trace = RunTrace { stream, inertia: current.inertia, iterations, inertia_history: history };
    (centroids, current, trace)
}

/// Lloyd's algorithm with k-means++ seeding and single-point transfer
/// refinement, `n_init` restarts drawn from independent streams of one seeded
/// generator. Nearest-centroid ties go to the lowest centroid index.
pub fn kmeans_fit(data: &SparseMatrix, params: &KMeansParams) -> Result<ClusterModel, ClusterError> {
    let n = data.n_rows();
    if params.k == 0 {
        return Err(ClusterError::Argument("k must be at least 1".into()));
    }
    if params.k > n {
        return Err(ClusterError::Argument(format!("k = {} exceeds {} documents", params.k, n)));
    }
    if params.n_init == 0 {
        return Err(ClusterError::Argument("n_init must be at least 1".into()));
    }
    let norms: Vec<f64> = data.rows.iter().map(SparseVec::norm_sq).collect();

    let mut best: Option<(Vec<Vec<f64>>, Assignment)> = None;
    let mut runs = Vec::with_capacity(params.n_init);
    for stream in 0..params.n_init as u64 {
        let (centroids, assignment, trace) = lloyd_run(data, &norms, params, stream);
        let better = best.as_ref().is_none_or(|(_, b)| assignment.inertia < b.inertia);
        if better {
            best = Some((centroids, assignment));
        }
        runs.push(trace);
    }
    let (centroids, assignment) = best.expect("n_init >= 1");

    // Renumber clusters by first appearance, then reassign against the permuted
    // centroids so the lowest-index tie rule still holds.
    let mut order: Vec<usize> = Vec::with_capacity(params.k);
    for &l in &assignment.labels {
        if !order.contains(&l) {
            order.push(l);
        }
    }
    let unused: Vec<usize> = (0..params.k).filter(|j| !order.contains(j)).collect();
    order.extend(unused);
    let centroids: Vec<Vec<f64>> = order.iter().map(|&j| centroids[j].clone()).collect();
    let final_assignment = assign(data, &norms, &centroids);
    debug_assert!(final_assignment.dists.iter().all(|d| d.is_finite()));

    Ok(ClusterModel {
        k: params.k,
        centroids,
        assignments: final_assignment.labels,
        inertia: final_assignment.inertia,
        seed: params.seed,
        runs,
    })
}

/// A group of same-cluster reviews treated as one product's review set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProductRow {
    pub row_id: String,
    pub cluster_id: usize,
    pub category: String,
    pub reviews: Vec<String>,
}

pub fn row_id(category: &str, cluster_id: usize, chunk: usize) -> String {
    format!("{category}/{cluster_id}/{chunk}")
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Assembly {
    pub rows: Vec<ProductRow>,
    pub discarded: usize,
}

/// Chunks each cluster's reviews, in corpus order, into consecutive groups of
/// `group_size`. Trailing groups that come up short are discarded.
pub fn assemble_rows(
    assignments: &[usize],
    reviews: &[String],
    category: &str,
    group_size: usize,
) -> Result<Assembly, ClusterError> {
    if assignments.len() != reviews.len() {
        return Err(ClusterError::Misaligned { assignments: assignments.len(), reviews: reviews.len() });
    }
    if group_size == 0 {
        return Err(ClusterError::Argument("group_size must be at least 1".into()));
    }
    let mut members: BTreeMap<usize, Vec<&String>> = BTreeMap::new();
    for (&c, r) in assignments.iter().zip(reviews) {
        members.entry(c).or_default().push(r);
    }
    let mut out = Assembly::default();
    for (cluster_id, list) in members {
        let chunks = list.chunks_exact(group_size);
        out.discarded += chunks.remainder().len();
        for (i, chunk) in chunks.enumerate() {
            out.rows.push(ProductRow {
                row_id: row_id(category, cluster_id, i),
                cluster_id,
                category: category.to_owned(),
                reviews: chunk.iter().map(|s| (*s).clone()).collect(),
            });
        }
    }
    Ok(out)
}

pub fn dataset_header(group_size: usize) -> Vec<String> {
    let mut h: Vec<String> = vec!["row_id".into(), "cluster_id".into(), "category".into()];
    h.extend((1..=group_size).map(|i| format!("review_{i}")));
    h
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ClusterError + '_ {
    move |source| ClusterError::Io { path: path.to_path_buf(), source }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> ClusterError + '_ {
    move |source| ClusterError::Csv { path: path.to_path_buf(), source }
}

pub fn write_dataset(path: &Path, rows: &[ProductRow], group_size: usize) -> Result<(), ClusterError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = tsv_writer(file);
    w.write_record(dataset_header(group_size)).map_err(csv_err(path))?;
    for row in rows {
        if row.reviews.len() != group_size {
            return Err(ClusterError::Schema {
                path: path.to_path_buf(),
                detail: format!("row {} has {} reviews, expected {group_size}", row.row_id, row.reviews.len()),
            });
        }
        let mut rec = vec![row.row_id.clone(), row.cluster_id.to_string(), row.category.clone()];
        rec.extend(row.reviews.iter().cloned());
        w.write_record(&rec).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads a dataset file; the group size is taken from the header.
pub fn read_dataset(path: &Path) -> Result<(usize, Vec<ProductRow>), ClusterError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut rdr = tsv_reader(file);
    let header: Vec<String> = rdr.headers().map_err(csv_err(path))?.iter().map(str::to_owned).collect();
    let group_size = header.len().saturating_sub(3);
    if group_size == 0 || header != dataset_header(group_size) {
        return Err(ClusterError::Schema { path: path.to_path_buf(), detail: format!("unexpected header {header:?}") });
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err(path))?;
        let cluster_id = rec[1].parse().map_err(|_| ClusterError::Schema {
            path: path.to_path_buf(),
            detail: format!("bad cluster_id {:?}", &rec[1]),
        })?;
        rows.push(ProductRow {
            row_id: rec[0].to_owned(),
            cluster_id,
            category: rec[2].to_owned(),
            reviews: rec.iter().skip(3).map(str::to_owned).collect(),
        });
    }
    Ok((group_size, rows))
}

/// Concatenates dataset parts in the given order into `out`. Returns the
/// total row count.
pub fn concat_datasets(parts: &[PathBuf], out: &Path, group_size: usize) -> Result<usize, ClusterError> {
    let expected = dataset_header(group_size);
    let file = File::create(out).map_err(io_err(out))?;
    let mut w = tsv_writer(file);
    w.write_record(&expected).map_err(csv_err(out))?;
    let mut total = 0;
    for part in parts {
        let file = File::open(part).map_err(io_err(part))?;
        let mut rdr = tsv_reader(file);
        let header: Vec<String> = rdr.headers().map_err(csv_err(part))?.iter().map(str::to_owned).collect();
        if header != expected {
            return Err(ClusterError::Schema {
                path: part.clone(),
                detail: format!("header {header:?} does not match {expected:?}"),
            });
        }
        for rec in rdr.records() {
            w.write_record(&rec.map_err(csv_err(part))?).map_err(csv_err(out))?;
            total += 1;
        }
    }
    w.flush().map_err(io_err(out))?;
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn points(xs: &[f64]) -> SparseMatrix {
        SparseMatrix::from_dense(&xs.iter().map(|&x| vec![x]).collect::<Vec<_>>())
    }

    #[test]
    fn tfidf_smoothed_idf() {
        let m = vectorize_tfidf(&["a b", "b c"]).unwrap();
        assert_eq!(m.vocab, vec!["a", "b", "c"]);
        assert!((m.idf[1] - 1.0).abs() < 1e-15);
        let rare = (3.0f64 / 2.0).ln() + 1.0;
        assert!((m.idf[0] - rare).abs() < 1e-15);
        for row in &m.matrix.rows {
            assert!((row.norm_sq().sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn tfidf_single_document_is_normalized_tf() {
        let m = vectorize_tfidf(&["x x y"]).unwrap();
        assert!(m.idf.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let norm = 5f64.sqrt();
        assert_eq!(m.matrix.rows[0].values, vec![2.0 / norm, 1.0 / norm]);
    }

    #[test]
    fn tfidf_empty_docs() {
        assert!(matches!(vectorize_tfidf(&["", "  !! "]), Err(ClusterError::EmptyCorpus)));
        let m = vectorize_tfidf(&["", "word"]).unwrap();
        assert!(m.matrix.rows[0].indices.is_empty());
        assert_eq!(vectorize_tfidf(&["q w", "e"]).unwrap(), vectorize_tfidf(&["q w", "e"]).unwrap());
    }

    #[test]
    fn kmeans_two_obvious_clusters() {
        let data = points(&[0.0, 0.1, 10.0, 10.1]);
        let model = kmeans_fit(&data, &KMeansParams { k: 2, seed: 7, ..Default::default() }).unwrap();
        assert_eq!(model.assignments, vec![0, 0, 1, 1]);
        assert!((model.inertia - 0.01).abs() < 1e-12);
    }

    #[test]
    fn kmeans_exact_fit_and_errors() {
        let data = points(&[1.0, 2.0, 4.0]);
        let model = kmeans_fit(&data, &KMeansParams { k: 3, seed: 1, ..Default::default() }).unwrap();
        assert!(model.inertia.abs() < 1e-12);
        assert_eq!(model.assignments, vec![0, 1, 2]);
        assert!(matches!(
            kmeans_fit(&data, &KMeansParams { k: 4, ..Default::default() }),
            Err(ClusterError::Argument(_))
        ));
        assert!(kmeans_fit(&data, &KMeansParams { k: 0, ..Default::default() }).is_err());
    }

    #[test]
    fn kmeans_duplicate_points_leave_no_empty_cluster_panic() {
        let data = points(&[3.0, 3.0, 3.0, 3.0]);
        let model = kmeans_fit(&data, &KMeansParams { k: 3, seed: 2, ..Default::default() }).unwrap();
        assert!(model.inertia.abs() < 1e-12);
        assert!(model.assignments.iter().all(|&a| a < 3));
    }

    #[test]
    fn kmeans_deterministic() {
        let m = vectorize_tfidf(&[
            "battery life great",
            "battery died fast",
            "screen bright sharp",
            "screen cracked",
            "shipping slow",
            "shipping fast",
        ])
        .unwrap();
        let p = KMeansParams { k: 3, seed: 11, ..Default::default() };
        assert_eq!(kmeans_fit(&m.matrix, &p).unwrap(), kmeans_fit(&m.matrix, &p).unwrap());
    }

    #[test]
    fn assemble_examples() {
        let reviews: Vec<String> = (0..31).map(|i| format!("r{i}")).collect();
        let out = assemble_rows(&[0; 31], &reviews, "c", 15).unwrap();
        assert_eq!((out.rows.len(), out.discarded), (2, 1));
        assert_eq!(out.rows[1].reviews[0], "r15");

        let out = assemble_rows(&[0; 14], &reviews[..14], "c", 15).unwrap();
        assert_eq!((out.rows.len(), out.discarded), (0, 14));

        let mut labels = vec![0; 30];
        labels.extend([1; 15]);
        let reviews: Vec<String> = (0..45).map(|i| i.to_string()).collect();
        let out = assemble_rows(&labels, &reviews, "c", 15).unwrap();
        assert_eq!(out.rows.len(), 3);
        assert_eq!(out.rows[2].row_id, "c/1/0");

        assert!(matches!(assemble_rows(&[0, 1], &reviews[..3], "c", 15), Err(ClusterError::Misaligned { .. })));
    }

    #[test]
    fn concat_preserves_order_and_checks_schema() {
        let dir = tempfile::tempdir().unwrap();
        let row = |id: &str| ProductRow {
            row_id: id.into(),
            cluster_id: 0,
            category: "c".into(),
            reviews: vec!["x".into(), "y\tz".into()],
        };
        let a = dir.path().join("A.tsv");
        let b = dir.path().join("B.tsv");
        write_dataset(&a, &[row("a1"), row("a2"), row("a3")], 2).unwrap();
        write_dataset(&b, &[row("b1"), row("b2")], 2).unwrap();
        let out = dir.path().join("all.tsv");
        assert_eq!(concat_datasets(&[a.clone(), b], &out, 2).unwrap(), 5);
        let (gs, rows) = read_dataset(&out).unwrap();
        assert_eq!(gs, 2);
        let ids: Vec<&str> = rows.iter().map(|r| r.row_id.as_str()).collect();
        assert_eq!(ids, ["a1", "a2", "a3", "b1", "b2"]);
        assert_eq!(rows[0].reviews[1], "y\tz");

        assert_eq!(concat_datasets(&[], &out, 2).unwrap(), 0);
        assert_eq!(std::fs::read_to_string(&out).unwrap(), "row_id\tcluster_id\tcategory\treview_1\treview_2\n");

        let err = concat_datasets(std::slice::from_ref(&a), &out, 3).unwrap_err();
        assert!(err.to_string().contains("A.tsv"));
    }
}
