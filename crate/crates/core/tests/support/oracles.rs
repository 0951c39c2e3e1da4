//! Slow, direct reference implementations used to check the optimized code.
#![allow(dead_code)]

/// Unigram overlap by scanning the union vocabulary and counting each word on
/// both sides with a linear pass. Returns (precision, recall, f1).
pub fn rouge1_oracle(cand: &[&str], refr: &[&str]) -> (f64, f64, f64) {
    if cand.is_empty() && refr.is_empty() {
        return (1.0, 1.0, 1.0);
    }
    if cand.is_empty() || refr.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let mut vocab: Vec<&str> = cand.iter().chain(refr).copied().collect();
    vocab.sort_unstable();
    vocab.dedup();
    let mut overlap = 0usize;
    for w in vocab {
        let a = cand.iter().filter(|t| **t == w).count();
        let b = refr.iter().filter(|t| **t == w).count();
        overlap += a.min(b);
    }
    f1_of(overlap as f64 / cand.len() as f64, overlap as f64 / refr.len() as f64)
}

fn f1_of(p: f64, r: f64) -> (f64, f64, f64) {
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Greedy embedding match: every token's best cosine over all tokens of the
/// other side (clamped to [0, 1]), averaged per side.
pub fn embed_oracle(cand: &[Vec<f64>], refr: &[Vec<f64>]) -> (f64, f64, f64) {
    let best = |xs: &[Vec<f64>], ys: &[Vec<f64>]| -> f64 {
        let mut total = 0.0;
        for x in xs {
            let mut m = f64::NEG_INFINITY;
            for y in ys {
                m = m.max(cos(x, y));
            }
            total += m.clamp(0.0, 1.0);
        }
        total / xs.len() as f64
    };
    f1_of(best(cand, refr), best(refr, cand))
}

/// Squared-error cost of a labelling, centroids taken as cluster means.
pub fn partition_cost(points: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let dim = points[0].len();
    let mut cost = 0.0;
    for c in 0..k {
        let members: Vec<&Vec<f64>> = points.iter().zip(labels).filter(|(_, l)| **l == c).map(|(p, _)| p).collect();
        if members.is_empty() {
            continue;
        }
        let mut mean = vec![0.0; dim];
        for m in &members {
            for d in 0..dim {
                mean[d] += m[d] / members.len() as f64;
            }
        }
        for m in &members {
            for d in 0..dim {
                cost += (m[d] - mean[d]) * (m[d] - mean[d]);
            }
        }
    }
    cost
}

/// Minimum within-cluster squared error over every labelling of the points
/// into at most `k` groups (k^n enumeration).
pub fn best_partition_cost(points: &[Vec<f64>], k: usize) -> f64 {
    let n = points.len();
    let total = k.pow(n as u32);
    let mut best = f64::INFINITY;
    let mut labels = vec![0usize; n];
    for code in 0..total {
        let mut c = code;
        for l in labels.iter_mut() {
            *l = c % k;
            c /= k;
        }
        best = best.min(partition_cost(points, &labels, k));
    }
    best
}
