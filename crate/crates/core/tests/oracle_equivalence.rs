#[path = "support/fixtures.rs"]
mod fixtures;
#[path = "support/oracles.rs"]
mod oracles;

use std::collections::HashMap;

use rand::Rng;
use reviewtune_core::clustering::{kmeans_fit, KMeansParams, SparseMatrix};
use reviewtune_core::evaluation::{embed_score, rouge1, StaticEmbedder};

#[test]
fn rouge_matches_oracle_on_random_pairs() {
    let mut rng = fixtures::rng(7);
    for _ in 0..1000 {
        let a = fixtures::token_seq(&mut rng, 12);
        let b = fixtures::token_seq(&mut rng, 12);
        let got = rouge1(&a.join(" "), &b.join(" "));
        let (p, r, f) = oracles::rouge1_oracle(&a, &b);
        assert_eq!((got.precision, got.recall, got.f1), (p, r, f), "{a:?} vs {b:?}");
    }
}

#[test]
fn rouge_golden_cases() {
    assert_eq!(rouge1("the cat sat", "the cat sat").f1, 1.0);
    assert_eq!(rouge1("the cat sat", "dogs bark loudly").f1, 0.0);
    let s = rouge1("the cat sat", "the cat ran");
    assert_eq!(s.f1, 2.0 / 3.0);
    assert_eq!(s.precision, 2.0 / 3.0);
    // Clipping: repeated candidate words only count as often as in the reference.
    let s = rouge1("the the the", "the cat");
    assert_eq!(s.precision, 1.0 / 3.0);
    assert_eq!(s.recall, 0.5);
}

#[test]
fn embed_score_matches_all_pairs_oracle() {
    let mut rng = fixtures::rng(11);
    for trial in 0..300 {
        let dim = rng.gen_range(2..6);
        let table = fixtures::vector_table(&mut rng, fixtures::WORDS, dim);
        let lookup: HashMap<String, Vec<f64>> = table.iter().cloned().collect();
        let emb = StaticEmbedder::new(dim, lookup.clone());
        let a = fixtures::token_seq(&mut rng, 8);
        let b = fixtures::token_seq(&mut rng, 8);
        if a.is_empty() || b.is_empty() {
            continue;
        }
        let got = embed_score(&a.join(" "), &b.join(" "), &emb, None).unwrap();
        let va: Vec<Vec<f64>> = a.iter().map(|t| lookup[*t].clone()).collect();
        let vb: Vec<Vec<f64>> = b.iter().map(|t| lookup[*t].clone()).collect();
        let (p, r, f) = oracles::embed_oracle(&va, &vb);
        for (x, y) in [(got.score.precision, p), (got.score.recall, r), (got.score.f1, f)] {
            assert!((x - y).abs() <= 1e-9, "trial {trial}: {x} vs {y}");
        }
        let same = embed_score(&a.join(" "), &a.join(" "), &emb, None).unwrap();
        assert_eq!(same.score.f1, 1.0, "identical sequences, trial {trial}");
    }
}

#[test]
fn kmeans_reaches_brute_force_optimum() {
    let mut rng = fixtures::rng(3);
    for trial in 0..150 {
        let n = rng.gen_range(2..=8);
        let k = rng.gen_range(1..=3.min(n));
        let pts = fixtures::points(&mut rng, n, 2);
        let data = SparseMatrix::from_dense(&pts);
        let params = KMeansParams { k, seed: trial, max_iter: 300, tol: 0.0, n_init: 10 };
        let model = kmeans_fit(&data, &params).unwrap();
        let best = oracles::best_partition_cost(&pts, k);
        assert!(
            (model.inertia - best).abs() <= 1e-9,
            "trial {trial}: n={n} k={k} inertia {} vs optimum {best}",
            model.inertia
        );
        let own = oracles::partition_cost(&pts, &model.assignments, k);
        assert!((own - model.inertia).abs() <= 1e-9);
        for run in &model.runs {
            for w in run.inertia_history.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12), "trial {trial}: inertia rose {w:?}");
            }
        }
    }
}
