#[path = "support/fixtures.rs"]
mod fixtures;

use rand::Rng;
use reviewtune_core::clustering::{assemble_rows, ProductRow};
use reviewtune_core::corpus::{filter_by_length, load_reviews_from_reader, ColumnMap, InputFormat, Review};
use reviewtune_core::moderation::filter_rows;

const TRIALS: u64 = 200;

#[test]
fn ingest_accounts_for_every_data_row() {
    for seed in 0..TRIALS {
        let mut rng = fixtures::rng(seed);
        let rows = rng.gen_range(0..60);
        let (table, n) = fixtures::review_table(&mut rng, rows);
        let report = load_reviews_from_reader(table.as_bytes(), InputFormat::Tsv, &ColumnMap::default()).unwrap();
        assert_eq!(report.data_rows, n, "seed {seed}");
        assert_eq!(report.reviews.len() + report.rejects.len(), n, "seed {seed}");
        let mut rows_seen: Vec<usize> = report.rejects.iter().map(|r| r.row).collect();
        rows_seen.sort_unstable();
        rows_seen.dedup();
        assert_eq!(rows_seen.len(), report.rejects.len(), "one reject per row, seed {seed}");
    }
}

fn random_reviews(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<Review> {
    (0..n)
        .map(|i| Review {
            id: format!("r{i}"),
            category: "phones".into(),
            body: fixtures::review_text(rng, 1, 40),
            rating: None,
        })
        .collect()
}

#[test]
fn length_filter_partitions_and_is_idempotent() {
    for seed in 0..TRIALS {
        let mut rng = fixtures::rng(seed);
        let n = rng.gen_range(0..80);
        let reviews = random_reviews(&mut rng, n);
        let min_len = rng.gen_range(0..200);
        let short = reviews.iter().filter(|r| r.body.chars().count() < min_len).count();
        let kept = filter_by_length(reviews.clone(), min_len);
        assert_eq!(kept.len() + short, n, "seed {seed}");
        assert!(kept.iter().all(|r| r.body.chars().count() >= min_len));
        assert_eq!(filter_by_length(kept.clone(), min_len), kept, "seed {seed}");
        let order: Vec<&str> = kept.iter().map(|r| r.id.as_str()).collect();
        let expected: Vec<&str> =
            reviews.iter().filter(|r| r.body.chars().count() >= min_len).map(|r| r.id.as_str()).collect();
        assert_eq!(order, expected);
    }
}

#[test]
fn assembly_accounts_for_every_review() {
    for seed in 0..TRIALS {
        let mut rng = fixtures::rng(seed);
        let n = rng.gen_range(0..120);
        let k = rng.gen_range(1..10);
        let g = rng.gen_range(1..8);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let texts: Vec<String> = (0..n).map(|i| format!("review {i}")).collect();
        let out = assemble_rows(&labels, &texts, "phones", g).unwrap();
        assert_eq!(out.rows.len() * g + out.discarded, n, "seed {seed}");
        assert!(out.rows.iter().all(|r| r.reviews.len() == g));
        for row in &out.rows {
            assert!(row.reviews.iter().all(|t| {
                let i: usize = t.trim_start_matches("review ").parse().unwrap();
                labels[i] == row.cluster_id
            }));
        }
        let expected_discard: usize = (0..k).map(|c| labels.iter().filter(|&&l| l == c).count() % g).sum();
        assert_eq!(out.discarded, expected_discard);
    }
}

#[test]
fn moderation_accounts_for_every_row() {
    for seed in 0..TRIALS {
        let mut rng = fixtures::rng(seed);
        let n = rng.gen_range(0..40);
        let g = rng.gen_range(1..5);
        let rows: Vec<ProductRow> = (0..n)
            .map(|i| ProductRow {
                row_id: format!("phones/0/{i}"),
                cluster_id: 0,
                category: "phones".into(),
                reviews: (0..g).map(|_| fixtures::review_text(&mut rng, 1, 6)).collect(),
            })
            .collect();
        let out = filter_rows(rows.clone(), &fixtures::WordClassifier, -0.355, rng.gen_range(1..5));
        assert_eq!(out.kept.len() + out.dropped.len() + out.quarantined.len(), n, "seed {seed}");
        for row in &rows {
            let has = |w: &str| row.reviews.iter().any(|r| r.split_whitespace().any(|t| t == w));
            let in_kept = out.kept.iter().any(|k| k.row_id == row.row_id);
            let in_dropped = out.dropped.contains(&row.row_id);
            let in_quarantine = out.quarantined.contains(&row.row_id);
            assert_eq!(in_quarantine, has("slow"));
            assert_eq!(in_dropped, !has("slow") && has("bad"));
            assert_eq!(in_kept, !has("slow") && !has("bad"));
        }
    }
}
