//! Seeded generators for randomized fixtures.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use reviewtune_core::prompting::Annotation;

pub const WORDS: &[&str] =
    &["the", "cat", "sat", "ran", "battery", "screen", "good", "bad", "fast", "slow", "cheap", "bright"];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn token_seq(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<&'static str> {
    let n = rng.gen_range(0..=max_len);
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect()
}

/// A fixed vector table over `vocab`; entries may point in any direction.
pub fn vector_table(rng: &mut ChaCha8Rng, vocab: &[&str], dim: usize) -> Vec<(String, Vec<f64>)> {
    vocab.iter().map(|w| (w.to_string(), (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())).collect()
}

pub fn points(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| rng.gen_range(0.0..10.0)).collect()).collect()
}

fn phrase(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(1..=4);
    let mut s: Vec<String> = (0..n).map(|_| WORDS.choose(rng).unwrap().to_string()).collect();
    if rng.gen_bool(0.2) {
        s.push("and: 42%".into());
    }
    s.join(" ")
}

pub fn annotation(rng: &mut ChaCha8Rng) -> Annotation {
    let pros = (0..rng.gen_range(0..4)).map(|_| phrase(rng)).collect();
    let cons = (0..rng.gen_range(0..4)).map(|_| phrase(rng)).collect();
    Annotation { pros, cons, verdict: phrase(rng) }
}

pub fn review_text(rng: &mut ChaCha8Rng, min_words: usize, max_words: usize) -> String {
    let n = rng.gen_range(min_words..=max_words);
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

/// A TSV review table with a mix of valid and malformed data rows. Returns
/// the text and the number of data rows.
pub fn review_table(rng: &mut ChaCha8Rng, rows: usize) -> (String, usize) {
    let mut out = String::from("id\tcategory\tbody\trating\n");
    for i in 0..rows {
        let id = if rng.gen_bool(0.1) && i > 0 { format!("r{}", i - 1) } else { format!("r{i}") };
        let cat = ["phones", "laptops", "tablets"].choose(rng).unwrap();
        let body = if rng.gen_bool(0.1) { String::new() } else { review_text(rng, 1, 40) };
        let rating = match rng.gen_range(0..10) {
            0 => "9".to_owned(),
            1 => "abc".to_owned(),
            2 => String::new(),
            _ => rng.gen_range(1..=5).to_string(),
        };
        if rng.gen_bool(0.05) {
            out.push_str(&format!("{id}\t{cat}\n"));
        } else {
            out.push_str(&format!("{id}\t{cat}\t{body}\t{rating}\n"));
        }
    }
    (out, rows)
}

/// Rejects reviews mentioning "bad", fails on "slow", keeps the rest.
pub struct WordClassifier;

impl reviewtune_core::moderation::SafetyClassifier for WordClassifier {
    fn classify(
        &self,
        text: &str,
    ) -> Result<reviewtune_core::moderation::LabelLogProbs, reviewtune_core::moderation::ClassifyError> {
        use reviewtune_core::moderation::{ClassifyError, LabelLogProbs};
        let words: Vec<&str> = text.split_whitespace().collect();
        if words.contains(&"slow") {
            return Err(ClassifyError("classifier unavailable".into()));
        }
        let p = if words.contains(&"bad") { [0.1f64, 0.1, 0.8] } else { [0.8, 0.1, 0.1] };
        Ok(LabelLogProbs::new(p[0].ln(), p[1].ln(), p[2].ln()).unwrap())
    }
}
