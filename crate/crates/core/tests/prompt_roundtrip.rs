#[path = "support/fixtures.rs"]
mod fixtures;

use rand::Rng;
use reviewtune_core::moderation::{decide, Action, LabelLogProbs};
use reviewtune_core::prompting::{
    build_completion, build_prompt, from_jsonl, make_example, parse_completion, to_jsonl, to_jsonl_string,
    validate_jsonl_str, PROMPT_END, SEPARATOR,
};
use reviewtune_core::text::count_overlapping;
use tempfile::TempDir;

#[test]
fn decision_table_around_threshold() {
    let expect = [
        (-1.0, Action::Keep),
        (-0.5, Action::Keep),
        (-0.356, Action::Keep),
        (-0.355, Action::Reject),
        (-0.354, Action::Reject),
        (-0.1, Action::Reject),
    ];
    for (lp2, action) in expect {
        let lps = LabelLogProbs::from_log_scores([0.0, 0.0, lp2]);
        let raw = LabelLogProbs { lp2, ..lps };
        assert_eq!(decide(raw, -0.355).action, action, "lp2 = {lp2}");
    }
}

#[test]
fn prompt_separators_are_exact() {
    let mut rng = fixtures::rng(5);
    for n in 1..=20 {
        let reviews: Vec<String> = (0..n).map(|_| fixtures::review_text(&mut rng, 1, 30)).collect();
        let p = build_prompt(&reviews).unwrap();
        assert_eq!(count_overlapping(&p, SEPARATOR), n - 1);
        assert_eq!(count_overlapping(&p, PROMPT_END), 1);
        assert!(p.ends_with(PROMPT_END));
    }
}

#[test]
fn completions_round_trip() {
    let mut rng = fixtures::rng(9);
    for _ in 0..500 {
        let ann = fixtures::annotation(&mut rng);
        assert_eq!(parse_completion(&build_completion(&ann).unwrap()).unwrap(), ann);
    }
}

#[test]
fn jsonl_validates_and_round_trips() {
    let mut rng = fixtures::rng(13);
    let dir = TempDir::new().unwrap();
    for trial in 0..20 {
        let examples: Vec<_> = (0..rng.gen_range(1..10))
            .map(|i| {
                let reviews: Vec<String> =
                    (0..3).map(|j| format!("{} {i} {j}", fixtures::review_text(&mut rng, 1, 20))).collect();
                make_example("", &reviews, &fixtures::annotation(&mut rng)).unwrap()
            })
            .collect();
        let text = to_jsonl_string(&examples);
        let report = validate_jsonl_str(&text);
        assert!(report.is_ok(), "trial {trial}: {report}");
        let path = dir.path().join(format!("t{trial}.jsonl"));
        to_jsonl(&examples, &path).unwrap();
        assert_eq!(from_jsonl(&path).unwrap(), examples);
        let again = dir.path().join("again.jsonl");
        to_jsonl(&from_jsonl(&path).unwrap(), &again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }
}
