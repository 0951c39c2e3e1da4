//! Tokenization shared by the vectorizer, the local classifier and the metrics.

/// Lowercases `text` and splits it on runs of non-alphanumeric characters,
/// dropping empty tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase).collect()
}

/// Counts occurrences of `needle` in `haystack`, including overlapping ones.
pub fn count_overlapping(haystack: &str, needle: &str) -> usize {
    if needle.is_empty() {
        return 0;
    }
    let hay = haystack.as_bytes();
    let pat = needle.as_bytes();
    hay.windows(pat.len()).filter(|w| *w == pat).count()
}
