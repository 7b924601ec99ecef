//! Word normalization shared by the overlap metrics.

use alloc::string::String;
use alloc::vec::Vec;

/// Splits `text` into normalized words: lowercased, split on Unicode
/// whitespace, with non-alphanumeric characters trimmed from both ends.
/// Words that are empty after trimming are dropped.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

/// Contiguous `n`-grams of `words`. Empty when `n == 0` or `n > words.len()`.
pub fn ngrams<T>(words: &[T], n: usize) -> impl Iterator<Item = &[T]> {
    let count = if n == 0 { 0 } else { (words.len() + 1).saturating_sub(n) };
    (0..count).map(move |i| &words[i..i + n])
}
