//! Closed caption vocabulary and token lookup.

use alloc::vec;
use alloc::vec::Vec;

/// Row of the embedding table used for the dropped-text condition.
pub const NULL_TOKEN: usize = 0;
/// Row shared by every out-of-vocabulary word.
pub const OOV_TOKEN: usize = 1;

pub const VOCAB: &[&str] = &[
    "<null>", "<oov>", // reserved
    "a", "model", "wearing", "and", "with", "on", "in", "the", "person", "outfit",
    // categories
    "upper", "lower", "dress", "outer",
    // patterns
    "solid", "stripes", "checks", "dots",
    // palette
    "red", "green", "blue", "yellow", "cyan", "magenta", "white", "black",
];

pub fn vocab_size() -> usize {
    VOCAB.len()
}

pub fn token_id(word: &str) -> usize {
    VOCAB
        .iter()
        .skip(2)
        .position(|&w| w == word)
        .map(|i| i + 2)
        .unwrap_or(OOV_TOKEN)
}

/// Token ids for a caption; an empty caption is the single NULL token.
pub fn tokenize<S: AsRef<str>>(words: &[S]) -> Vec<usize> {
    if words.is_empty() {
        return vec![NULL_TOKEN];
    }
    words.iter().map(|w| token_id(w.as_ref())).collect()
}
