//! Hashed tokenization shared by both text encoders.
//!
//! There is no learned vocabulary: tokens are lowercased alphanumeric runs
//! hashed into a fixed number of buckets, which keeps the tokenizer
//! open-vocabulary across domains by construction.

use crate::error::{PulseError, Result};
use crate::hashing::fnv1a64;

pub const DEFAULT_HASH_VOCAB: usize = 32_768;
pub const MAX_TOKENS: usize = 512;

/// Lowercase, split on non-alphanumeric runs, hash each token into
/// `hash_vocab` buckets, keep the first `max_tokens`.
pub fn tokenize(text: &str, hash_vocab: usize, max_tokens: usize) -> Result<Vec<usize>> {
    if hash_vocab == 0 || max_tokens == 0 {
        return Err(PulseError::InvalidArgument(
            "tokenize needs positive vocab and budget".into(),
        ));
    }
    let lower = text.to_lowercase();
    let ids: Vec<usize> = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .take(max_tokens)
        .map(|t| (fnv1a64(t.as_bytes()) % hash_vocab as u64) as usize)
        .collect();
    if ids.is_empty() {
        return Err(PulseError::EmptyText(format!(
            "no tokens in {:?}",
            text.chars().take(40).collect::<String>()
        )));
    }
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn case_and_punctuation_insensitive() {
        let a = tokenize("Amber Serum, No. 7!", DEFAULT_HASH_VOCAB, MAX_TOKENS).unwrap();
        let b = tokenize("amber serum no 7", DEFAULT_HASH_VOCAB, MAX_TOKENS).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
    }

    #[test]
    fn ids_stay_in_vocab_and_are_stable() {
        let ids = tokenize("the quick brown fox", 64, MAX_TOKENS).unwrap();
        assert!(ids.iter().all(|&i| i < 64));
        assert_eq!(ids, tokenize("the quick brown fox", 64, MAX_TOKENS).unwrap());
    }

    #[test]
    fn truncates_to_budget() {
        let long = vec!["tok"; 700].join(" ");
        let ids = tokenize(&long, DEFAULT_HASH_VOCAB, MAX_TOKENS).unwrap();
        assert_eq!(ids.len(), MAX_TOKENS);
    }

    #[test]
    fn rejects_token_free_text() {
        assert!(matches!(
            tokenize("!!! ---", DEFAULT_HASH_VOCAB, MAX_TOKENS),
            Err(PulseError::EmptyText(_))
        ));
        assert!(matches!(
            tokenize("", DEFAULT_HASH_VOCAB, MAX_TOKENS),
            Err(PulseError::EmptyText(_))
        ));
    }
}
