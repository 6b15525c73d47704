use std::collections::HashSet;
use std::hash::Hash;

/// Lowercases, splits on Unicode whitespace and strips punctuation from
/// token edges. Tokens left empty are dropped.
pub fn normalize_and_tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|raw| {
            let lower = raw.to_lowercase();
            let trimmed = lower.trim_matches(|c: char| !c.is_alphanumeric());
            if trimmed.is_empty() {
                None
            } else {
                Some(trimmed.to_string())
            }
        })
        .collect()
}

/// The last `len` tokens of an email (all tokens if it is shorter).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSuffix {
    tokens: Vec<String>,
    len: usize,
}

impl TokenSuffix {
    pub fn new(mut tokens: Vec<String>, len: usize) -> Self {
        assert!(len >= 1, "suffix length must be positive");
        if tokens.len() > len {
            tokens.drain(..tokens.len() - len);
        }
        Self { tokens, len }
    }

    pub fn from_text(text: &str, len: usize) -> Self {
        Self::new(normalize_and_tokenize(text), len)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn suffix_len(&self) -> usize {
        self.len
    }

    pub fn token_set(&self) -> HashSet<&str> {
        self.tokens.iter().map(String::as_str).collect()
    }
}

/// |a ∩ b| / |a ∪ b|; two empty sets are identical (1.0).
pub fn jaccard<T: Eq + Hash>(a: &HashSet<T>, b: &HashSet<T>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let inter = small.iter().filter(|x| large.contains(x)).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}
