use std::collections::HashSet;

use crate::error::{Error, Result};

/// Unique n-grams over total n-grams.
pub fn distinct_n(tokens: &[u32], n: usize) -> Result<f64> {
    if n == 0 || tokens.len() < n {
        return Err(Error::invalid(format!(
            "distinct-{n} needs at least {n} tokens, got {}",
            tokens.len()
        )));
    }
    let total = tokens.len() - n + 1;
    let unique: HashSet<&[u32]> = tokens.windows(n).collect();
    Ok(unique.len() as f64 / total as f64)
}

/// Fraction of adjacent equal pairs, over `len − 1`.
pub fn repetition_ratio(tokens: &[u32]) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::invalid("repetition ratio needs at least 2 tokens"));
    }
    let repeats = tokens.windows(2).filter(|w| w[0] == w[1]).count();
    Ok(repeats as f64 / (tokens.len() - 1) as f64)
}

/// Lexical metrics of one decoded sequence. Entries are `None` when the
/// sequence is too short for them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lexical {
    pub distinct1: Option<f64>,
    pub distinct2: Option<f64>,
    pub distinct3: Option<f64>,
    pub repetition_ratio: Option<f64>,
}

pub fn lexical(tokens: &[u32]) -> Lexical {
    Lexical {
        distinct1: distinct_n(tokens, 1).ok(),
        distinct2: distinct_n(tokens, 2).ok(),
        distinct3: distinct_n(tokens, 3).ok(),
        repetition_ratio: repetition_ratio(tokens).ok(),
    }
}
