use crate::error::{Error, Result};
use crate::policy::{Sequence, TokenId};

/// Length of the longest common subsequence.
pub fn lcs_len(a: &[TokenId], b: &[TokenId]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Levenshtein distance with unit costs.
pub fn edit_distance(a: &[TokenId], b: &[TokenId]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `|LCS(a, b)| / max(|a|, |b|)`.
pub fn lcs_similarity(a: &[TokenId], b: &[TokenId]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidInput(
            "similarity needs two non-empty sequences".into(),
        ));
    }
    Ok(lcs_len(a, b) as f64 / a.len().max(b.len()) as f64)
}

/// Normalized LCS over the tokens after BOS (EOS included).
pub fn token_similarity(a: &Sequence, b: &Sequence) -> Result<f64> {
    lcs_similarity(a.after_bos(), b.after_bos())
}
