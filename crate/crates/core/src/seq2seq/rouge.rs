//! Recall-oriented n-gram and LCS overlap between token sequences.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScores {
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
}

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

/// Clipped n-gram recall. A reference shorter than `n` has no n-grams; its
/// unigram recall is used instead so that `rouge2 ≤ rouge1` still holds.
pub fn rouge_n(pred: &[usize], reference: &[usize], n: usize) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Param("rouge needs a non-empty reference".into()));
    }
    if n == 0 {
        return Err(Error::Param("rouge n must be positive".into()));
    }
    if reference.len() < n {
        return rouge_n(pred, reference, 1);
    }
    let want = ngram_counts(reference, n);
    let have = ngram_counts(pred, n);
    let hit: usize = want
        .iter()
        .map(|(g, &c)| c.min(have.get(g).copied().unwrap_or(0)))
        .sum();
    Ok(hit as f64 / (reference.len() + 1 - n) as f64)
}

pub fn lcs_len(a: &[usize], b: &[usize]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_scores(pred: &[usize], reference: &[usize]) -> Result<RougeScores> {
    let rouge1 = rouge_n(pred, reference, 1)?;
    let rouge2 = rouge_n(pred, reference, 2)?;
    Ok(RougeScores {
        rouge1,
        rouge2,
        rouge_l: lcs_len(pred, reference) as f64 / reference.len() as f64,
    })
}

/// Mean of each score over paired sequences.
pub fn mean_scores(scores: &[RougeScores]) -> RougeScores {
    if scores.is_empty() {
        return RougeScores::default();
    }
    let n = scores.len() as f64;
    RougeScores {
        rouge1: scores.iter().map(|s| s.rouge1).sum::<f64>() / n,
        rouge2: scores.iter().map(|s| s.rouge2).sum::<f64>() / n,
        rouge_l: scores.iter().map(|s| s.rouge_l).sum::<f64>() / n,
    }
}
