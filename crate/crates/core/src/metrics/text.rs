//! Single-reference text overlap scores over the project tokenizer's tokens.

use std::collections::HashMap;

use crate::tokenizer::split_tokens;

/// Stand-in numerator for n-gram orders with no match.
pub const BLEU_EPSILON: f64 = 1e-4;

/// Sentence similarity from an external embedding model, in `[0, 1]`.
pub trait EmbeddingScorer {
    fn similarity(&self, candidate: &str, reference: &str) -> f64;
}

fn ngram_counts<'t, 'a>(tokens: &'t [&'a str], n: usize) -> HashMap<&'t [&'a str], usize> {
    let mut m = HashMap::new();
    for w in tokens.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// BLEU-4 over pre-split tokens: uniform weights, brevity penalty, and
/// epsilon smoothing for orders with zero clipped matches.
pub fn bleu_tokens(cand: &[&str], reference: &[&str]) -> f64 {
    if cand.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0f64;
    for n in 1..=4 {
        let total = cand.len().saturating_sub(n - 1);
        let p = if total == 0 {
            BLEU_EPSILON
        } else {
            let c = ngram_counts(cand, n);
            let r = ngram_counts(reference, n);
            let matched: usize = c.iter().map(|(g, k)| (*k).min(*r.get(g).unwrap_or(&0))).sum();
            if matched == 0 {
                BLEU_EPSILON / total as f64
            } else {
                matched as f64 / total as f64
            }
        };
        log_sum += p.ln() / 4.0;
    }
    let (c, r) = (cand.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    (bp * log_sum.exp()).clamp(0.0, 1.0)
}

pub fn bleu(candidate: &str, reference: &str) -> f64 {
    bleu_tokens(&split_tokens(candidate), &split_tokens(reference))
}

/// Longest common subsequence length by dynamic programming.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 from an LCS length and the two sequence lengths.
pub fn rouge_l_from_lcs(lcs: usize, cand_len: usize, ref_len: usize) -> f64 {
    match (cand_len, ref_len) {
        (0, 0) => return 1.0,
        (0, _) | (_, 0) => return 0.0,
        _ => {}
    }
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / cand_len as f64;
    let r = lcs as f64 / ref_len as f64;
    2.0 * p * r / (p + r)
}

pub fn rouge_l_tokens<T: PartialEq>(cand: &[T], reference: &[T]) -> f64 {
    rouge_l_from_lcs(lcs_len(cand, reference), cand.len(), reference.len())
}

pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    rouge_l_tokens(&split_tokens(candidate), &split_tokens(reference))
}
