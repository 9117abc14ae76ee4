//! Corpus-level BLEU-4 (single reference, no smoothing).

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};

const MAX_ORDER: usize = 4;

fn ngram_counts<T: Ord + Clone>(tokens: &[T], n: usize) -> BTreeMap<&[T], usize> {
    let mut counts: BTreeMap<&[T], usize> = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-4 over paired hypothesis/reference token lists. Modified
/// n-gram precisions are pooled over the whole corpus, the brevity penalty
/// uses total lengths, and any empty precision bucket drives the score to
/// zero (no smoothing).
pub fn bleu4<T: Ord + Clone>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(CoreError::invalid("hypothesis/reference count mismatch"));
    }
    if hyps.is_empty() {
        return Err(CoreError::invalid("empty corpus"));
    }
    let mut matched = [0usize; MAX_ORDER];
    let mut total = [0usize; MAX_ORDER];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            for (gram, count) in &hc {
                let clip = rc.get(gram).copied().unwrap_or(0);
                matched[n - 1] += (*count).min(clip);
            }
            total[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..MAX_ORDER {
        if matched[n] == 0 || total[n] == 0 {
            return Ok(0.0);
        }
        log_sum += libm::log(matched[n] as f64 / total[n] as f64);
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        libm::exp(1.0 - ref_len as f64 / hyp_len as f64)
    };
    Ok(bp * libm::exp(log_sum / MAX_ORDER as f64))
}
