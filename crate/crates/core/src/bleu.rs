//! Smoothed sentence BLEU (the search reward) and pooled corpus BLEU (the
//! evaluation metric), both over token ids.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{TokenId, BOS, EOS, PAD, UNK};
use crate::scalar::Real;

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BleuError {
    #[error("unstripped special token {0}")]
    UnstrippedSpecial(TokenId),
    #[error("hypothesis/reference count mismatch: {hyps} vs {refs}")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("empty corpus")]
    EmptyCorpus,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuScore<T> {
    pub value: T,
    pub precisions: [T; MAX_ORDER],
    pub brevity_penalty: T,
}

impl<T: Real> BleuScore<T> {
    fn from_parts(precisions: [T; MAX_ORDER], brevity_penalty: T) -> Self {
        let value = if precisions.iter().any(|&p| p <= T::zero()) {
            T::zero()
        } else {
            let log_mean = precisions.iter().map(|p| p.ln()).sum::<T>() / T::from_count(MAX_ORDER);
            brevity_penalty * log_mean.exp()
        };
        Self {
            value: value.min(T::one()),
            precisions,
            brevity_penalty,
        }
    }
}

/// Renders emitted tokens (no BOS marker in front) as BLEU input: cuts at the
/// first EOS and replaces any emitted PAD/BOS by UNK so that they count as
/// non-matching words without changing the hypothesis length.
pub fn strip_for_bleu(seq: &[TokenId]) -> Vec<TokenId> {
    seq.iter()
        .take_while(|&&t| t != EOS)
        .map(|&t| if t == PAD || t == BOS { UNK } else { t })
        .collect()
}

fn check_stripped(seq: &[TokenId]) -> Result<(), BleuError> {
    match seq.iter().find(|&&t| t == PAD || t == BOS || t == EOS) {
        Some(&t) => Err(BleuError::UnstrippedSpecial(t)),
        None => Ok(()),
    }
}

fn ngram_counts(seq: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped matches and hypothesis n-gram total for order `n`.
fn matches(hyp: &[TokenId], reference: &[TokenId], n: usize) -> (usize, usize) {
    let total = (hyp.len() + 1).saturating_sub(n);
    let ref_counts = ngram_counts(reference, n);
    let matched = ngram_counts(hyp, n)
        .into_iter()
        .map(|(g, c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, total)
}

fn brevity_penalty<T: Real>(hyp_len: usize, ref_len: usize) -> T {
    let h = hyp_len.max(1);
    if h < ref_len {
        (T::one() - T::from_count(ref_len) / T::from_count(h)).exp()
    } else {
        T::one()
    }
}

/// BLEU-4 of one hypothesis. Orders n >= 2 with no match (or too short a
/// hypothesis) use add-one smoothing `(m + 1) / (t + 1)`; unigram precision is
/// never smoothed. An empty hypothesis scores 0.
pub fn sentence_bleu<T: Real>(
    hyp: &[TokenId],
    reference: &[TokenId],
) -> Result<BleuScore<T>, BleuError> {
    check_stripped(hyp)?;
    check_stripped(reference)?;
    let bp = brevity_penalty(hyp.len(), reference.len());
    if hyp.is_empty() {
        return Ok(BleuScore::from_parts([T::zero(); MAX_ORDER], bp));
    }
    let mut precisions = [T::zero(); MAX_ORDER];
    for (i, p) in precisions.iter_mut().enumerate() {
        let n = i + 1;
        let (m, t) = matches(hyp, reference, n);
        *p = if n >= 2 && (m == 0 || t == 0) {
            T::from_count(m + 1) / T::from_count(t + 1)
        } else {
            T::from_count(m) / T::from_count(t)
        };
    }
    Ok(BleuScore::from_parts(precisions, bp))
}

/// Corpus BLEU-4 with match and total counts pooled over all sentences and no
/// smoothing.
pub fn corpus_bleu<T: Real, H, R>(hyps: &[H], refs: &[R]) -> Result<BleuScore<T>, BleuError>
where
    H: AsRef<[TokenId]>,
    R: AsRef<[TokenId]>,
{
    if hyps.len() != refs.len() {
        return Err(BleuError::LengthMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(BleuError::EmptyCorpus);
    }
    let mut matched = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (h.as_ref(), r.as_ref());
        check_stripped(h)?;
        check_stripped(r)?;
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let (m, t) = matches(h, r, n);
            matched[n - 1] += m;
            totals[n - 1] += t;
        }
    }
    let bp = brevity_penalty(hyp_len, ref_len);
    let mut precisions = [T::zero(); MAX_ORDER];
    for n in 0..MAX_ORDER {
        if totals[n] > 0 {
            precisions[n] = T::from_count(matched[n]) / T::from_count(totals[n]);
        }
    }
    Ok(BleuScore::from_parts(precisions, bp))
}
