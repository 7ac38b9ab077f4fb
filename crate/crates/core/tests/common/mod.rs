#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use nmt_mcts::bleu::{sentence_bleu, strip_for_bleu};
use nmt_mcts::corpus::{
    SentencePair, SyntheticTask, SyntheticTaskSpec, TokenId, BOS, EOS, NUM_SPECIALS,
};
use nmt_mcts::model::{State, TabularModel, TrainingSample};
use rand::Rng;

/// Every terminal emission reachable within `max_len` tokens: sequences that
/// end in EOS, plus EOS-free sequences of exactly `max_len` tokens.
pub fn terminal_completions(vocab: usize, max_len: usize) -> Vec<Vec<TokenId>> {
    let mut out = Vec::new();
    let mut frontier: Vec<Vec<TokenId>> = vec![Vec::new()];
    for depth in 1..=max_len {
        let mut next = Vec::new();
        for seq in &frontier {
            for a in 0..vocab as TokenId {
                let mut s = seq.clone();
                s.push(a);
                if a == EOS || depth == max_len {
                    out.push(s);
                } else {
                    next.push(s);
                }
            }
        }
        frontier = next;
    }
    out
}

/// First tokens of every completion attaining the best sentence BLEU.
pub fn best_first_tokens(
    reference: &[TokenId],
    vocab: usize,
    max_len: usize,
) -> (BTreeSet<TokenId>, f64) {
    let r = strip_for_bleu(reference);
    let mut best = f64::NEG_INFINITY;
    let mut firsts = BTreeSet::new();
    for c in terminal_completions(vocab, max_len) {
        let b = sentence_bleu::<f64>(&strip_for_bleu(&c), &r).unwrap().value;
        if b > best + 1e-12 {
            best = b;
            firsts.clear();
        }
        if (b - best).abs() <= 1e-12 {
            firsts.insert(c[0]);
        }
    }
    (firsts, best)
}

/// A synthetic reverse task with `words` source words.
pub fn tiny_task(words: usize, len: usize, mapping_seed: u64) -> SyntheticTask {
    SyntheticTask::new(SyntheticTaskSpec {
        src_vocab_size: words,
        min_len: len,
        max_len: len,
        mapping_seed,
        ..Default::default()
    })
    .unwrap()
}

/// Tabular model with every parameter (value rows included) uniform in `[-scale, scale]`.
pub fn random_tabular<R: Rng>(vocab: usize, scale: f64, rng: &mut R) -> TabularModel<f64> {
    let mut m = TabularModel::new(vocab, "test");
    for p in m.params_mut() {
        *p = rng.gen_range(-scale..=scale);
    }
    m
}

pub fn random_src<R: Rng>(vocab: usize, len: usize, rng: &mut R) -> Vec<TokenId> {
    (0..len)
        .map(|_| rng.gen_range(NUM_SPECIALS as TokenId..vocab as TokenId))
        .collect()
}

/// A state with a random source and a random EOS-free prefix.
pub fn random_state<R: Rng>(vocab: usize, rng: &mut R) -> State {
    let src_len = rng.gen_range(1..=5);
    let src = random_src(vocab, src_len, rng);
    let mut prefix = vec![BOS];
    for _ in 0..rng.gen_range(0..=src_len + 2) {
        let mut a = rng.gen_range(0..vocab as TokenId);
        if a == EOS {
            a = BOS;
        }
        prefix.push(a);
    }
    State { src, prefix }
}

pub fn random_sample<R: Rng>(vocab: usize, k: usize, rng: &mut R) -> TrainingSample<f64> {
    let state = random_state(vocab, rng);
    let mut visit_probs = BTreeMap::new();
    let n = rng.gen_range(0..=k.min(vocab));
    let mut remaining = rng.gen_range(0.2..=1.0);
    for _ in 0..n {
        let a = rng.gen_range(0..vocab as TokenId);
        let p = remaining * rng.gen_range(0.0..1.0);
        remaining -= p;
        *visit_probs.entry(a).or_insert(0.0) += p;
    }
    TrainingSample {
        state,
        visit_probs,
        bleu: rng.gen_range(0.0..=1.0),
    }
}

/// Central finite differences of `f` at `params`.
pub fn numeric_gradient<F: FnMut(&[f64]) -> f64>(params: &[f64], h: f64, mut f: F) -> Vec<f64> {
    let mut x = params.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm; zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn pairs_from(task: &SyntheticTask, n: usize, seed: u64) -> Vec<SentencePair> {
    task.generate(n, seed)
}
