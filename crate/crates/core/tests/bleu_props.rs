use nmt_mcts::bleu::{corpus_bleu, sentence_bleu, strip_for_bleu, BleuError};
use nmt_mcts::corpus::{TokenId, BOS, EOS, PAD, UNK};
use proptest::prelude::*;

fn words(max_len: usize) -> impl Strategy<Value = Vec<TokenId>> {
    prop::collection::vec(4u32..10, 0..=max_len)
}

#[test]
fn two_sentence_corpus_fixture() {
    // computed independently: pooled matches 8/8, 5/6, 3/4, 1/2 over 8 hyp
    // tokens against 9 reference tokens
    let hyps = vec![vec![5, 6, 7, 8], vec![5, 6, 7, 10]];
    let refs = vec![vec![5, 6, 9, 8], vec![5, 6, 7, 10, 11]];
    let b = corpus_bleu::<f64, _, _>(&hyps, &refs).unwrap();
    assert!((b.value - 0.545353).abs() < 1e-6, "{}", b.value);
    assert!((b.brevity_penalty - (1.0f64 - 9.0 / 8.0).exp()).abs() < 1e-12);
}

#[test]
fn corpus_errors() {
    let e = corpus_bleu::<f64, Vec<TokenId>, Vec<TokenId>>(&[], &[]).unwrap_err();
    assert!(matches!(e, BleuError::EmptyCorpus));
    let e = corpus_bleu::<f64, _, _>(&[vec![4]], &[vec![4], vec![5]]).unwrap_err();
    assert!(matches!(e, BleuError::LengthMismatch { hyps: 1, refs: 2 }));
    assert!(sentence_bleu::<f64>(&[4, EOS], &[4]).is_err());
}

#[test]
fn unk_counts_as_a_word() {
    // emitted PAD becomes UNK: same length, no match
    let hyp = strip_for_bleu(&[4, PAD, 6, 7, EOS, 9]);
    assert_eq!(hyp, vec![4, UNK, 6, 7]);
    let b = sentence_bleu::<f64>(&hyp, &[4, 5, 6, 7]).unwrap();
    assert!((b.precisions[0] - 0.75).abs() < 1e-12);
    assert_eq!(b.brevity_penalty, 1.0);
    assert_eq!(strip_for_bleu(&[EOS, 4]), Vec::<TokenId>::new());
    assert_eq!(strip_for_bleu(&[BOS]), vec![UNK]);
}

proptest! {
    #[test]
    fn sentence_bleu_lies_in_unit_interval(h in words(12), r in words(12)) {
        let b = sentence_bleu::<f64>(&h, &r).unwrap().value;
        prop_assert!((0.0..=1.0).contains(&b));
    }

    #[test]
    fn identical_nonempty_is_one(r in prop::collection::vec(4u32..10, 1..12)) {
        let b = sentence_bleu::<f64>(&r, &r).unwrap().value;
        prop_assert!((b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reference_prefix_scores_its_brevity_penalty(r in prop::collection::vec(4u32..10, 1..15), cut in 0usize..15) {
        // every n-gram of a prefix matches, so only the brevity penalty remains
        let l = cut.min(r.len());
        let b = sentence_bleu::<f64>(&r[..l], &r).unwrap().value;
        let want = if l == 0 { 0.0 } else { (1.0 - r.len() as f64 / l as f64).exp() };
        prop_assert!((b - want).abs() < 1e-12, "{} vs {}", b, want);
    }

    #[test]
    fn longer_reference_prefixes_never_score_lower(r in prop::collection::vec(4u32..10, 2..15)) {
        let scores: Vec<f64> = (1..=r.len())
            .map(|l| sentence_bleu::<f64>(&r[..l], &r).unwrap().value)
            .collect();
        prop_assert!(scores.windows(2).all(|w| w[0] <= w[1] + 1e-15));
    }

    #[test]
    fn unsmoothed_sentence_equals_single_sentence_corpus(h in words(12), r in words(12)) {
        let c = corpus_bleu::<f64, _, _>(std::slice::from_ref(&h), std::slice::from_ref(&r)).unwrap().value;
        if c > 0.0 {
            let s = sentence_bleu::<f64>(&h, &r).unwrap().value;
            prop_assert!((s - c).abs() < 1e-12);
        }
    }

    #[test]
    fn corpus_bleu_ignores_sentence_order(pairs in prop::collection::vec((words(8), words(8)), 1..6), rot in 0usize..6) {
        let (h, r): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
        let k = rot % pairs.len();
        let mut h2 = h.clone();
        let mut r2 = r.clone();
        h2.rotate_left(k);
        r2.rotate_left(k);
        h2.reverse();
        r2.reverse();
        let a = corpus_bleu::<f64, _, _>(&h, &r).unwrap().value;
        let b = corpus_bleu::<f64, _, _>(&h2, &r2).unwrap().value;
        prop_assert!((a - b).abs() < 1e-12);
    }
}
