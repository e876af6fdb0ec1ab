//! Token and sequence accuracy, corpus BLEU and ROUGE-1/2/L over id
//! sequences. A trailing EOS is stripped from every sequence before scoring.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::strip_eos;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub token_accuracy: f64,
    pub sequence_accuracy: f64,
    pub bleu: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub n_examples: usize,
}

fn check_aligned(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<()> {
    if hyps.len() != refs.len() {
        return Err(Error::config(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    Ok(())
}

/// Matches at aligned positions over total reference tokens.
pub fn token_accuracy(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<f64> {
    check_aligned(hyps, refs)?;
    let (mut hit, mut total) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (strip_eos(h), strip_eos(r));
        hit += h.iter().zip(r).filter(|(a, b)| a == b).count();
        total += r.len();
    }
    Ok(if total == 0 {
        1.0
    } else {
        hit as f64 / total as f64
    })
}

/// Fraction of hypotheses equal to their reference.
pub fn sequence_accuracy(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<f64> {
    check_aligned(hyps, refs)?;
    if hyps.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let hit = hyps
        .iter()
        .zip(refs)
        .filter(|(h, r)| strip_eos(h) == strip_eos(r))
        .count();
    Ok(hit as f64 / hyps.len() as f64)
}

fn ngrams(seq: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut out = HashMap::new();
    if n > 0 && seq.len() >= n {
        for w in seq.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

fn clipped_overlap(h: &HashMap<&[usize], usize>, r: &HashMap<&[usize], usize>) -> usize {
    h.iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum()
}

/// Corpus BLEU with uniform weights up to `max_n` and brevity penalty
/// `min(1, e^(1−r/c))`. Without smoothing any zero precision gives 0;
/// `smooth` adds one to numerator and denominator for orders above 1.
/// Orders longer than every hypothesis have no n-grams and are left out of
/// the geometric mean.
pub fn bleu(hyps: &[Vec<usize>], refs: &[Vec<usize>], max_n: usize, smooth: bool) -> Result<f64> {
    check_aligned(hyps, refs)?;
    if hyps.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    if max_n == 0 {
        return Err(Error::config("max_n must be at least 1"));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        let (h, rf) = (strip_eos(h), strip_eos(rf));
        c += h.len();
        r += rf.len();
        for n in 1..=max_n {
            let hg = ngrams(h, n);
            matched[n - 1] += clipped_overlap(&hg, &ngrams(rf, n));
            total[n - 1] += hg.values().sum::<usize>();
        }
    }
    if c == 0 {
        return Ok(0.0);
    }
    let orders = total.iter().take_while(|&&t| t > 0).count();
    let mut log_sum = 0.0;
    for n in 0..orders {
        let (mut m, mut t) = (matched[n] as f64, total[n] as f64);
        if smooth && n > 0 {
            m += 1.0;
            t += 1.0;
        }
        if m == 0.0 || t == 0.0 {
            return Ok(0.0);
        }
        log_sum += (m / t).ln();
    }
    let bp = (1.0 - r as f64 / c as f64).exp().min(1.0);
    Ok(bp * (log_sum / orders as f64).exp())
}

fn f1(overlap: usize, hyp_total: usize, ref_total: usize) -> f64 {
    if overlap == 0 || hyp_total == 0 || ref_total == 0 {
        return 0.0;
    }
    let p = overlap as f64 / hyp_total as f64;
    let r = overlap as f64 / ref_total as f64;
    2.0 * p * r / (p + r)
}

/// ROUGE-N F1 from clipped n-gram overlap. Identical non-empty sequences
/// too short to hold an n-gram score 1.
pub fn rouge_n(hyp: &[usize], reference: &[usize], n: usize) -> f64 {
    let (h, r) = (strip_eos(hyp), strip_eos(reference));
    let (hg, rg) = (ngrams(h, n), ngrams(r, n));
    if hg.is_empty() && rg.is_empty() {
        return if !h.is_empty() && h == r { 1.0 } else { 0.0 };
    }
    f1(
        clipped_overlap(&hg, &rg),
        hg.values().sum(),
        rg.values().sum(),
    )
}

fn lcs(a: &[usize], b: &[usize]) -> usize {
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

/// ROUGE-L F1 from the longest common subsequence.
pub fn rouge_l(hyp: &[usize], reference: &[usize]) -> f64 {
    let (h, r) = (strip_eos(hyp), strip_eos(reference));
    f1(lcs(h, r), h.len(), r.len())
}

/// Scores a corpus. ROUGE values are per-example F1 averaged over the corpus.
pub fn evaluate(hyps: &[Vec<usize>], refs: &[Vec<usize>], smooth_bleu: bool) -> Result<EvalReport> {
    check_aligned(hyps, refs)?;
    if hyps.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let n = hyps.len() as f64;
    let mean = |f: &dyn Fn(&[usize], &[usize]) -> f64| {
        hyps.iter().zip(refs).map(|(h, r)| f(h, r)).sum::<f64>() / n
    };
    Ok(EvalReport {
        token_accuracy: token_accuracy(hyps, refs)?,
        sequence_accuracy: sequence_accuracy(hyps, refs)?,
        bleu: bleu(hyps, refs, 4, smooth_bleu)?,
        rouge1: mean(&|h, r| rouge_n(h, r, 1)),
        rouge2: mean(&|h, r| rouge_n(h, r, 2)),
        rouge_l: mean(&|h, r| rouge_l(h, r)),
        n_examples: hyps.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EOS;
    use proptest::prelude::*;

    #[test]
    fn accuracy_examples() {
        let refs = vec![vec![5, 9, 9, EOS]];
        assert_eq!(token_accuracy(&[vec![5, 7]], &refs).unwrap(), 1.0 / 3.0);
        assert_eq!(token_accuracy(&refs, &refs).unwrap(), 1.0);
        assert_eq!(token_accuracy(&[vec![4, 4, 4]], &refs).unwrap(), 0.0);
        assert!(token_accuracy(&[], &refs).is_err());
        assert_eq!(sequence_accuracy(&[vec![5, 9, 9]], &refs).unwrap(), 1.0);
        assert_eq!(sequence_accuracy(&[vec![5, 9]], &refs).unwrap(), 0.0);
    }

    #[test]
    fn bleu_clipping_and_brevity() {
        // "the the the the" vs "the cat": clipped unigram precision 1/4,
        // hypothesis longer than reference so no brevity penalty applies
        let (the, cat) = (10, 11);
        let h = vec![vec![the; 4]];
        let r = vec![vec![the, cat]];
        let got = bleu(&h, &r, 1, false).unwrap();
        assert!((got - 0.25).abs() < 1e-12, "{got}");
        // and swapped: short hypothesis against the long reference
        let got = bleu(&r, &h, 1, false).unwrap();
        let expect = 0.5 * (1.0f64 - 4.0 / 2.0).exp();
        assert!((got - expect).abs() < 1e-12, "{got}");
    }

    #[test]
    fn bleu_identity_empty_and_smoothing() {
        let c = vec![vec![4, 5, 6, 7, 8], vec![9, 4, 5, 6, EOS]];
        assert_eq!(bleu(&c, &c, 4, false).unwrap(), 1.0);
        assert_eq!(bleu(&[vec![EOS], vec![]], &c, 4, false).unwrap(), 0.0);
        let h = vec![vec![4, 9, 5, 8, 7]];
        let r = vec![vec![4, 5, 6, 7, 8]];
        assert_eq!(bleu(&h, &r, 4, false).unwrap(), 0.0);
        // smoothed: p1 = 4/5, p2..p4 = 1/5, 1/4, 1/3 after add-one
        let expect = ((0.8f64).ln() + (0.2f64).ln() + (0.25f64).ln() + (1.0f64 / 3.0).ln()) / 4.0;
        let got = bleu(&h, &r, 4, true).unwrap();
        assert!((got - expect.exp()).abs() < 1e-12);
    }

    #[test]
    fn rouge_examples() {
        let (a, b, c, d) = (4, 5, 6, 7);
        assert!((rouge_l(&[a, b, c, d], &[a, c, d]) - 6.0 / 7.0).abs() < 1e-12);
        assert_eq!(rouge_l(&[a, b], &[a, b]), 1.0);
        assert_eq!(rouge_l(&[a, b], &[c, d]), 0.0);
        assert_eq!(rouge_l(&[], &[]), 0.0);
        assert_eq!(rouge_n(&[a, b, c], &[a, b, c, EOS], 2), 1.0);
        // unigrams: overlap 2 of 3 hyp and 2 of 2 ref
        assert!((rouge_n(&[a, b, d], &[a, b], 1) - 0.8).abs() < 1e-12);
        assert!((rouge_n(&[a, b, d], &[a, b], 2) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn report_on_identity_and_json_names() {
        let c = vec![vec![4, 5, 6, 7, EOS], vec![8, 9, 10, EOS]];
        let rep = evaluate(&c, &c, false).unwrap();
        for v in [
            rep.token_accuracy,
            rep.sequence_accuracy,
            rep.bleu,
            rep.rouge1,
            rep.rouge2,
            rep.rouge_l,
        ] {
            assert_eq!(v, 1.0);
        }
        let json = serde_json::to_value(&rep).unwrap();
        let mut keys: Vec<&str> = json.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        keys.sort_unstable();
        assert_eq!(
            keys,
            ["bleu", "n_examples", "rouge1", "rouge2", "rougeL", "sequence_accuracy", "token_accuracy"]
        );
    }

    fn corpus() -> impl Strategy<Value = Vec<(Vec<usize>, Vec<usize>)>> {
        prop::collection::vec(
            (
                prop::collection::vec(4usize..9, 1..8),
                prop::collection::vec(4usize..9, 1..8),
            ),
            1..6,
        )
    }

    proptest! {
        #[test]
        fn scores_are_order_invariant_and_bounded(pairs in corpus(), rot in 0usize..6) {
            let (h, r): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
            let k = rot % pairs.len();
            let mut hr = h.clone();
            let mut rr = r.clone();
            hr.rotate_left(k);
            rr.rotate_left(k);
            let a = evaluate(&h, &r, false).unwrap();
            let b = evaluate(&hr, &rr, false).unwrap();
            prop_assert!((a.bleu - b.bleu).abs() < 1e-12);
            prop_assert!((a.rouge_l - b.rouge_l).abs() < 1e-12);
            prop_assert!((a.rouge2 - b.rouge2).abs() < 1e-12);
            for v in [a.token_accuracy, a.sequence_accuracy, a.bleu, a.rouge1, a.rouge2, a.rouge_l] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let all_equal = h == r;
            prop_assert_eq!(a.bleu == 1.0, all_equal);
        }

        #[test]
        fn rouge_l_symmetric_for_equal_lengths(
            pair in (1usize..8).prop_flat_map(|n| (
                prop::collection::vec(4usize..8, n),
                prop::collection::vec(4usize..8, n),
            ))
        ) {
            prop_assert_eq!(rouge_l(&pair.0, &pair.1), rouge_l(&pair.1, &pair.0));
        }
    }

    #[test]
    fn short_identity_corpus_scores_one() {
        let corpus = vec![vec![5], vec![6, 7, EOS]];
        let r = evaluate(&corpus, &corpus, false).unwrap();
        for v in [r.bleu, r.rouge1, r.rouge2, r.rouge_l] {
            assert_eq!(v, 1.0);
        }
        assert_eq!(rouge_n(&[5], &[6], 2), 0.0);
        assert_eq!(bleu(&[vec![5]], &[vec![6]], 4, false).unwrap(), 0.0);
    }
}
