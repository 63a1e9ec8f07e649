//! Rule-based caption metrics: BLEU-1..4, ROUGE-L and CIDEr-D.
//!
//! Sentences are token lists (see [`crate::text::tokenize`]). All scores are
//! raw values in `[0, 1]`; presentation scaling is up to the caller.

mod cider;

use std::collections::BTreeMap;

use thiserror::Error;

pub use cider::{cider_d, corpus_hash, CiderConfig, DfTable, DF_CACHE_MAGIC, DF_CACHE_VERSION};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("at least one reference is required")]
    NoReferences,
    #[error("document-frequency table is empty")]
    EmptyDfTable,
    #[error("df cache {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("df cache is corrupt: {0}")]
    CorruptCache(String),
    #[error("df cache was built for a different reference corpus")]
    StaleCache,
}

pub type Result<T> = std::result::Result<T, BaselineError>;

pub const MAX_N: usize = 4;

pub type Ngram = Vec<String>;
pub type NgramCounts = BTreeMap<Ngram, usize>;

/// Counts of every contiguous `n`-gram.
pub fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> NgramCounts {
    let mut counts = NgramCounts::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for w in tokens.windows(n) {
        let key: Ngram = w.iter().map(|t| t.as_ref().to_string()).collect();
        *counts.entry(key).or_insert(0) += 1;
    }
    counts
}

/// Candidate `n`-gram matches clipped by the per-n-gram maximum count over
/// references, and the candidate's total `n`-gram count.
pub fn clipped_matches<S: AsRef<str>, R: AsRef<[S]>>(candidate: &[S], references: &[R], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let mut max_ref = NgramCounts::new();
    for r in references {
        for (g, c) in ngram_counts(r.as_ref(), n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matched = cand
        .iter()
        .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

/// Reference length closest to `c`; ties go to the shorter one.
pub fn closest_ref_len<R: AsRef<[S]>, S>(c: usize, references: &[R]) -> usize {
    references
        .iter()
        .map(|r| r.as_ref().len())
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

pub fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c == 0 {
        0.0
    } else if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    }
}

/// How sentence-level BLEU treats zero `n`-gram precisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Smoothing {
    /// Plain clipped precisions; any zero makes the score zero.
    #[default]
    None,
    /// `(matches + 1) / (total + 1)` for `n ≥ 2`.
    AddOne,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BleuScores {
    /// `bleu[k-1]` is BLEU-k.
    pub bleu: [f64; MAX_N],
    /// Precision per `n`, after smoothing.
    pub precisions: [f64; MAX_N],
    pub brevity_penalty: f64,
}

impl BleuScores {
    const ZERO: Self = Self {
        bleu: [0.0; MAX_N],
        precisions: [0.0; MAX_N],
        brevity_penalty: 0.0,
    };

    fn from_counts(matches: [usize; MAX_N], totals: [usize; MAX_N], c: usize, r: usize, smoothing: Smoothing) -> Self {
        if c == 0 {
            return Self::ZERO;
        }
        let mut precisions = [0.0; MAX_N];
        for n in 0..MAX_N {
            let (m, t) = (matches[n] as f64, totals[n] as f64);
            precisions[n] = match smoothing {
                Smoothing::AddOne if n > 0 => (m + 1.0) / (t + 1.0),
                _ if t == 0.0 => 0.0,
                _ => m / t,
            };
        }
        let bp = brevity_penalty(c, r);
        let mut bleu = [0.0; MAX_N];
        let mut log_sum = 0.0;
        for k in 0..MAX_N {
            if precisions[..=k].contains(&0.0) {
                break;
            }
            log_sum += precisions[k].ln();
            bleu[k] = bp * (log_sum / (k + 1) as f64).exp();
        }
        Self {
            bleu,
            precisions,
            brevity_penalty: bp,
        }
    }
}

/// Sentence-level BLEU-1..4 against multiple references.
pub fn bleu<S: AsRef<str>, R: AsRef<[S]>>(candidate: &[S], references: &[R], smoothing: Smoothing) -> Result<BleuScores> {
    if references.is_empty() {
        return Err(BaselineError::NoReferences);
    }
    let mut matches = [0; MAX_N];
    let mut totals = [0; MAX_N];
    for n in 1..=MAX_N {
        (matches[n - 1], totals[n - 1]) = clipped_matches(candidate, references, n);
    }
    let c = candidate.len();
    Ok(BleuScores::from_counts(matches, totals, c, closest_ref_len(c, references), smoothing))
}

/// Corpus BLEU: clipped counts and lengths are pooled over all items before
/// the precisions are formed. No smoothing.
pub fn corpus_bleu<S, R>(items: &[(&[S], &[R])]) -> Result<BleuScores>
where
    S: AsRef<str>,
    R: AsRef<[S]>,
{
    let mut matches = [0; MAX_N];
    let mut totals = [0; MAX_N];
    let (mut c, mut r) = (0, 0);
    for (cand, refs) in items {
        if refs.is_empty() {
            return Err(BaselineError::NoReferences);
        }
        for n in 1..=MAX_N {
            let (m, t) = clipped_matches(cand, refs, n);
            matches[n - 1] += m;
            totals[n - 1] += t;
        }
        c += cand.len();
        r += closest_ref_len(cand.len(), refs);
    }
    Ok(BleuScores::from_counts(matches, totals, c, r, Smoothing::None))
}

/// Length of the longest common subsequence.
pub fn lcs_len<S: PartialEq>(a: &[S], b: &[S]) -> usize {
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

pub const ROUGE_L_BETA: f64 = 1.2;

/// ROUGE-L F-measure, maximised over references.
pub fn rouge_l<S: AsRef<str>, R: AsRef<[S]>>(candidate: &[S], references: &[R]) -> Result<f64> {
    if references.is_empty() {
        return Err(BaselineError::NoReferences);
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let cand: Vec<&str> = candidate.iter().map(AsRef::as_ref).collect();
    let b2 = ROUGE_L_BETA * ROUGE_L_BETA;
    Ok(references
        .iter()
        .map(|r| {
            let r: Vec<&str> = r.as_ref().iter().map(AsRef::as_ref).collect();
            let lcs = lcs_len(&cand, &r) as f64;
            if lcs == 0.0 {
                return 0.0;
            }
            let p = lcs / cand.len() as f64;
            let rec = lcs / r.len() as f64;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn ngram_totals() {
        let t = toks("a b a b c");
        for n in 1..=6 {
            let total: usize = ngram_counts(&t, n).values().sum();
            assert_eq!(total, t.len().saturating_sub(n - 1));
        }
        assert_eq!(ngram_counts(&t, 2)[&toks("a b")], 2);
    }

    #[test]
    fn clipped_unigram_precision_on_over_generation() {
        let cand = toks("the the the the the the the");
        let refs = [toks("the cat is on the mat")];
        assert_eq!(clipped_matches(&cand, &refs, 1), (2, 7));
        let s = bleu(&cand, &refs, Smoothing::None).unwrap();
        assert!((s.precisions[0] - 2.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_match_is_one() {
        let s = toks("a man rides a horse on the beach");
        let b = bleu(&s, &[s.clone()], Smoothing::None).unwrap();
        assert_eq!(b.bleu, [1.0; 4]);
        assert_eq!(rouge_l(&s, &[s.clone()]).unwrap(), 1.0);
    }

    #[test]
    fn zero_four_gram_matches_zero_bleu4() {
        let cand = toks("a dog runs on grass");
        let refs = [toks("a dog runs"), toks("on grass")];
        let b = bleu(&cand, &refs, Smoothing::None).unwrap();
        assert_eq!(b.precisions[3], 0.0);
        assert_eq!(b.bleu[3], 0.0);
        assert!(b.bleu[0] > 0.0);
        let smoothed = bleu(&cand, &refs, Smoothing::AddOne).unwrap();
        assert!(smoothed.bleu[3] > 0.0);
    }

    #[test]
    fn brevity_penalty_uses_closest_shorter_on_ties() {
        let refs = [toks("a b c d"), toks("a b c d e f")];
        // |c| = 5 is equally far from 4 and 6.
        assert_eq!(closest_ref_len(5, &refs), 4);
        assert_eq!(brevity_penalty(5, 4), 1.0);
        assert!((brevity_penalty(3, 4) - (1.0f64 - 4.0 / 3.0).exp()).abs() < 1e-15);
        assert_eq!(bleu(&Vec::<String>::new(), &refs, Smoothing::AddOne).unwrap().bleu, [0.0; 4]);
    }

    #[test]
    fn bleu_matches_hand_computation() {
        let cand = toks("the cat sat on the mat");
        let refs = [toks("the cat is on the mat"), toks("there is a cat on the mat")];
        let b = bleu(&cand, &refs, Smoothing::None).unwrap();
        // unigrams: the×2, cat, on, mat match; sat does not.
        // bigrams: "the cat", "on the", "the mat" match of 5.
        // trigrams: "on the mat" of 4; 4-grams: none of 3.
        let p = [5.0 / 6.0, 3.0 / 5.0, 1.0 / 4.0, 0.0];
        for n in 0..4 {
            assert!((b.precisions[n] - p[n]).abs() < 1e-15);
        }
        assert!((b.bleu[1] - (p[0] * p[1]).sqrt()).abs() < 1e-15);
        assert!((b.bleu[2] - (p[0] * p[1] * p[2]).cbrt()).abs() < 1e-15);
        assert_eq!(b.bleu[3], 0.0);
    }

    #[test]
    fn corpus_bleu_pools_counts() {
        let c1 = toks("a b c d");
        let c2 = toks("x y");
        let r1 = vec![toks("a b c d")];
        let r2 = vec![toks("x z w")];
        let b = corpus_bleu(&[(&c1[..], &r1[..]), (&c2[..], &r2[..])]).unwrap();
        assert!((b.precisions[0] - 5.0 / 6.0).abs() < 1e-15);
        assert!((b.precisions[1] - 3.0 / 4.0).abs() < 1e-15);
        assert!((b.brevity_penalty - (1.0f64 - 7.0 / 6.0).exp()).abs() < 1e-15);
    }

    fn lcs_oracle(a: &[&str], b: &[&str]) -> usize {
        let mut t = vec![vec![0; b.len() + 1]; a.len() + 1];
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                t[i][j] = if a[i - 1] == b[j - 1] {
                    t[i - 1][j - 1] + 1
                } else {
                    t[i - 1][j].max(t[i][j - 1])
                };
            }
        }
        t[a.len()][b.len()]
    }

    #[test]
    fn rouge_l_examples() {
        assert_eq!(lcs_len(&["a", "b", "c", "d"], &["a", "c", "b", "d"]), 3);
        assert_eq!(rouge_l(&toks("a b"), &[toks("c d")]).unwrap(), 0.0);
        let cand = toks("a b c d");
        let r = toks("a c b d e");
        let (p, rec) = (3.0 / 4.0, 3.0 / 5.0);
        let b2 = 1.44;
        let f = (1.0 + b2) * p * rec / (rec + b2 * p);
        assert!((rouge_l(&cand, &[r.clone(), toks("z")]).unwrap() - f).abs() < 1e-15);
        assert_eq!(rouge_l(&Vec::<String>::new(), &[r]).unwrap(), 0.0);
        assert!(rouge_l(&cand, &Vec::<Vec<String>>::new()).is_err());
    }

    #[test]
    fn geometric_mean_is_not_monotone_in_k() {
        // Unigrams are clipped per reference, but the two bigrams match
        // in different references.
        let b = bleu(&toks("c a c"), &[toks("c a"), toks("a c")], Smoothing::None).unwrap();
        assert_eq!(b.precisions[..2], [2.0 / 3.0, 1.0]);
        assert!(b.bleu[1] > b.bleu[0]);
    }

    #[test]
    fn add_one_smoothing_can_raise_higher_orders() {
        // Empty higher-order counts smooth to precision 1.
        let b = bleu(&toks("a a"), &[toks("a")], Smoothing::AddOne).unwrap();
        assert_eq!(b.precisions, [0.5, 0.5, 1.0, 1.0]);
        assert!(b.bleu[2] > b.bleu[1]);
    }

    fn sentence() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]), 0..9)
            .prop_map(|v| v.into_iter().map(str::to_string).collect())
    }

    proptest! {
        #[test]
        fn lcs_matches_table_oracle(a in sentence(), b in sentence()) {
            let a: Vec<&str> = a.iter().map(String::as_str).collect();
            let b: Vec<&str> = b.iter().map(String::as_str).collect();
            prop_assert_eq!(lcs_len(&a, &b), lcs_oracle(&a, &b));
        }

        #[test]
        fn scores_bounded_and_reference_order_free(
            cand in sentence(),
            refs in prop::collection::vec(sentence(), 1..4),
        ) {
            let mut rev = refs.clone();
            rev.reverse();
            for sm in [Smoothing::None, Smoothing::AddOne] {
                let b = bleu(&cand, &refs, sm).unwrap();
                prop_assert_eq!(b, bleu(&cand, &rev, sm).unwrap());
                for v in b.bleu {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
            let r = rouge_l(&cand, &refs).unwrap();
            prop_assert!((0.0..=1.0).contains(&r));
            prop_assert_eq!(r, rouge_l(&cand, &rev).unwrap());
        }

        #[test]
        fn precision_products_are_non_increasing_in_k(
            cand in sentence(),
            refs in prop::collection::vec(sentence(), 1..4),
        ) {
            for sm in [Smoothing::None, Smoothing::AddOne] {
                let b = bleu(&cand, &refs, sm).unwrap();
                let mut product = 1.0;
                for p in b.precisions {
                    prop_assert!(p * product <= product);
                    product *= p;
                }
            }
        }
    }
}
